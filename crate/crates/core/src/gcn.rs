//! Constrained transmission-based graph convolution.
//!
//! Relation vectors come from a shared basis (`R = β · Z`). At each layer the
//! transmitting score `A[k][i][j] = σ(d_r(e_i, r_k, e_j))` gates the message
//! `e_j ⊕ r_k` flowing into `e_i`, one relation slice at a time, and the
//! slices are pooled into the next entity matrix.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kge::{score_matrix, transmit_rows, KgeKind, KgeVariant};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{glorot, uniform, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Sum,
    Mean,
    Max,
    Att,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Sum => "sum",
            PoolKind::Mean => "mean",
            PoolKind::Max => "max",
            PoolKind::Att => "att",
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(PoolKind::Sum),
            "mean" => Ok(PoolKind::Mean),
            "max" => Ok(PoolKind::Max),
            "att" | "attention" => Ok(PoolKind::Att),
            other => Err(Error::Config(format!("unknown pooling '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub layers: usize,
    pub pool: PoolKind,
    pub num_basis: usize,
    pub residual: bool,
    pub dropout: f64,
    /// RotatE has no agreed transmitting operation; it must be opted into.
    pub rotate_transmit: bool,
}

impl GcnConfig {
    pub fn validate(&self, variant: &KgeVariant) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.num_basis == 0 {
            return Err(Error::Config("num_basis must be positive".into()));
        }
        if variant.kind == KgeKind::RotatE && self.layers > 0 && !self.rotate_transmit {
            return Err(Error::Config(
                "variant=rotate with layers > 0 requires rotate_transmit=true".into(),
            ));
        }
        Ok(())
    }

    /// Basis count actually used: capped at `|R| · d`.
    pub fn effective_basis(&self, num_relations: usize, d: usize) -> usize {
        self.num_basis.min(num_relations * d).max(1)
    }
}

/// Basis vectors `Z: B x d` and per-relation weights `β: |R| x B`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationBasis {
    pub basis: Tensor,
    pub weights: Tensor,
}

impl RelationBasis {
    pub fn new(basis: Tensor, weights: Tensor) -> Result<Self> {
        if basis.rank() != 2 || weights.rank() != 2 || weights.cols() != basis.rows() {
            return Err(Error::Shape(format!(
                "basis {:?} and weights {:?} do not compose",
                basis.shape(),
                weights.shape()
            )));
        }
        if basis.rows() > weights.rows() * basis.cols() {
            return Err(Error::Shape(format!(
                "{} basis vectors exceed |R| · d = {}",
                basis.rows(),
                weights.rows() * basis.cols()
            )));
        }
        Ok(RelationBasis { basis, weights })
    }

    pub fn random(rng: &mut impl Rng, num_relations: usize, num_basis: usize, d: usize) -> Result<Self> {
        let b = num_basis.min(num_relations * d).max(1);
        Self::new(
            uniform(rng, &[b, d], glorot(b, d)),
            uniform(rng, &[num_relations, b], glorot(num_relations, b)),
        )
    }

    pub fn relation_embeddings(&self) -> Tensor {
        self.weights.matmul(&self.basis).expect("shapes checked at construction")
    }

    pub fn insert_into(&self, store: &mut ParamStore) {
        store.insert("gcn.basis", self.basis.clone());
        store.insert("gcn.beta", self.weights.clone());
    }
}

/// `R = β · Z` on the tape.
pub fn relation_embeddings(g: &mut Graph, p: &Bound) -> Result<Var> {
    g.matmul(p.var("gcn.beta")?, p.var("gcn.basis")?)
}

/// Per-relation `|E| x |E|` score matrices for one layer.
pub fn transmit_score_vars(g: &mut Graph, variant: &KgeVariant, e: Var, r: Var) -> Result<Vec<Var>> {
    let nrel = g.value(r).rows();
    (0..nrel)
        .map(|k| {
            let rk = g.gather(r, &[k])?;
            let s = score_matrix(g, variant, e, rk)?;
            Ok(g.sigmoid(s))
        })
        .collect()
}

/// `Σ_k diag(z_k) E_k` with `Z = softmax_rows(R Eᵀ / √d)`.
pub fn attentive_pool_var(g: &mut Graph, e: Var, r: Var, slices: &[Var]) -> Result<Var> {
    let (te, tr) = (g.value(e), g.value(r));
    if tr.cols() != te.cols() || slices.len() != tr.rows() {
        return Err(Error::Shape(format!(
            "attentive pooling of {} slices with R {:?} and E {:?}",
            slices.len(),
            tr.shape(),
            te.shape()
        )));
    }
    for &s in slices {
        if g.value(s).shape() != te.shape() {
            return Err(Error::Shape("slice shape differs from E".into()));
        }
    }
    let d = te.cols() as f64;
    let et = g.transpose(e)?;
    let sim = g.matmul(r, et)?;
    let sim = g.scale(sim, 1.0 / d.sqrt());
    let z = g.softmax_rows(sim)?;
    let mut out: Option<Var> = None;
    for (k, &slice) in slices.iter().enumerate() {
        let zk = g.gather(z, &[k])?;
        let weighted = g.scale_rows(slice, zk)?;
        out = Some(match out {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    out.ok_or_else(|| Error::Shape("attentive pooling needs at least one relation".into()))
}

fn pool_slices(g: &mut Graph, pool: PoolKind, e: Var, r: Var, slices: &[Var]) -> Result<Var> {
    if slices.is_empty() {
        return Err(Error::Shape("pooling needs at least one relation slice".into()));
    }
    match pool {
        PoolKind::Att => attentive_pool_var(g, e, r, slices),
        PoolKind::Max => g.max(slices),
        PoolKind::Sum | PoolKind::Mean => {
            let mut acc = slices[0];
            for &s in &slices[1..] {
                acc = g.add(acc, s)?;
            }
            if pool == PoolKind::Mean && slices.len() > 1 {
                acc = g.scale(acc, 1.0 / slices.len() as f64);
            }
            Ok(acc)
        }
    }
}

/// One propagation step given the layer's score matrices.
pub fn propagate_var(
    g: &mut Graph,
    variant: &KgeVariant,
    pool: PoolKind,
    e: Var,
    r: Var,
    scores: &[Var],
) -> Result<Var> {
    let nrel = g.value(r).rows();
    if scores.len() != nrel {
        return Err(Error::Shape(format!("{} score slices for {nrel} relations", scores.len())));
    }
    let mut slices = Vec::with_capacity(nrel);
    for (k, &a) in scores.iter().enumerate() {
        let rk = g.gather(r, &[k])?;
        let moved = transmit_rows(g, variant, e, rk)?;
        // Aᵀ: messages from j arrive at i weighted by A[k][j][i].
        let at = g.transpose(a)?;
        slices.push(g.matmul(at, moved)?);
    }
    pool_slices(g, pool, e, r, &slices)
}

/// Output of a stacked run on the tape.
pub struct LayerVars {
    pub entities: Var,
    pub relations: Var,
    /// Score matrices per layer, each holding one `|E| x |E|` matrix per relation.
    pub scores: Vec<Vec<Var>>,
    /// Entity matrix each layer scored (after dropout).
    pub inputs: Vec<Var>,
}

/// Run `cfg.layers` propagation steps. Dropout applies to each layer's
/// entity input when an RNG is supplied.
pub fn run_layers_var<R: Rng>(
    g: &mut Graph,
    cfg: &GcnConfig,
    variant: &KgeVariant,
    e0: Var,
    r: Var,
    mut dropout_rng: Option<&mut R>,
) -> Result<LayerVars> {
    cfg.validate(variant)?;
    let mut e = e0;
    let mut scores = Vec::with_capacity(cfg.layers);
    let mut inputs = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let input = match dropout_rng.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let shape = g.value(e).shape().to_vec();
                let keep = 1.0 - cfg.dropout;
                let n: usize = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                g.mul_const(e, Tensor::new(shape, mask)?)?
            }
            _ => e,
        };
        let a = transmit_score_vars(g, variant, input, r)?;
        let mut next = propagate_var(g, variant, cfg.pool, input, r, &a)?;
        if cfg.residual {
            next = g.add(next, e)?;
        }
        scores.push(a);
        inputs.push(input);
        e = next;
    }
    Ok(LayerVars { entities: e, relations: r, scores, inputs })
}

/// Entity and relation states at layer `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub e: Tensor,
    pub r: Tensor,
    pub t: usize,
}

impl LayerState {
    pub fn new(e: Tensor, r: Tensor) -> Result<Self> {
        if e.rank() != 2 || r.rank() != 2 || e.cols() != r.cols() {
            return Err(Error::Shape(format!("E {:?} and R {:?} disagree", e.shape(), r.shape())));
        }
        Ok(LayerState { e, r, t: 0 })
    }
}

/// `|R| x |E| x |E|` edge probabilities for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmitScores {
    pub a: Tensor,
    pub layer: usize,
}

impl TransmitScores {
    pub fn from_slices(slices: &[Tensor], layer: usize) -> Result<Self> {
        let n = slices.first().map_or(0, |s| s.rows());
        let mut data = Vec::with_capacity(slices.len() * n * n);
        for s in slices {
            if s.shape() != [n, n] {
                return Err(Error::Shape("score slices must be square and equal-sized".into()));
            }
            data.extend_from_slice(s.data());
        }
        Ok(TransmitScores { a: Tensor::new(vec![slices.len(), n, n], data)?, layer })
    }

    pub fn num_relations(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn num_entities(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        let n = self.num_entities();
        self.a.data()[(k * n + i) * n + j]
    }

    pub fn slice(&self, k: usize) -> Tensor {
        let n = self.num_entities();
        Tensor::new(vec![n, n], self.a.data()[k * n * n..(k + 1) * n * n].to_vec())
            .expect("slice of a square block")
    }
}

fn state_vars(g: &mut Graph, state: &LayerState) -> (Var, Var) {
    (g.constant(state.e.clone()), g.constant(state.r.clone()))
}

pub fn compute_transmit_scores(state: &LayerState, variant: &KgeVariant) -> Result<TransmitScores> {
    variant.check_dim(state.e.cols())?;
    let mut g = Graph::new();
    let (e, r) = state_vars(&mut g, state);
    let vars = transmit_score_vars(&mut g, variant, e, r)?;
    let slices: Vec<Tensor> = vars.iter().map(|&v| g.value(v).clone()).collect();
    TransmitScores::from_slices(&slices, state.t)
}

pub fn propagate(
    state: &LayerState,
    scores: &TransmitScores,
    variant: &KgeVariant,
    pool: PoolKind,
) -> Result<LayerState> {
    if scores.num_relations() != state.r.rows() || scores.num_entities() != state.e.rows() {
        return Err(Error::Shape("scores do not match the layer state".into()));
    }
    let mut g = Graph::new();
    let (e, r) = state_vars(&mut g, state);
    let a: Vec<Var> = (0..scores.num_relations())
        .map(|k| g.constant(scores.slice(k)))
        .collect();
    let out = propagate_var(&mut g, variant, pool, e, r, &a)?;
    let next = g.value(out).clone();
    if !next.is_finite() {
        return Err(Error::Invariant(format!("layer {} produced non-finite entities", state.t + 1)));
    }
    Ok(LayerState { e: next, r: state.r.clone(), t: state.t + 1 })
}

pub fn attentive_pool(e: &Tensor, r: &Tensor, slices: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let (ev, rv) = (g.constant(e.clone()), g.constant(r.clone()));
    let sv: Vec<Var> = slices.iter().map(|s| g.constant(s.clone())).collect();
    let out = attentive_pool_var(&mut g, ev, rv, &sv)?;
    Ok(g.value(out).clone())
}

/// Stacked layers without dropout or residual. `layers = 0` returns the input state.
pub fn run_layers(
    state0: &LayerState,
    layers: usize,
    variant: &KgeVariant,
    pool: PoolKind,
) -> Result<(LayerState, Vec<TransmitScores>)> {
    let mut state = state0.clone();
    let mut all = Vec::with_capacity(layers);
    for _ in 0..layers {
        let a = compute_transmit_scores(&state, variant)?;
        state = propagate(&state, &a, variant, pool)?;
        all.push(a);
    }
    Ok((state, all))
}
