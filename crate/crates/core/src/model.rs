//! The full document model: encoder, graph convolution, and pair head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Fact, MarkedDocument};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::gcn::{self, GcnConfig, LayerVars, RelationBasis, TransmitScores};
use crate::head::{self, NceConfig, NceSample};
use crate::kge::KgeVariant;
use crate::numerics::{grad_check, Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_relations: usize,
    pub encoder: EncoderConfig,
    pub gcn: GcnConfig,
    pub variant: KgeVariant,
    pub nce: NceConfig,
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.encoder.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_relations == 0 {
            return Err(Error::Config("at least one relation is required".into()));
        }
        if self.encoder.vocab_size == 0 || self.encoder.word_dim == 0 {
            return Err(Error::Config("vocab_size and word_dim must be positive".into()));
        }
        self.variant.validate()?;
        self.variant
            .check_dim(self.hidden())
            .map_err(|e| Error::Config(format!("hidden size {}: {e}", self.hidden())))?;
        self.gcn.validate(&self.variant)?;
        self.nce.validate()
    }
}

/// Ordered pairs `(i, j)`, `i != j`, row-major.
pub fn pair_list(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Row of `(h, t)` in [`pair_list`].
pub fn pair_index(n: usize, h: usize, t: usize) -> usize {
    debug_assert!(h != t && h < n && t < n);
    h * (n - 1) + if t < h { t } else { t - 1 }
}

/// Tape handles for one document.
pub struct Forward {
    pub pairs: Vec<(usize, usize)>,
    pub logits: Var,
    pub heads: Var,
    pub tails: Var,
    pub layers: LayerVars,
}

pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub nce: f64,
    /// NCE summed over the graph layers' entity states.
    pub layer_nce: f64,
    /// Adversarial weights used, flattened over all negatives and terms.
    pub phi: Vec<f64>,
}

/// Per-pair logits and the layer-wise transmitting scores of one document.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub pairs: Vec<(usize, usize)>,
    /// `P x (|R|+1)`, threshold class last.
    pub logits: Tensor,
    pub scores: Vec<TransmitScores>,
}

impl Prediction {
    pub fn decoded(&self) -> Vec<Fact> {
        let mut out = Vec::new();
        if self.pairs.is_empty() {
            return out;
        }
        for (p, &(h, t)) in self.pairs.iter().enumerate() {
            for r in head::decode(self.logits.row_slice(p)) {
                out.push(Fact::new(h, r, t));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.hidden();
        config.encoder.init_params(&mut rng, &mut params);
        RelationBasis::random(&mut rng, config.num_relations, config.gcn.num_basis, d)?.insert_into(&mut params);
        head::init_params(&mut rng, &mut params, d, config.num_relations);
        Ok(Model { config, params })
    }

    /// Check that a document fits this model's vocabulary, types and relations.
    pub fn check_document(&self, doc: &MarkedDocument) -> Result<()> {
        doc.doc.validate(Some(self.config.num_relations))?;
        if doc.doc.num_entities() == 0 {
            return Err(Error::Domain(format!("doc {}: no entities", doc.doc.doc_id)));
        }
        Ok(())
    }

    /// Check that raw documents use only relations, tokens and types this
    /// model was built for.
    pub fn check_compatible(&self, docs: &[Document]) -> Result<()> {
        let enc = &self.config.encoder;
        for d in docs {
            let bad = |what: String| Err(Error::Incompatible(format!("doc {}: {what}", d.doc_id)));
            if let Some(f) = d.facts.iter().find(|f| f.relation >= self.config.num_relations) {
                return bad(format!("relation {} but the model has {}", f.relation, self.config.num_relations));
            }
            if let Some(&t) = d.tokens.iter().find(|&&t| t as usize >= enc.vocab_size) {
                return bad(format!("token {t} outside the model vocabulary of {}", enc.vocab_size));
            }
            if let Some(e) = d.entities.iter().find(|e| e.type_id >= enc.num_types.max(1)) {
                return bad(format!("entity type {} but the model has {}", e.type_id, enc.num_types));
            }
        }
        Ok(())
    }

    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        p: &Bound,
        doc: &MarkedDocument,
        dropout: Option<&mut R>,
    ) -> Result<Forward> {
        forward(&self.config, g, p, doc, dropout)
    }

    pub fn predict(&self, doc: &MarkedDocument) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.params);
        let fwd = self.forward::<ChaCha8Rng>(&mut g, &p, doc, None)?;
        let scores = fwd
            .layers
            .scores
            .iter()
            .enumerate()
            .map(|(t, layer)| {
                let slices: Vec<Tensor> = layer.iter().map(|&v| g.value(v).clone()).collect();
                TransmitScores::from_slices(&slices, t)
            })
            .collect::<Result<_>>()?;
        let logits = g.value(fwd.logits).clone();
        if !logits.is_finite() {
            return Err(Error::Invariant(format!("doc {}: non-finite logits", doc.doc.doc_id)));
        }
        Ok(Prediction { pairs: fwd.pairs, logits, scores })
    }
}

fn forward<R: Rng>(
    cfg: &ModelConfig,
    g: &mut Graph,
    p: &Bound,
    doc: &MarkedDocument,
    dropout: Option<&mut R>,
) -> Result<Forward> {
    let enc = encoder::encode(&cfg.encoder, g, p, doc)?;
    let states = encoder::contextualize(&cfg.encoder, g, &enc, doc)?;
    let e0 = encoder::entity_matrix(g, states, doc)?;
    let r = gcn::relation_embeddings(g, p)?;
    let layers = gcn::run_layers_var(g, &cfg.gcn, &cfg.variant, e0, r, dropout)?;
    let pairs = pair_list(doc.doc.num_entities());
    if pairs.is_empty() {
        let c = cfg.num_relations + 1;
        let d = cfg.hidden();
        let logits = g.constant(Tensor::zeros(&[0, c]));
        let heads = g.constant(Tensor::zeros(&[0, d]));
        let tails = g.constant(Tensor::zeros(&[0, d]));
        return Ok(Forward { pairs, logits, heads, tails, layers });
    }
    let alpha = encoder::entity_attention(g, enc.attn, doc)?;
    let context = head::localized_context_var(g, alpha, enc.h, &pairs)?;
    let (heads, tails) = head::augment_pairs_var(g, p, layers.entities, context, &pairs)?;
    let logits = head::pair_logits_var(g, p, heads, tails)?;
    Ok(Forward { pairs, logits, heads, tails, layers })
}

/// Multi-hot labels, row-major over [`pair_list`] then relations.
pub fn pair_labels(n: usize, num_relations: usize, facts: &[Fact]) -> Vec<bool> {
    let mut labels = vec![false; n * n.saturating_sub(1) * num_relations];
    for f in facts {
        labels[pair_index(n, f.head, f.tail) * num_relations + f.relation] = true;
    }
    labels
}

/// `L_cls + μ L_nce` for one document, or `None` when it has fewer than two entities.
pub fn doc_loss<R: Rng>(
    cfg: &ModelConfig,
    g: &mut Graph,
    p: &Bound,
    doc: &MarkedDocument,
    samples: &[NceSample],
    dropout: Option<&mut R>,
    fixed_phi: Option<&[f64]>,
) -> Result<Option<LossParts>> {
    let n = doc.doc.num_entities();
    if n < 2 {
        return Ok(None);
    }
    let fwd = forward(cfg, g, p, doc, dropout)?;
    let labels = pair_labels(n, cfg.num_relations, &doc.doc.facts);
    let cls = g.at_loss(fwd.logits, &labels)?;
    let negatives: usize = samples.iter().map(|s| s.negatives.len()).sum();
    let mut phi = Vec::new();
    let mut nce_term = |g: &mut Graph, hi: Var, tj: Var, rows_of: &dyn Fn(usize, usize) -> (usize, usize)| {
        let fixed = match fixed_phi {
            Some(f) => Some(
                f.get(phi.len()..phi.len() + negatives)
                    .ok_or_else(|| Error::Shape("fixed weights do not cover the negatives".into()))?,
            ),
            None => None,
        };
        let out = head::nce_loss_var(
            g,
            &cfg.variant,
            hi,
            tj,
            fwd.layers.relations,
            samples,
            rows_of,
            cfg.nce.temperature,
            fixed,
        )?;
        Ok::<_, Error>(out.map(|(v, w)| {
            phi.extend(w);
            v
        }))
    };
    let nce = nce_term(g, fwd.heads, fwd.tails, &|h, t| (pair_index(n, h, t), pair_index(n, h, t)))?;
    let mut layer_terms = Vec::new();
    if cfg.nce.layer_weight > 0.0 {
        for &e in &fwd.layers.inputs {
            if let Some(v) = nce_term(g, e, e, &|h, t| (h, t))? {
                layer_terms.push(v);
            }
        }
    }
    let mut total = head::combined_loss(g, cls, nce, cfg.nce.weight)?;
    let mut layer_nce = 0.0;
    for v in layer_terms {
        layer_nce += g.value(v).item();
        let w = g.scale(v, cfg.nce.layer_weight);
        total = g.add(total, w)?;
    }
    Ok(Some(LossParts {
        total,
        cls: g.value(cls).item(),
        nce: nce.map_or(0.0, |v| g.value(v).item()),
        layer_nce,
        phi,
    }))
}

/// Finite-difference check of the combined loss on one document, reported
/// per parameter name. Negatives are fixed, dropout is off, and the
/// adversarial weights are frozen at their values for the given parameters.
/// `tamper` may alter the analytic gradients before comparison.
pub fn gradient_check(
    model: &Model,
    doc: &MarkedDocument,
    samples: &[NceSample],
    eps: f64,
    tamper: impl Fn(&mut [Tensor]),
) -> Result<Vec<(String, f64)>> {
    let cfg = &model.config;
    let phi = {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &model.params);
        doc_loss::<ChaCha8Rng>(cfg, &mut g, &p, doc, samples, None, None)?
            .ok_or_else(|| Error::Domain("gradient check needs at least two entities".into()))?
            .phi
    };
    let store = &model.params;
    let f = |ps: &[Tensor]| -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect();
        let p = Bound::from_vars(store, &vars)?;
        let parts = doc_loss::<ChaCha8Rng>(cfg, &mut g, &p, doc, samples, None, Some(&phi))?
            .ok_or_else(|| Error::Domain("gradient check needs at least two entities".into()))?;
        g.backward(parts.total)?;
        let mut grads = p.grads(&g);
        tamper(&mut grads);
        Ok((g.value(parts.total).clone(), grads))
    };
    let report = grad_check(f, &store.tensors(), eps)?;
    Ok(store.names().map(str::to_owned).zip(report.per_param).collect())
}
