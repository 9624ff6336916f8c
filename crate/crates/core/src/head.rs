//! Pair representations, the bilinear relation classifier, adaptive-threshold
//! loss, and the self-adversarial NCE loss over augmented entity pairs.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Fact;
use crate::error::{Error, Result};
use crate::kge::{score_rows, KgeVariant};
use crate::numerics::{at_loss_row, log_sigmoid, Graph, Tensor, Var};
use crate::params::{glorot, uniform, Bound, ParamStore};

pub fn init_params(rng: &mut impl Rng, store: &mut ParamStore, d: usize, num_relations: usize) {
    let s = glorot(d, d);
    for name in ["head.ws", "head.wo", "head.wc1", "head.wc2"] {
        store.insert(name, uniform(rng, &[d, d], s));
    }
    let classes = num_relations + 1;
    store.insert("head.wr", uniform(rng, &[classes, d, d], 1.0 / d as f64));
    store.insert("head.br", Tensor::zeros(&[1, classes]));
}

/// Localized context for each pair: `normalize(α_i ∘ α_j) · H`, `P x d`.
/// `alpha` holds one attention row per entity.
pub fn localized_context_var(g: &mut Graph, alpha: Var, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (heads, tails): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let ai = g.gather(alpha, &heads)?;
    let aj = g.gather(alpha, &tails)?;
    let prod = g.mul(ai, aj)?;
    let q = g.normalize_rows(prod)?;
    g.matmul(q, h)
}

/// `(ē_i, ē_j)` rows for each pair: `tanh(e_i W_s + c W_c1)` and `tanh(e_j W_o + c W_c2)`.
pub fn augment_pairs_var(
    g: &mut Graph,
    p: &Bound,
    e: Var,
    context: Var,
    pairs: &[(usize, usize)],
) -> Result<(Var, Var)> {
    let (heads, tails): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let side = |g: &mut Graph, idx: &[usize], w: &str, wc: &str| -> Result<Var> {
        let rows = g.gather(e, idx)?;
        let a = g.matmul(rows, p.var(w)?)?;
        let b = g.matmul(context, p.var(wc)?)?;
        let s = g.add(a, b)?;
        Ok(g.tanh(s))
    };
    let hi = side(g, &heads, "head.ws", "head.wc1")?;
    let tj = side(g, &tails, "head.wo", "head.wc2")?;
    Ok((hi, tj))
}

/// Raw logits `ē_i W_r ē_j + b_r` for every class, threshold class last: `P x (|R|+1)`.
pub fn pair_logits_var(g: &mut Graph, p: &Bound, hi: Var, tj: Var) -> Result<Var> {
    let bil = g.bilinear(hi, p.var("head.wr")?, tj)?;
    g.add(bil, p.var("head.br")?)
}

/// Relations whose logit beats the threshold (last entry).
pub fn decode(logits: &[f64]) -> Vec<usize> {
    match logits.split_last() {
        Some((&th, rest)) => rest
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > th)
            .map(|(r, _)| r)
            .collect(),
        None => Vec::new(),
    }
}

/// Adaptive-thresholding loss for one pair. `positive` holds relation indices
/// (never the threshold class).
pub fn at_loss(logits: &[f64], positive: &[usize]) -> Result<f64> {
    let c = logits
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Shape("at_loss needs the threshold logit".into()))?;
    let mut mask = vec![false; c];
    for &r in positive {
        if r >= c {
            return Err(Error::Domain(format!("positive class {r} is not a relation (threshold is {c})")));
        }
        mask[r] = true;
    }
    Ok(at_loss_row(logits, &mask, None))
}

pub fn localized_context(attn: &Tensor, h: &Tensor, alpha_i: &[usize], alpha_j: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(attn.clone());
    let hv = g.constant(h.clone());
    let rows: Result<Vec<Var>> = [alpha_i, alpha_j]
        .iter()
        .map(|m| {
            if m.is_empty() {
                return Err(Error::Domain("entity without mention markers".into()));
            }
            let sel = g.gather(a, m)?;
            let s = g.sum_cols(sel)?;
            Ok(g.scale(s, 1.0 / m.len() as f64))
        })
        .collect();
    let alpha = g.concat_rows(&rows?)?;
    let c = localized_context_var(&mut g, alpha, hv, &[(0, 1)])?;
    Ok(g.value(c).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NceConfig {
    pub num_negatives: usize,
    pub temperature: f64,
    pub weight: f64,
    /// Weight of the same objective applied to each layer's entity states.
    #[serde(default)]
    pub layer_weight: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        NceConfig { num_negatives: 40, temperature: 1.0, weight: 0.001, layer_weight: 0.0 }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::Config("negatives must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::Config(format!("nce weight must be non-negative, got {}", self.weight)));
        }
        if !(self.layer_weight >= 0.0 && self.layer_weight.is_finite()) {
            return Err(Error::Config(format!(
                "layer nce weight must be non-negative, got {}",
                self.layer_weight
            )));
        }
        Ok(())
    }
}

/// A golden triple with its corrupted `(head, tail)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct NceSample {
    pub positive: Fact,
    pub negatives: Vec<(usize, usize)>,
}

/// Corrupt one side of each fact (fair coin) with another entity of the same
/// document, never producing a self-pair or a golden fact. Facts whose
/// corruptions are all golden get fewer (possibly zero) negatives.
pub fn sample_negatives(rng: &mut impl Rng, num_entities: usize, facts: &[Fact], count: usize) -> Vec<NceSample> {
    if num_entities < 2 {
        return Vec::new();
    }
    let golden: HashSet<(usize, usize, usize)> = facts.iter().map(|f| (f.head, f.relation, f.tail)).collect();
    facts
        .iter()
        .map(|f| {
            let valid = |h: usize, t: usize| h != t && !golden.contains(&(h, f.relation, t));
            let any_head = (0..num_entities).any(|h| valid(h, f.tail));
            let any_tail = (0..num_entities).any(|t| valid(f.head, t));
            let mut negatives = Vec::with_capacity(count);
            if any_head || any_tail {
                while negatives.len() < count {
                    let corrupt_head = rng.gen_bool(0.5);
                    if (corrupt_head && !any_head) || (!corrupt_head && !any_tail) {
                        continue;
                    }
                    let x = rng.gen_range(0..num_entities);
                    let (h, t) = if corrupt_head { (x, f.tail) } else { (f.head, x) };
                    if valid(h, t) {
                        negatives.push((h, t));
                    }
                }
            }
            NceSample { positive: *f, negatives }
        })
        .collect()
}

/// Self-adversarial weights: `softmax(score / τ)` over one positive's negatives.
pub fn adversarial_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - m) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// `−Σ_pos [log σ(s⁺) + Σ_neg φ log σ(−s⁻)]` with `φ` held constant.
///
/// `rows_of` maps an ordered entity pair to its rows in `hi` and `tj`. The
/// weights used are returned (flattened over all negatives); passing them
/// back as `fixed_phi` reproduces the same objective at other parameter
/// values, which is what a finite-difference check needs.
#[allow(clippy::too_many_arguments)]
pub fn nce_loss_var(
    g: &mut Graph,
    variant: &KgeVariant,
    hi: Var,
    tj: Var,
    r: Var,
    samples: &[NceSample],
    rows_of: impl Fn(usize, usize) -> (usize, usize),
    temperature: f64,
    fixed_phi: Option<&[f64]>,
) -> Result<Option<(Var, Vec<f64>)>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut head_rows = Vec::new();
    let mut tail_rows = Vec::new();
    let mut rels = Vec::new();
    for s in samples {
        let pairs = std::iter::once((s.positive.head, s.positive.tail)).chain(s.negatives.iter().copied());
        for (h, t) in pairs {
            let (a, b) = rows_of(h, t);
            head_rows.push(a);
            tail_rows.push(b);
            rels.push(s.positive.relation);
        }
    }
    let rows = head_rows.len();
    let heads = g.gather(hi, &head_rows)?;
    let tails = g.gather(tj, &tail_rows)?;
    let rk = g.gather(r, &rels)?;
    let scores = score_rows(g, variant, heads, rk, tails)?;
    let values = g.value(scores).data().to_vec();

    // Coefficient c and sign per row: loss = −Σ c · log σ(sign · s).
    let mut sign = Vec::with_capacity(rows);
    let mut coef = Vec::with_capacity(rows);
    let mut all_phi = Vec::with_capacity(rows - samples.len());
    let mut at = 0;
    for s in samples {
        sign.push(1.0);
        coef.push(1.0);
        let n = s.negatives.len();
        let phi = match fixed_phi {
            Some(f) => f
                .get(all_phi.len()..all_phi.len() + n)
                .ok_or_else(|| Error::Shape("fixed weights do not cover the negatives".into()))?
                .to_vec(),
            None => adversarial_weights(&values[at + 1..at + 1 + n], temperature),
        };
        sign.extend(std::iter::repeat(-1.0).take(n));
        coef.extend_from_slice(&phi);
        all_phi.extend(phi);
        at += 1 + n;
    }
    let n = rows;
    let signed = g.mul_const(scores, Tensor::new(vec![n, 1], sign)?)?;
    let ls = g.log_sigmoid(signed);
    let weighted = g.mul_const(ls, Tensor::new(vec![n, 1], coef)?)?;
    let total = g.sum_all(weighted);
    Ok(Some((g.scale(total, -1.0), all_phi)))
}

/// Plain NCE loss from precomputed scores: one positive score and its negative scores per sample.
pub fn nce_loss(groups: &[(f64, Vec<f64>)], temperature: f64) -> f64 {
    groups
        .iter()
        .map(|(pos, negs)| {
            let phi = adversarial_weights(negs, temperature);
            let neg: f64 = phi.iter().zip(negs).map(|(w, s)| w * log_sigmoid(-s)).sum();
            -(log_sigmoid(*pos) + neg)
        })
        .sum()
}

/// `L_cls + μ · L_nce`.
pub fn combined_loss(g: &mut Graph, cls: Var, nce: Option<Var>, mu: f64) -> Result<Var> {
    match nce {
        Some(n) if mu != 0.0 => {
            let w = g.scale(n, mu);
            g.add(cls, w)
        }
        _ => Ok(cls),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn h3() -> Tensor {
        rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])
    }

    #[test]
    fn localized_context_examples() {
        let h = rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        let mut delta = Tensor::zeros(&[4, 4]);
        delta.set(0, 3, 1.0);
        delta.set(1, 3, 1.0);
        let c = localized_context(&delta, &h, &[0], &[1]).unwrap();
        assert_eq!(c.data(), h.row_slice(3));

        let uni = Tensor::filled(&[4, 4], 0.25);
        let c = localized_context(&uni, &h, &[0], &[2]).unwrap();
        assert!((c.data()[0] - 4.0).abs() < 1e-12 && (c.data()[1] - 5.0).abs() < 1e-12);

        let attn = rows(&[vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let c = localized_context(&attn, &h3(), &[0], &[1]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);

        // Orthogonal attentions fall back to the mean row.
        let c = localized_context(&attn, &h3(), &[1], &[2]).unwrap();
        assert!(c.is_finite());
        assert!((c.data()[0] - 3.0).abs() < 1e-12);
    }

    fn bound_head(d: usize, c: usize, f: impl Fn(&str, &mut Tensor)) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut ChaCha8Rng::seed_from_u64(0), &mut store, d, c);
        for (name, t) in store.iter_mut() {
            f(name, t);
        }
        store
    }

    #[test]
    fn augmentation_examples() {
        let zeros = bound_head(2, 1, |_, t| *t = Tensor::zeros(t.shape()));
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &zeros);
        let e = g.constant(Tensor::zeros(&[2, 2]));
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let (hi, tj) = augment_pairs_var(&mut g, &p, e, c, &[(0, 1)]).unwrap();
        assert_eq!(g.value(hi).data(), &[0.0, 0.0]);
        assert_eq!(g.value(tj).data(), &[0.0, 0.0]);

        let ident = bound_head(2, 1, |name, t| match name {
            "head.ws" => *t = Tensor::identity(2),
            "head.wc1" => *t = Tensor::zeros(&[2, 2]),
            _ => {}
        });
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &ident);
        let e = g.constant(rows(&[vec![0.4, -2.0], vec![30.0, 1.0]]));
        let c = g.constant(rows(&[vec![7.0, -9.0]]));
        let (hi, tj) = augment_pairs_var(&mut g, &p, e, c, &[(0, 1)]).unwrap();
        assert_eq!(g.value(hi).data(), &[0.4f64.tanh(), (-2.0f64).tanh()]);
        assert!(g.value(tj).data().iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn bilinear_logit_examples() {
        let store = bound_head(2, 2, |name, t| match name {
            "head.wr" => *t = Tensor::zeros(t.shape()),
            "head.br" => *t = Tensor::row(&[0.5, -1.0, 2.0]),
            _ => {}
        });
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let x = g.constant(rows(&[vec![0.3, 0.9]]));
        let out = pair_logits_var(&mut g, &p, x, x).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -1.0, 2.0]);

        let mut wr = Tensor::zeros(&[3, 2, 2]);
        wr.data_mut()[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        wr.data_mut()[4..8].copy_from_slice(&[0.2, -0.7, -0.7, 1.5]);
        let store = bound_head(2, 2, |name, t| match name {
            "head.wr" => *t = wr.clone(),
            "head.br" => *t = Tensor::zeros(t.shape()),
            _ => {}
        });
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let ones = g.constant(rows(&[vec![1.0, 1.0]]));
        let out = pair_logits_var(&mut g, &p, ones, ones).unwrap();
        assert_eq!(g.value(out).data()[0], 2.0);
        let a = g.constant(rows(&[vec![0.3, -0.8]]));
        let b = g.constant(rows(&[vec![0.6, 0.1]]));
        let ab = pair_logits_var(&mut g, &p, a, b).unwrap();
        let ba = pair_logits_var(&mut g, &p, b, a).unwrap();
        assert!((g.value(ab).data()[1] - g.value(ba).data()[1]).abs() < 1e-15);
    }

    #[test]
    fn at_loss_examples() {
        let l = at_loss(&[0.7, 0.7, 0.7, 0.7], &[]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        // Only r and TH: L1 = ln 2, and with N empty L2 = 0.
        let l = at_loss(&[1.3, 1.3], &[0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = at_loss(&[800.0, 0.0, 0.0], &[0]).unwrap();
        let l2 = at_loss(&[f64::NEG_INFINITY, 0.0, 0.0], &[]).unwrap();
        assert!((l - l2).abs() < 1e-9);
        assert!(at_loss(&[0.0, 0.0], &[1]).is_err());
    }

    #[test]
    fn at_loss_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let pos: Vec<usize> = (0..5).filter(|_| rng.gen_bool(0.3)).collect();
            assert!(at_loss(&logits, &pos).unwrap() >= 0.0);
        }
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&[1.0, -1.0, 0.0]), vec![0]);
        assert!(decode(&[-1.0, -2.0, 0.0]).is_empty());
        assert_eq!(decode(&[0.5, 3.0, -1.0, 0.0]), vec![0, 1]);
        let shifted: Vec<f64> = [0.5, 3.0, -1.0, 0.0].iter().map(|x| x + 17.0).collect();
        assert_eq!(decode(&shifted), vec![0, 1]);
    }

    #[test]
    fn adversarial_weight_examples() {
        assert_eq!(adversarial_weights(&[2.0, 2.0], 1.0), vec![0.5, 0.5]);
        let w = adversarial_weights(&[0.1, 0.3, 0.2], 1e-4);
        assert!(w[1] > 1.0 - 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s: Vec<f64> = (0..40).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let w = adversarial_weights(&s, rng.gen_range(0.1..3.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nce_examples() {
        assert!(nce_loss(&[(800.0, vec![-800.0, -900.0])], 1.0) < 1e-300);
        let lo = nce_loss(&[(0.5, vec![0.2, -1.0])], 1.0);
        let hi = nce_loss(&[(0.6, vec![0.2, -1.0])], 1.0);
        assert!(hi < lo);
    }

    #[test]
    fn negatives_respect_constraints() {
        let facts = vec![Fact::new(0, 1, 2), Fact::new(3, 0, 1), Fact::new(0, 1, 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = sample_negatives(&mut rng, 4, &facts, 40);
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert_eq!(s.negatives.len(), 40);
            for &(h, t) in &s.negatives {
                assert_ne!(h, t);
                assert!(h == s.positive.head || t == s.positive.tail);
                assert!(!facts.contains(&Fact::new(h, s.positive.relation, t)));
            }
        }
        assert!(sample_negatives(&mut rng, 1, &[], 40).is_empty());
        // Two entities: the only corruptions are self-pairs or the other golden direction.
        let both = vec![Fact::new(0, 0, 1), Fact::new(1, 0, 0)];
        assert!(sample_negatives(&mut rng, 2, &both, 5).iter().all(|s| s.negatives.is_empty()));
    }

    #[test]
    fn graph_nce_matches_plain_and_checks_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 3;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let index = |h: usize, t: usize| pairs.iter().position(|&p| p == (h, t)).unwrap();
        let rows_of = |h: usize, t: usize| (index(h, t), index(h, t));
        let facts = vec![Fact::new(0, 1, 2), Fact::new(2, 0, 1)];
        let samples = sample_negatives(&mut rng, n, &facts, 4);
        for v in [KgeVariant::transe(2.0), KgeVariant::distmult(), KgeVariant::complex()] {
            let params = vec![
                uniform(&mut rng, &[pairs.len(), 4], 0.9),
                uniform(&mut rng, &[pairs.len(), 4], 0.9),
                uniform(&mut rng, &[2, 4], 0.9),
            ];
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
            let (got, phi) = nce_loss_var(&mut g, &v, vars[0], vars[1], vars[2], &samples, rows_of, 0.7, None)
                .unwrap()
                .unwrap();
            let build = |g: &mut Graph, p: &[Var]| -> Result<Var> {
                Ok(nce_loss_var(g, &v, p[0], p[1], p[2], &samples, rows_of, 0.7, Some(&phi))?.unwrap().0)
            };
            let groups: Vec<(f64, Vec<f64>)> = samples
                .iter()
                .map(|s| {
                    let f = s.positive;
                    let sc = |h: usize, t: usize| {
                        let p = index(h, t);
                        crate::kge::score(&v, params[0].row_slice(p), params[2].row_slice(f.relation), params[1].row_slice(p))
                            .unwrap()
                    };
                    (sc(f.head, f.tail), s.negatives.iter().map(|&(h, t)| sc(h, t)).collect())
                })
                .collect();
            assert!((g.value(got).item() - nce_loss(&groups, 0.7)).abs() < 1e-9);
            let report = grad_check_graph(build, &params, 1e-6).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{v:?}: {report:?}");
        }
    }

    #[test]
    fn zero_weight_drops_nce() {
        let mut g = Graph::new();
        let cls = g.param(Tensor::scalar(1.25));
        let nce = g.param(Tensor::scalar(9.0));
        let out = combined_loss(&mut g, cls, Some(nce), 0.0).unwrap();
        assert_eq!(g.value(out).item(), 1.25);
        let out = combined_loss(&mut g, cls, Some(nce), 0.001).unwrap();
        assert!((g.value(out).item() - 1.259).abs() < 1e-12);
        assert_eq!(NceConfig::default().weight, 0.001);
    }
}
