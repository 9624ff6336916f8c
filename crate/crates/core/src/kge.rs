//! Knowledge-graph-embedding scoring functions and the transmitting operation.
//!
//! Distance models (TransE, RotatE) score `γ − ‖transmit(e_i, r_k) − e_j‖₁`;
//! semantic-matching models (DistMult, ComplEx) score `⟨transmit(e_i, r_k), e_j⟩`.
//! For ComplEx that inner product over interleaved reals equals
//! `Re(Σ e_i · r_k · conj(e_j))`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{sigmoid, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KgeKind {
    TransE,
    RotatE,
    DistMult,
    ComplEx,
}

impl KgeKind {
    pub fn is_distance(self) -> bool {
        matches!(self, KgeKind::TransE | KgeKind::RotatE)
    }

    pub fn is_complex(self) -> bool {
        matches!(self, KgeKind::RotatE | KgeKind::ComplEx)
    }

    pub fn name(self) -> &'static str {
        match self {
            KgeKind::TransE => "transe",
            KgeKind::RotatE => "rotate",
            KgeKind::DistMult => "distmult",
            KgeKind::ComplEx => "complex",
        }
    }
}

impl fmt::Display for KgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(KgeKind::TransE),
            "rotate" => Ok(KgeKind::RotatE),
            "distmult" => Ok(KgeKind::DistMult),
            "complex" => Ok(KgeKind::ComplEx),
            other => Err(Error::Config(format!("unknown KGE variant '{other}'"))),
        }
    }
}

/// A scoring family plus its margin γ (only read by distance models).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgeVariant {
    pub kind: KgeKind,
    pub margin: f64,
}

impl KgeVariant {
    pub const DEFAULT_MARGIN: f64 = 20.0;

    pub fn new(kind: KgeKind, margin: f64) -> Result<Self> {
        let v = KgeVariant { kind, margin };
        v.validate()?;
        Ok(v)
    }

    pub fn transe(margin: f64) -> Self {
        KgeVariant { kind: KgeKind::TransE, margin }
    }

    pub fn rotate(margin: f64) -> Self {
        KgeVariant { kind: KgeKind::RotatE, margin }
    }

    pub fn distmult() -> Self {
        KgeVariant { kind: KgeKind::DistMult, margin: 0.0 }
    }

    pub fn complex() -> Self {
        KgeVariant { kind: KgeKind::ComplEx, margin: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_distance() && !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "{} needs a positive margin, got {}",
                self.kind, self.margin
            )));
        }
        Ok(())
    }

    /// Check a dimension against this variant.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.kind.is_complex() && d % 2 != 0 {
            return Err(Error::Domain(format!(
                "{} needs an even embedding dimension, got {d}",
                self.kind
            )));
        }
        Ok(())
    }

    fn check_triple(&self, a: &[f64], b: &[f64], c: &[f64]) -> Result<()> {
        if a.len() != b.len() || b.len() != c.len() {
            return shape_err(format!(
                "triple dimensions {} / {} / {}",
                a.len(),
                b.len(),
                c.len()
            ));
        }
        self.check_dim(a.len())
    }
}

fn unit(re: f64, im: f64) -> (f64, f64) {
    let n = (re * re + im * im).sqrt();
    if n > 0.0 {
        (re / n, im / n)
    } else {
        (1.0, 0.0)
    }
}

/// The transmitting operation `e ⊕ r`.
///
/// TransE adds, DistMult multiplies elementwise, ComplEx takes the complex
/// Hadamard product (both parts kept, so the output stays `d`-dimensional),
/// and RotatE rotates by the unit-modulus phases of `r`.
pub fn transmit(variant: &KgeVariant, e: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    if e.len() != r.len() {
        return shape_err(format!("transmit dims {} vs {}", e.len(), r.len()));
    }
    variant.check_dim(e.len())?;
    Ok(match variant.kind {
        KgeKind::TransE => e.iter().zip(r).map(|(a, b)| a + b).collect(),
        KgeKind::DistMult => e.iter().zip(r).map(|(a, b)| a * b).collect(),
        KgeKind::ComplEx | KgeKind::RotatE => {
            let mut out = vec![0.0; e.len()];
            for c in 0..e.len() / 2 {
                let (a, b) = (e[2 * c], e[2 * c + 1]);
                let (x, y) = if variant.kind == KgeKind::RotatE {
                    unit(r[2 * c], r[2 * c + 1])
                } else {
                    (r[2 * c], r[2 * c + 1])
                };
                out[2 * c] = a * x - b * y;
                out[2 * c + 1] = a * y + b * x;
            }
            out
        }
    })
}

/// The triple score `d_r(e_i, r_k, e_j)`.
pub fn score(variant: &KgeVariant, e_i: &[f64], r_k: &[f64], e_j: &[f64]) -> Result<f64> {
    variant.check_triple(e_i, r_k, e_j)?;
    let moved = transmit(variant, e_i, r_k)?;
    Ok(if variant.kind.is_distance() {
        variant.margin - moved.iter().zip(e_j).map(|(a, b)| (a - b).abs()).sum::<f64>()
    } else {
        moved.iter().zip(e_j).map(|(a, b)| a * b).sum()
    })
}

/// Probability of a directed `r_k` edge from `e_i` to `e_j`: `σ(d_r)`.
pub fn transmit_score(variant: &KgeVariant, e_i: &[f64], r_k: &[f64], e_j: &[f64]) -> Result<f64> {
    Ok(sigmoid(score(variant, e_i, r_k, e_j)?))
}

/// `e ⊕ r` for every row of `rows` (`n x d`) with one relation `r` (`1 x d`),
/// or row-by-row when `r` is also `n x d`.
pub fn transmit_rows(g: &mut Graph, variant: &KgeVariant, rows: Var, r: Var) -> Result<Var> {
    match variant.kind {
        KgeKind::TransE => g.add(rows, r),
        KgeKind::DistMult => g.mul(rows, r),
        KgeKind::ComplEx => g.cmul(rows, r),
        KgeKind::RotatE => {
            let phase = g.unit_phase(r)?;
            g.cmul(rows, phase)
        }
    }
}

/// Score matrix `S[i][j] = d_r(e_i, r, e_j)` for all entity pairs.
pub fn score_matrix(g: &mut Graph, variant: &KgeVariant, entities: Var, r: Var) -> Result<Var> {
    let moved = transmit_rows(g, variant, entities, r)?;
    if variant.kind.is_distance() {
        let dist = g.cdist_l1(moved, entities)?;
        Ok(g.affine(dist, -1.0, variant.margin))
    } else {
        let et = g.transpose(entities)?;
        g.matmul(moved, et)
    }
}

/// Row-aligned triple scores: `out[n] = d_r(heads[n], rels[n], tails[n])`, shape `N x 1`.
pub fn score_rows(g: &mut Graph, variant: &KgeVariant, heads: Var, rels: Var, tails: Var) -> Result<Var> {
    let moved = transmit_rows(g, variant, heads, rels)?;
    if variant.kind.is_distance() {
        let diff = g.sub(moved, tails)?;
        let a = g.abs(diff);
        let dist = g.sum_rows(a)?;
        Ok(g.affine(dist, -1.0, variant.margin))
    } else {
        let prod = g.mul(moved, tails)?;
        g.sum_rows(prod)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ComplexVec, Tensor};
    use proptest::prelude::*;

    const ALL: [KgeKind; 4] = [KgeKind::TransE, KgeKind::RotatE, KgeKind::DistMult, KgeKind::ComplEx];

    fn variant(kind: KgeKind) -> KgeVariant {
        KgeVariant { kind, margin: 20.0 }
    }

    // Independent per-coordinate loop over explicit complex numbers.
    fn oracle_score(kind: KgeKind, gamma: f64, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        match kind {
            KgeKind::TransE => {
                let mut s = 0.0;
                for d in 0..h.len() {
                    s += (h[d] + r[d] - t[d]).abs();
                }
                gamma - s
            }
            KgeKind::DistMult => {
                let mut s = 0.0;
                for d in 0..h.len() {
                    s += h[d] * r[d] * t[d];
                }
                s
            }
            KgeKind::ComplEx => {
                let mut s = 0.0;
                for c in 0..h.len() / 2 {
                    let (hr, hi) = (h[2 * c], h[2 * c + 1]);
                    let (rr, ri) = (r[2 * c], r[2 * c + 1]);
                    let (tr, ti) = (t[2 * c], -t[2 * c + 1]);
                    // (h·r)·conj(t)
                    let (pr, pi) = (hr * rr - hi * ri, hr * ri + hi * rr);
                    s += pr * tr - pi * ti;
                }
                s
            }
            KgeKind::RotatE => {
                let mut s = 0.0;
                for c in 0..h.len() / 2 {
                    let theta = r[2 * c + 1].atan2(r[2 * c]);
                    let (hr, hi) = (h[2 * c], h[2 * c + 1]);
                    let rot_r = hr * theta.cos() - hi * theta.sin();
                    let rot_i = hr * theta.sin() + hi * theta.cos();
                    s += (rot_r - t[2 * c]).abs() + (rot_i - t[2 * c + 1]).abs();
                }
                gamma - s
            }
        }
    }

    #[test]
    fn transe_zero_vectors_score_margin() {
        let z = [0.0; 4];
        assert_eq!(score(&KgeVariant::transe(20.0), &z, &z, &z).unwrap(), 20.0);
    }

    #[test]
    fn transe_hand_example() {
        let s = score(&KgeVariant::transe(20.0), &[1.0, 2.0], &[0.5, -1.0], &[2.0, 0.0]).unwrap();
        assert_eq!(s, 18.5);
    }

    #[test]
    fn distmult_hand_example() {
        let s = score(&KgeVariant::distmult(), &[1.0, 2.0], &[1.0, 1.0], &[3.0, 4.0]).unwrap();
        assert_eq!(s, 11.0);
    }

    #[test]
    fn transmit_examples() {
        assert_eq!(transmit(&KgeVariant::transe(20.0), &[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(transmit(&KgeVariant::distmult(), &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![3.0, 8.0]);
        let e = ComplexVec::pack(&[(1.0, 0.0), (0.0, 1.0)]);
        let r = ComplexVec::pack(&[(0.0, 1.0), (1.0, 0.0)]);
        let out = transmit(&KgeVariant::complex(), e.as_slice(), r.as_slice()).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn transmit_score_examples() {
        let z = [0.0; 2];
        assert_eq!(transmit_score(&KgeVariant::distmult(), &[0.3, -2.0], &z, &[5.0, 1.0]).unwrap(), 0.5);
        let s = transmit_score(&KgeVariant::transe(20.0), &z, &z, &z).unwrap();
        assert!((s - 0.999_999_997_938_846_4).abs() < 1e-15);
        assert!(s < 1.0);
    }

    #[test]
    fn errors() {
        let v = KgeVariant::transe(20.0);
        assert!(matches!(score(&v, &[1.0], &[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
        let c = KgeVariant::complex();
        assert!(matches!(score(&c, &[1.0; 3], &[1.0; 3], &[1.0; 3]), Err(Error::Domain(_))));
        assert!(KgeVariant::new(KgeKind::TransE, 0.0).is_err());
        assert!(KgeVariant::new(KgeKind::DistMult, 0.0).is_ok());
        assert!("bogus".parse::<KgeKind>().is_err());
        assert_eq!("ComplEx".parse::<KgeKind>().unwrap(), KgeKind::ComplEx);
    }

    #[test]
    fn graph_score_matrix_matches_scalar_scores() {
        let e = Tensor::from_rows(&[
            vec![0.1, -0.4, 0.9, 0.2],
            vec![0.5, 0.3, -0.7, 0.0],
            vec![-0.2, 0.8, 0.4, -0.6],
        ])
        .unwrap();
        let r = Tensor::row(&[0.3, -0.1, 0.2, 0.7]);
        for kind in ALL {
            let v = variant(kind);
            let mut g = Graph::new();
            let ev = g.constant(e.clone());
            let rv = g.constant(r.clone());
            let s = score_matrix(&mut g, &v, ev, rv).unwrap();
            let m = g.value(s).clone();
            for i in 0..3 {
                for j in 0..3 {
                    let expect = score(&v, e.row_slice(i), r.data(), e.row_slice(j)).unwrap();
                    assert!((m.at(i, j) - expect).abs() < 1e-12, "{kind} {i} {j}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn scores_match_loop_oracle(
            h in prop::collection::vec(-2.0f64..2.0, 8),
            r in prop::collection::vec(-2.0f64..2.0, 8),
            t in prop::collection::vec(-2.0f64..2.0, 8),
        ) {
            for kind in ALL {
                let got = score(&variant(kind), &h, &r, &t).unwrap();
                let want = oracle_score(kind, 20.0, &h, &r, &t);
                prop_assert!((got - want).abs() <= 1e-10, "{} {} vs {}", kind, got, want);
            }
        }

        #[test]
        fn transmit_score_strictly_inside_unit_interval(
            h in prop::collection::vec(-50.0f64..50.0, 4),
            r in prop::collection::vec(-50.0f64..50.0, 4),
            t in prop::collection::vec(-50.0f64..50.0, 4),
        ) {
            for kind in ALL {
                let s = transmit_score(&variant(kind), &h, &r, &t).unwrap();
                prop_assert!(s > 0.0 && s < 1.0);
            }
        }

        #[test]
        fn transe_transmit_hits_the_margin(
            e in prop::collection::vec(-3.0f64..3.0, 6),
            r in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let v = KgeVariant::transe(20.0);
            let target = transmit(&v, &e, &r).unwrap();
            prop_assert_eq!(score(&v, &e, &r, &target).unwrap(), 20.0);
        }

        #[test]
        fn distmult_symmetric(
            h in prop::collection::vec(-2.0f64..2.0, 6),
            r in prop::collection::vec(-2.0f64..2.0, 6),
            t in prop::collection::vec(-2.0f64..2.0, 6),
        ) {
            let v = KgeVariant::distmult();
            let a = score(&v, &h, &r, &t).unwrap();
            let b = score(&v, &t, &r, &h).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn complex_transmit_preserves_norm_for_unit_relations(
            e in prop::collection::vec(-2.0f64..2.0, 8),
            phases in prop::collection::vec(-3.2f64..3.2, 4),
        ) {
            let r: Vec<(f64, f64)> = phases.iter().map(|p| (p.cos(), p.sin())).collect();
            let r = ComplexVec::pack(&r);
            let out = transmit(&KgeVariant::complex(), &e, r.as_slice()).unwrap();
            let n0: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-10);
        }

        #[test]
        fn complex_pack_unpack_identity(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 0..8)) {
            let c = ComplexVec::pack(&pairs);
            prop_assert_eq!(c.unpack(), pairs);
            let again = ComplexVec::new(c.clone().into_vec()).unwrap();
            prop_assert_eq!(again, c);
        }
    }

    #[test]
    fn transe_is_not_symmetric() {
        let v = KgeVariant::transe(20.0);
        let a = score(&v, &[1.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]).unwrap();
        let b = score(&v, &[2.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_ne!(a, b);
    }
}
