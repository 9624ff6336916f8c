use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Fact};
use crate::gcn::TransmitScores;

/// Cross-document identity of a fact: entity names stand in for entity ids.
pub type FactKey = (Vec<u32>, usize, Vec<u32>);

/// An entity's surface form: the tokens of its first mention.
pub fn entity_name(doc: &Document, e: usize) -> Vec<u32> {
    let (s, t) = doc.entities[e].mentions[0];
    doc.tokens[s..t].to_vec()
}

pub fn fact_key(doc: &Document, f: &Fact) -> FactKey {
    (entity_name(doc, f.head), f.relation, entity_name(doc, f.tail))
}

pub fn train_fact_set(docs: &[Document]) -> HashSet<FactKey> {
    docs.iter()
        .flat_map(|d| d.facts.iter().map(move |f| fact_key(d, f)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationStats {
    pub relation: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub ign_f1: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
    pub per_relation: Vec<RelationStats>,
    pub auc_definition: String,
    pub warning: Option<String>,
}

pub const AUC_DEFINITION: &str =
    "area under the precision-recall curve traced by sweeping a global offset on the threshold logit";

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// One document's decoded output plus its candidate margins for the AUC sweep.
#[derive(Clone, Debug, Default)]
pub struct DocOutput {
    pub predicted: Vec<Fact>,
    /// `(logit_r − logit_TH, is_gold)` for every pair and relation.
    pub margins: Vec<(f64, bool)>,
}

/// Score predictions against gold facts. `outputs[i]` belongs to `docs[i]`.
pub fn report(docs: &[Document], outputs: &[DocOutput], num_relations: usize, train_facts: &HashSet<FactKey>) -> EvalReport {
    let mut rel: Vec<RelationStats> = (0..num_relations)
        .map(|r| RelationStats { relation: r, ..Default::default() })
        .collect();
    let (mut tp, mut predicted, mut gold) = (0, 0, 0);
    let (mut ign_tp, mut ign_predicted) = (0, 0);
    let mut margins = Vec::new();
    for (doc, out) in docs.iter().zip(outputs) {
        let gold_set: HashSet<&Fact> = doc.facts.iter().collect();
        let pred_set: HashSet<&Fact> = out.predicted.iter().collect();
        gold += gold_set.len();
        predicted += pred_set.len();
        for f in &gold_set {
            if !pred_set.contains(*f) {
                rel[f.relation].fn_ += 1;
            }
        }
        for f in &pred_set {
            let hit = gold_set.contains(*f);
            if hit {
                tp += 1;
                rel[f.relation].tp += 1;
            } else {
                rel[f.relation].fp += 1;
            }
            if !train_facts.contains(&fact_key(doc, f)) {
                ign_predicted += 1;
                ign_tp += hit as usize;
            }
        }
        margins.extend_from_slice(&out.margins);
    }
    for r in &mut rel {
        r.precision = ratio(r.tp, r.tp + r.fp);
        r.recall = ratio(r.tp, r.tp + r.fn_);
        r.f1 = f1(r.precision, r.recall);
    }
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, gold);
    let warning = if docs.is_empty() {
        Some("empty corpus".to_owned())
    } else if gold == 0 {
        Some("corpus has no gold facts".to_owned())
    } else {
        None
    };
    EvalReport {
        micro_f1: f1(precision, recall),
        ign_f1: f1(ratio(ign_tp, ign_predicted), ratio(ign_tp, gold)),
        auc: pr_auc(&mut margins, gold),
        precision,
        recall,
        tp,
        predicted,
        gold,
        per_relation: rel,
        auc_definition: AUC_DEFINITION.to_owned(),
        warning,
    }
}

/// Trapezoidal area under precision-vs-recall as the acceptance threshold
/// sweeps down through the margins. Tied margins enter together.
pub fn pr_auc(margins: &mut [(f64, bool)], gold: usize) -> f64 {
    if gold == 0 || margins.is_empty() {
        return 0.0;
    }
    margins.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut area = 0.0;
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < margins.len() {
        let mut j = i;
        while j < margins.len() && margins[j].0 == margins[i].0 {
            tp += margins[j].1 as usize;
            seen += 1;
            j += 1;
        }
        let (r, p) = (tp as f64 / gold as f64, tp as f64 / seen as f64);
        if i == 0 {
            prev_p = p;
        }
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
        i = j;
    }
    area.clamp(0.0, 1.0)
}

/// Mann-Whitney ROC-AUC with average ranks for ties; `None` without both classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransmitAuc {
    pub auc: f64,
    pub slices_used: usize,
    pub slices_excluded: usize,
}

/// Off-diagonal scores of one relation slice with their golden labels.
pub fn slice_labels(scores: &TransmitScores, k: usize, facts: &[Fact]) -> (Vec<f64>, Vec<bool>) {
    let n = scores.num_entities();
    let gold: HashSet<(usize, usize)> = facts
        .iter()
        .filter(|f| f.relation == k)
        .map(|f| (f.head, f.tail))
        .collect();
    let mut s = Vec::with_capacity(n * n);
    let mut l = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            s.push(scores.get(k, i, j));
            l.push(gold.contains(&(i, j)));
        }
    }
    (s, l)
}

/// ROC-AUC of transmitting scores against the golden adjacency, pooled over
/// every (document, relation) slice that has both edges and non-edges.
pub fn transmit_score_auc<'a>(items: impl IntoIterator<Item = (&'a TransmitScores, &'a [Fact])>) -> TransmitAuc {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let (mut used, mut excluded) = (0, 0);
    for (a, facts) in items {
        for k in 0..a.num_relations() {
            let (s, l) = slice_labels(a, k, facts);
            let pos = l.iter().filter(|&&x| x).count();
            if pos == 0 || pos == l.len() {
                excluded += 1;
                continue;
            }
            used += 1;
            scores.extend(s);
            labels.extend(l);
        }
    }
    TransmitAuc {
        auc: roc_auc(&scores, &labels).unwrap_or(0.0),
        slices_used: used,
        slices_excluded: excluded,
    }
}

/// Per-relation counts keyed by name, for human-readable output.
pub fn per_relation_table(report: &EvalReport, names: &[String]) -> BTreeMap<String, RelationStats> {
    report
        .per_relation
        .iter()
        .map(|r| (names.get(r.relation).cloned().unwrap_or_else(|| r.relation.to_string()), r.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Entity;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn doc(id: &str, facts: Vec<Fact>) -> Document {
        Document {
            doc_id: id.into(),
            tokens: vec![40, 41, 42, 43],
            entities: (0..4).map(|i| Entity { type_id: 0, mentions: vec![(i, i + 1)] }).collect(),
            facts,
        }
    }

    fn out(predicted: Vec<Fact>) -> DocOutput {
        DocOutput { predicted, margins: Vec::new() }
    }

    #[test]
    fn hand_computed_f1() {
        let gold = vec![Fact::new(0, 0, 1), Fact::new(1, 1, 2), Fact::new(2, 0, 3)];
        let d = doc("a", gold);
        let r = report(&[d], &[out(vec![Fact::new(0, 0, 1), Fact::new(3, 1, 0)])], 2, &HashSet::new());
        assert_eq!(r.precision, 0.5);
        assert!((r.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.micro_f1 - 0.4).abs() < 1e-12);
        assert_eq!(r.ign_f1, r.micro_f1);
        assert_eq!(r.tp + r.per_relation.iter().map(|x| x.fp).sum::<usize>(), r.predicted);
        assert_eq!(r.tp + r.per_relation.iter().map(|x| x.fn_).sum::<usize>(), r.gold);
    }

    #[test]
    fn degenerate_predictors() {
        let gold = vec![Fact::new(0, 0, 1), Fact::new(1, 1, 2)];
        let d = doc("a", gold.clone());
        assert_eq!(report(&[d.clone()], &[out(gold)], 2, &HashSet::new()).micro_f1, 1.0);
        assert_eq!(report(&[d], &[out(vec![])], 2, &HashSet::new()).micro_f1, 0.0);
        let empty = report(&[], &[], 2, &HashSet::new());
        assert_eq!(empty.micro_f1, 0.0);
        assert!(empty.warning.is_some());
    }

    #[test]
    fn ign_f1_drops_train_overlap_and_is_order_invariant() {
        let a = doc("a", vec![Fact::new(0, 0, 1), Fact::new(1, 1, 2)]);
        let b = doc("b", vec![Fact::new(2, 0, 3)]);
        let outs = vec![out(vec![Fact::new(0, 0, 1), Fact::new(1, 1, 2)]), out(vec![Fact::new(2, 0, 3)])];
        let train = train_fact_set(&[doc("t", vec![Fact::new(0, 0, 1)])]);
        let r = report(&[a.clone(), b.clone()], &outs, 2, &train);
        assert_eq!(r.micro_f1, 1.0);
        assert!(r.ign_f1 < r.micro_f1);
        let rev = report(&[b, a], &[outs[1].clone(), outs[0].clone()], 2, &train);
        assert_eq!(rev.micro_f1, r.micro_f1);
        assert_eq!(rev.ign_f1, r.ign_f1);
    }

    #[test]
    fn pr_auc_cases() {
        let mut perfect = vec![(3.0, true), (2.0, true), (-1.0, false), (-2.0, false)];
        assert!((pr_auc(&mut perfect, 2) - 1.0).abs() < 1e-12);
        let mut worst = vec![(3.0, false), (2.0, false), (-1.0, true), (-2.0, true)];
        assert!(pr_auc(&mut worst, 2) < 0.5);
        assert_eq!(pr_auc(&mut [], 3), 0.0);
    }

    #[test]
    fn roc_auc_cases() {
        let s = [0.99, 0.01, 0.01, 0.99, 0.01];
        let l = [true, false, false, true, false];
        assert_eq!(roc_auc(&s, &l), Some(1.0));
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        assert_eq!(roc_auc(&s, &flipped), Some(0.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2], &[true, true]), None);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..20000).map(|_| rng.gen()).collect();
        let l: Vec<bool> = (0..20000).map(|_| rng.gen_bool(0.3)).collect();
        let auc = roc_auc(&s, &l).unwrap();
        assert!((auc - 0.5).abs() < 0.05);
        let lf: Vec<bool> = l.iter().map(|x| !x).collect();
        assert!((roc_auc(&s, &lf).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }

    #[test]
    fn transmit_auc_excludes_degenerate_slices() {
        let n = 3;
        let facts = vec![Fact::new(0, 0, 1), Fact::new(2, 0, 0)];
        let mut slices = vec![Tensor::filled(&[n, n], 0.01), Tensor::filled(&[n, n], 0.3)];
        for f in &facts {
            slices[0].set(f.head, f.tail, 0.99);
        }
        let a = TransmitScores::from_slices(&slices, 1).unwrap();
        let r = transmit_score_auc([(&a, facts.as_slice())]);
        assert_eq!(r.auc, 1.0);
        assert_eq!((r.slices_used, r.slices_excluded), (1, 1));
    }
}
