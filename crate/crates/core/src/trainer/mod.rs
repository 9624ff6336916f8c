//! Mini-batch training, evaluation, and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{insert_entity_markers, Document, MarkedDocument, RelationSchema};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gcn::GcnConfig;
use crate::head::{sample_negatives, NceConfig};
use crate::kge::KgeVariant;
use crate::model::{doc_loss, Model, ModelConfig, Prediction};
use crate::numerics::{Graph, Tensor};
use crate::params::Bound;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use metrics::{
    report, roc_auc, train_fact_set, transmit_score_auc, DocOutput, EvalReport, FactKey, RelationStats,
    TransmitAuc,
};
pub use optim::{clip_global_norm, global_norm, AdamW, Schedule};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CONSTGCN_THREADS";

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

/// Model shape for a schema and corpus under a training config.
pub fn model_config(cfg: &TrainConfig, schema: &RelationSchema, corpora: &[&[Document]]) -> ModelConfig {
    let docs = || corpora.iter().flat_map(|c| c.iter());
    let vocab = schema
        .vocab_size
        .unwrap_or_else(|| docs().flat_map(|d| d.tokens.iter()).map(|&t| t as usize + 1).max().unwrap_or(1));
    let types = schema
        .num_types
        .unwrap_or_else(|| docs().flat_map(|d| d.entities.iter()).map(|e| e.type_id + 1).max().unwrap_or(1));
    ModelConfig {
        num_relations: schema.num_relations(),
        encoder: EncoderConfig {
            vocab_size: vocab,
            word_dim: cfg.word_dim,
            num_types: types,
            max_coref: cfg.max_coref,
            type_coref: cfg.type_coref,
            local_attention: cfg.local_attention,
            span_context: cfg.span_context,
        },
        gcn: GcnConfig {
            layers: cfg.effective_layers(),
            pool: cfg.pool,
            num_basis: cfg.num_basis,
            residual: cfg.residual,
            dropout: cfg.dropout,
            rotate_transmit: cfg.rotate_transmit,
        },
        variant: KgeVariant { kind: cfg.variant, margin: cfg.margin },
        nce: NceConfig {
            num_negatives: cfg.negatives,
            temperature: cfg.temperature,
            weight: cfg.nce_weight,
            layer_weight: cfg.layer_nce_weight,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-document losses over the epoch.
    pub l_cls: f64,
    pub l_nce: f64,
    /// Mean layer-state NCE (zero unless that term is enabled).
    pub l_layer_nce: f64,
    pub dev_f1: f64,
    pub dev_ign_f1: f64,
    pub dev_auc: f64,
    /// `None` when the model has no graph layers.
    pub transmit_auc: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,l_cls,l_nce,dev_f1,dev_ign_f1,dev_auc,transmit_auc,l_layer_nce";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let ta = r.transmit_auc.map_or(String::new(), |x| x.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.l_cls, r.l_nce, r.dev_f1, r.dev_ign_f1, r.dev_auc, ta, r.l_layer_nce
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev F1.
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Largest global gradient norm seen after clipping.
    pub max_clipped_norm: f64,
    pub steps: usize,
}

/// Dev-set evaluation used after each epoch and by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub transmit: Option<TransmitAuc>,
}

pub fn predict_marked(model: &Model, docs: &[MarkedDocument]) -> Result<Vec<Prediction>> {
    thread_pool()?.install(|| docs.par_iter().map(|d| model.predict(d)).collect())
}

fn doc_output(pred: &Prediction, doc: &Document, num_relations: usize) -> DocOutput {
    let gold: HashSet<(usize, usize, usize)> = doc.facts.iter().map(|f| (f.head, f.relation, f.tail)).collect();
    let mut margins = Vec::with_capacity(pred.pairs.len() * num_relations);
    for (p, &(h, t)) in pred.pairs.iter().enumerate() {
        let row = pred.logits.row_slice(p);
        for r in 0..num_relations {
            margins.push((row[r] - row[num_relations], gold.contains(&(h, r, t))));
        }
    }
    DocOutput { predicted: pred.decoded(), margins }
}

fn evaluate_marked(model: &Model, docs: &[MarkedDocument], train_facts: &HashSet<FactKey>) -> Result<Evaluation> {
    let preds = predict_marked(model, docs)?;
    let plain: Vec<Document> = docs.iter().map(|d| d.doc.clone()).collect();
    let nrel = model.config.num_relations;
    let outputs: Vec<DocOutput> = preds.iter().zip(&plain).map(|(p, d)| doc_output(p, d, nrel)).collect();
    let report = report(&plain, &outputs, nrel, train_facts);
    let transmit = (model.config.gcn.layers > 0).then(|| {
        transmit_score_auc(
            preds
                .iter()
                .zip(&plain)
                .filter_map(|(p, d)| p.scores.last().map(|s| (s, d.facts.as_slice()))),
        )
    });
    Ok(Evaluation { report, transmit })
}

pub fn mark_corpus(model: &Model, docs: &[Document]) -> Result<Vec<MarkedDocument>> {
    docs.iter()
        .map(|d| {
            let m = insert_entity_markers(d);
            model.check_document(&m)?;
            Ok(m)
        })
        .collect()
}

/// Evaluate predictions and final-layer transmitting scores on `docs`.
pub fn evaluate_with_scores(model: &Model, docs: &[Document], train_facts: &HashSet<FactKey>) -> Result<Evaluation> {
    evaluate_marked(model, &mark_corpus(model, docs)?, train_facts)
}

pub fn evaluate(model: &Model, docs: &[Document], train_facts: &HashSet<FactKey>) -> Result<EvalReport> {
    Ok(evaluate_with_scores(model, docs, train_facts)?.report)
}

fn check_disjoint(train: &[Document], dev: &[Document]) -> Result<()> {
    let ids: HashSet<&str> = train.iter().map(|d| d.doc_id.as_str()).collect();
    if let Some(d) = dev.iter().find(|d| ids.contains(d.doc_id.as_str())) {
        return Err(Error::Config(format!("doc {} appears in both train and dev", d.doc_id)));
    }
    Ok(())
}

struct DocGrad {
    grads: Vec<Tensor>,
    total: f64,
    cls: f64,
    nce: f64,
    layer_nce: f64,
}

fn doc_gradient(model: &Model, doc: &MarkedDocument, rng: &mut ChaCha8Rng) -> Result<Option<DocGrad>> {
    let cfg = &model.config;
    let samples = sample_negatives(rng, doc.doc.num_entities(), &doc.doc.facts, cfg.nce.num_negatives);
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &model.params);
    let Some(parts) = doc_loss(cfg, &mut g, &p, doc, &samples, Some(rng), None)? else {
        return Ok(None);
    };
    g.backward(parts.total)?;
    Ok(Some(DocGrad { grads: p.grads(&g), total: g.value(parts.total).item(), cls: parts.cls, nce: parts.nce, layer_nce: parts.layer_nce }))
}

/// Train with per-epoch callback `on_epoch`.
pub fn train_with(
    train: &[Document],
    dev: &[Document],
    schema: &RelationSchema,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_disjoint(train, dev)?;
    let mut model = Model::new(model_config(cfg, schema, &[train, dev]), cfg.seed)?;
    let train_m = mark_corpus(&model, train)?;
    let dev_m = mark_corpus(&model, dev)?;
    let train_keys = train_fact_set(train);
    let pool = thread_pool()?;

    let batches_per_epoch = train_m.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::new(
        cfg.learning_rate,
        batches_per_epoch * cfg.epochs,
        cfg.warmup_fraction,
        cfg.final_lr_fraction,
    );
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_m.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stagnant = 0;
    let mut step = 0;
    let mut max_clipped_norm: f64 = 0.0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_cls, mut sum_nce, mut sum_layer, mut counted) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results: Vec<Result<Option<DocGrad>>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                        rng.set_stream(((epoch as u64) << 32) | i as u64);
                        doc_gradient(&model, &train_m[i], &mut rng)
                    })
                    .collect()
            });
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for r in results {
                let Some(dg) = r? else { continue };
                for (acc, g) in grads.iter_mut().zip(&dg.grads) {
                    acc.add_assign(g);
                }
                batch_loss += dg.total;
                sum_cls += dg.cls;
                sum_nce += dg.nce;
                sum_layer += dg.layer_nce;
                counted += 1;
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let ids: Vec<&str> = batch.iter().map(|&i| train_m[i].doc.doc_id.as_str()).collect();
                return Err(Error::Divergence {
                    batch: step,
                    detail: format!("non-finite loss or gradient (epoch {epoch}, docs {})", ids.join(" ")),
                });
            }
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            max_clipped_norm = max_clipped_norm.max(global_norm(&grads));
            opt.step(&mut model.params, &grads, schedule.rate(step))?;
            if !model.params.is_finite() {
                return Err(Error::Divergence { batch: step, detail: "non-finite parameters after update".into() });
            }
        }
        let eval = evaluate_marked(&model, &dev_m, &train_keys)?;
        let n = counted.max(1) as f64;
        let record = EpochRecord {
            epoch,
            l_cls: sum_cls / n,
            l_nce: sum_nce / n,
            l_layer_nce: sum_layer / n,
            dev_f1: eval.report.micro_f1,
            dev_ign_f1: eval.report.ign_f1,
            dev_auc: eval.report.auc,
            transmit_auc: eval.transmit.map(|t| t.auc),
        };
        log::info!(
            "epoch {epoch}: l_cls {:.4} l_nce {:.4} dev_f1 {:.4}",
            record.l_cls,
            record.l_nce,
            record.dev_f1
        );
        on_epoch(&record);
        // F1 picks the checkpoint; a rising PR-AUC also counts as progress.
        let mut progressed = false;
        if record.dev_f1 > best_f1 {
            best_f1 = record.dev_f1;
            best = model.clone();
            best_epoch = epoch;
            progressed = true;
        }
        if record.dev_auc > best_auc {
            best_auc = record.dev_auc;
            progressed = true;
        }
        stagnant = if progressed { 0 } else { stagnant + 1 };
        history.push(record);
        if stagnant >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch, history, stopped_early, max_clipped_norm, steps: step })
}

pub fn train(train: &[Document], dev: &[Document], schema: &RelationSchema, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(train, dev, schema, cfg, |_| {})
}
