//! Learned-embedding stand-in for a pretrained language model.
//!
//! Each token row is `[word ; type ; coref]`, where the type and coreference
//! features are only non-zero at mention start markers. One affine map with
//! `tanh` turns that into `H`. Token attention is a row softmax of
//! `H Hᵀ / √d`, restricted to each token's sentence window when
//! `local_attention` is on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MarkedDocument;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{glorot, uniform, Bound, ParamStore};

pub const TYPE_DIM: usize = 20;
pub const COREF_DIM: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub num_types: usize,
    pub max_coref: usize,
    pub type_coref: bool,
    pub local_attention: bool,
    /// Tokens after each start marker averaged into its mention state (0 = off).
    #[serde(default)]
    pub span_context: usize,
}

impl EncoderConfig {
    /// Hidden size `d`.
    pub fn hidden(&self) -> usize {
        if self.type_coref {
            self.word_dim + TYPE_DIM + COREF_DIM
        } else {
            self.word_dim
        }
    }

    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let d = self.hidden();
        store.insert("encoder.word", uniform(rng, &[self.vocab_size, self.word_dim], 1.0));
        if self.type_coref {
            store.insert("encoder.type", uniform(rng, &[self.num_types.max(1), TYPE_DIM], 1.0));
            store.insert("encoder.coref", uniform(rng, &[self.max_coref.max(1), COREF_DIM], 1.0));
        }
        store.insert("encoder.proj", uniform(rng, &[d, d], glorot(d, d)));
        store.insert("encoder.bias", Tensor::zeros(&[1, d]));
    }
}

/// `H` and its token attention, both on the tape.
pub struct Encoded {
    pub h: Var,
    pub attn: Var,
}

/// Feature rows for a marked document: `|D| x d`.
fn token_features(cfg: &EncoderConfig, g: &mut Graph, p: &Bound, doc: &MarkedDocument) -> Result<Var> {
    let tokens: Vec<usize> = doc.doc.tokens.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Domain(format!(
            "doc {}: token id {bad} outside vocabulary of {}",
            doc.doc.doc_id, cfg.vocab_size
        )));
    }
    let words = g.gather(p.var("encoder.word")?, &tokens)?;
    if !cfg.type_coref {
        return Ok(words);
    }
    // Row 0 of each padded table is the zero vector used off-marker.
    let mut type_idx = vec![0usize; tokens.len()];
    let mut coref_idx = vec![0usize; tokens.len()];
    for (e, markers) in doc.start_markers.iter().enumerate() {
        let ent = &doc.doc.entities[e];
        if ent.type_id >= cfg.num_types.max(1) {
            return Err(Error::Domain(format!(
                "doc {}: entity type {} outside {} types",
                doc.doc.doc_id, ent.type_id, cfg.num_types
            )));
        }
        let coref = ent.coref_count().clamp(1, cfg.max_coref.max(1));
        for &m in markers {
            type_idx[m] = ent.type_id + 1;
            coref_idx[m] = coref;
        }
    }
    let zero = g.constant(Tensor::zeros(&[1, TYPE_DIM]));
    let ttab = g.concat_rows(&[zero, p.var("encoder.type")?])?;
    let types = g.gather(ttab, &type_idx)?;
    let zero = g.constant(Tensor::zeros(&[1, COREF_DIM]));
    let ctab = g.concat_rows(&[zero, p.var("encoder.coref")?])?;
    let corefs = g.gather(ctab, &coref_idx)?;
    g.concat_cols(&[words, types, corefs])
}

/// Maximal runs of tokens sharing a sentence window, as `[lo, hi)` ranges.
pub fn window_blocks(doc: &MarkedDocument) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut lo = 0;
    for i in 1..=doc.len() {
        if i == doc.len() || doc.windows[i] != doc.windows[lo] {
            blocks.push((lo, i));
            lo = i;
        }
    }
    blocks
}

fn attention_blocks(cfg: &EncoderConfig, doc: &MarkedDocument) -> Vec<(usize, usize)> {
    if cfg.local_attention {
        window_blocks(doc)
    } else {
        vec![(0, doc.len())]
    }
}

/// Encode a marker-inserted document into `(H, attn)`.
pub fn encode(cfg: &EncoderConfig, g: &mut Graph, p: &Bound, doc: &MarkedDocument) -> Result<Encoded> {
    if doc.is_empty() {
        return Err(Error::Domain(format!("doc {}: no tokens", doc.doc.doc_id)));
    }
    let x = token_features(cfg, g, p, doc)?;
    let proj = g.matmul(x, p.var("encoder.proj")?)?;
    let pre = g.add(proj, p.var("encoder.bias")?)?;
    let h = g.tanh(pre);
    let d = cfg.hidden() as f64;
    let attn = g.block_attention(h, &attention_blocks(cfg, doc), 1.0 / d.sqrt())?;
    Ok(Encoded { h, attn })
}

/// `H + attn · H + S · H`: every row picks up its attention-weighted context,
/// and start-marker rows also the mean of the next `span_context` rows of
/// their window.
pub fn contextualize(cfg: &EncoderConfig, g: &mut Graph, enc: &Encoded, doc: &MarkedDocument) -> Result<Var> {
    let mixed = g.block_matmul(enc.attn, enc.h, &attention_blocks(cfg, doc))?;
    let out = g.add(enc.h, mixed)?;
    if cfg.span_context == 0 {
        return Ok(out);
    }
    let span = g.constant(span_matrix(doc, cfg.span_context));
    let ctx = g.matmul(span, enc.h)?;
    g.add(out, ctx)
}

fn span_matrix(doc: &MarkedDocument, width: usize) -> Tensor {
    let n = doc.len();
    let mut s = Tensor::zeros(&[n, n]);
    for &m in doc.start_markers.iter().flatten() {
        let rows: Vec<usize> = (m + 1..n.min(m + 1 + width)).filter(|&j| doc.windows[j] == doc.windows[m]).collect();
        for &j in &rows {
            s.set(m, j, 1.0 / rows.len() as f64);
        }
    }
    s
}

/// One `m x d` matrix per entity: the rows of `states` at its start markers, in mention order.
pub fn mention_reprs(g: &mut Graph, states: Var, doc: &MarkedDocument) -> Result<Vec<Var>> {
    let rows = g.value(states).rows();
    doc.start_markers
        .iter()
        .enumerate()
        .map(|(e, markers)| {
            if markers.is_empty() || markers.iter().any(|&m| m >= rows) {
                return Err(Error::Invariant(format!(
                    "doc {}: marker bookkeeping for entity {e} does not match {rows} rows",
                    doc.doc.doc_id
                )));
            }
            g.gather(states, markers)
        })
        .collect()
}

/// Elementwise `log Σ exp` over an entity's mention rows: `1 x d`.
pub fn entity_init(g: &mut Graph, mentions: Var) -> Result<Var> {
    if g.value(mentions).rows() == 0 {
        return Err(Error::Domain("entity with no mentions".into()));
    }
    g.logsumexp_cols(mentions)
}

/// Initial entity matrix `E⁽⁰⁾`: `|E| x d`.
pub fn entity_matrix(g: &mut Graph, states: Var, doc: &MarkedDocument) -> Result<Var> {
    let per_entity = mention_reprs(g, states, doc)?;
    let rows: Vec<Var> = per_entity
        .into_iter()
        .map(|m| entity_init(g, m))
        .collect::<Result<_>>()?;
    g.concat_rows(&rows)
}

/// Mean attention row over each entity's start markers: `|E| x |D|`.
pub fn entity_attention(g: &mut Graph, attn: Var, doc: &MarkedDocument) -> Result<Var> {
    let mut rows = Vec::with_capacity(doc.start_markers.len());
    for markers in &doc.start_markers {
        let sel = g.gather(attn, markers)?;
        let total = g.sum_cols(sel)?;
        rows.push(g.scale(total, 1.0 / markers.len() as f64));
    }
    g.concat_rows(&rows)
}
