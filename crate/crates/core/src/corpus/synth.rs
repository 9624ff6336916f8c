//! Synthetic corpora with a planted relational graph per document.
//!
//! Vocabulary layout:
//!
//! ```text
//! 0                         marker '*'
//! 1 .. 1+S                  relation cues, S = 2 · types² · relations
//! 1+S .. 1+S+N              entity names, N = types · names_per_type
//! 1+S+N .. vocab_size       background
//! ```
//!
//! Every fact `(h, k, t)` gets a head-side cue next to a mention of `h` and a
//! tail-side cue next to a mention of `t`, both indexed by
//! `(type(h), k, type(t))`. Entity pairs are either local (one sentence
//! window holds a mention of each, plus all their cues) or cross-sentence
//! (the two entities never share a window, each side carries its own cues).

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, Entity, Fact, RelationSchema, SENTENCE_WINDOW};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_docs: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub num_relations: usize,
    pub num_types: usize,
    pub names_per_type: usize,
    pub vocab_size: usize,
    /// Probability of each (ordered pair, relation) edge.
    pub edge_prob: f64,
    /// Share of related entity pairs whose mentions never share a window.
    pub cross_fraction: f64,
    pub max_mentions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_docs: 200,
            min_entities: 4,
            max_entities: 8,
            num_relations: 5,
            num_types: 4,
            names_per_type: 8,
            vocab_size: 256,
            edge_prob: 0.03,
            cross_fraction: 0.4,
            max_mentions: 3,
            seed: 7,
        }
    }
}

const MIN_BACKGROUND: usize = 16;

impl SynthConfig {
    pub fn cue_block(&self) -> usize {
        2 * self.num_types * self.num_types * self.num_relations
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_relations < 2 {
            return bad(format!("num_relations must be at least 2, got {}", self.num_relations));
        }
        if self.num_types == 0 || self.names_per_type == 0 {
            return bad("num_types and names_per_type must be positive".into());
        }
        if self.min_entities < 2 || self.min_entities > self.max_entities {
            return bad(format!(
                "entity range [{}, {}] is invalid",
                self.min_entities, self.max_entities
            ));
        }
        if self.max_mentions == 0 {
            return bad("max_mentions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.edge_prob) || !(0.0..=1.0).contains(&self.cross_fraction) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        let needed = 1 + self.cue_block() + self.num_types * self.names_per_type + MIN_BACKGROUND;
        if self.vocab_size < needed {
            return bad(format!(
                "vocab_size {} too small for the signal partition (needs {needed})",
                self.vocab_size
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> RelationSchema {
        RelationSchema {
            relations: (0..self.num_relations).map(|k| format!("rel_{k}")).collect(),
            vocab_size: Some(self.vocab_size),
            num_types: Some(self.num_types),
        }
    }

    fn cue(&self, head_type: usize, rel: usize, tail_type: usize, tail_side: bool) -> u32 {
        let idx = ((head_type * self.num_relations + rel) * self.num_types + tail_type) * 2 + tail_side as usize;
        (1 + idx) as u32
    }

    fn name(&self, type_id: usize, slot: usize) -> u32 {
        (1 + self.cue_block() + type_id * self.names_per_type + slot) as u32
    }

    fn background_range(&self) -> (u32, u32) {
        let lo = 1 + self.cue_block() + self.num_types * self.names_per_type;
        (lo as u32, self.vocab_size as u32)
    }
}

/// One contiguous piece of a sentence: a mention (owned by an entity) plus
/// any cue tokens that follow it.
struct Chunk {
    entity: usize,
    cues: Vec<u32>,
}

struct DocBuilder<'a> {
    cfg: &'a SynthConfig,
    rng: &'a mut ChaCha8Rng,
}

impl DocBuilder<'_> {
    fn background(&mut self) -> u32 {
        let (lo, hi) = self.cfg.background_range();
        self.rng.gen_range(lo..hi)
    }

    /// Lay chunks out in one window, padding with background tokens.
    /// Returns the tokens and, per chunk, the offset of its mention token.
    fn sentence(&mut self, chunks: &[Chunk], names: &[u32]) -> (Vec<u32>, Vec<usize>) {
        let used: usize = chunks.iter().map(|c| 1 + c.cues.len()).sum();
        debug_assert!(used <= SENTENCE_WINDOW);
        let mut slack = SENTENCE_WINDOW - used;
        // Split the background budget into chunks.len() + 1 gaps.
        let mut gaps = vec![0usize; chunks.len() + 1];
        while slack > 0 {
            let g = self.rng.gen_range(0..gaps.len());
            gaps[g] += 1;
            slack -= 1;
        }
        let mut tokens = Vec::with_capacity(SENTENCE_WINDOW);
        let mut offsets = Vec::with_capacity(chunks.len());
        for (c, chunk) in chunks.iter().enumerate() {
            for _ in 0..gaps[c] {
                let b = self.background();
                tokens.push(b);
            }
            offsets.push(tokens.len());
            tokens.push(names[chunk.entity]);
            tokens.extend_from_slice(&chunk.cues);
        }
        for _ in 0..gaps[chunks.len()] {
            let b = self.background();
            tokens.push(b);
        }
        (tokens, offsets)
    }
}

fn generate_document(cfg: &SynthConfig, rng: &mut ChaCha8Rng, doc_id: String) -> Document {
    let n = rng.gen_range(cfg.min_entities..=cfg.max_entities);
    let types: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.num_types)).collect();
    let mut names = Vec::with_capacity(n);
    let mut used_names = HashSet::new();
    for &t in &types {
        let mut slots: Vec<usize> = (0..cfg.names_per_type).collect();
        slots.shuffle(rng);
        let slot = slots
            .iter()
            .copied()
            .find(|&s| !used_names.contains(&cfg.name(t, s)))
            .unwrap_or(slots[0]);
        used_names.insert(cfg.name(t, slot));
        names.push(cfg.name(t, slot));
    }
    let mention_budget: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=cfg.max_mentions)).collect();

    let mut facts = Vec::new();
    for h in 0..n {
        for t in 0..n {
            if h == t {
                continue;
            }
            for k in 0..cfg.num_relations {
                if rng.gen_bool(cfg.edge_prob) {
                    facts.push(Fact::new(h, k, t));
                }
            }
        }
    }

    // Facts grouped by unordered pair; each pair is local or cross-sentence.
    let mut pairs: BTreeMap<(usize, usize), Vec<Fact>> = BTreeMap::new();
    for f in &facts {
        pairs.entry((f.head.min(f.tail), f.head.max(f.tail))).or_default().push(*f);
    }
    let mut cross_pairs = HashSet::new();
    let mut b = DocBuilder { cfg, rng };
    let mut sentences: Vec<Vec<Chunk>> = Vec::new();
    for (&(a, c), fs) in &pairs {
        let is_cross = b.rng.gen_bool(cfg.cross_fraction);
        let cues_for = |e: usize| -> Vec<u32> {
            fs.iter()
                .filter(|f| f.head == e || f.tail == e)
                .map(|f| cfg.cue(types[f.head], f.relation, types[f.tail], f.tail == e))
                .collect()
        };
        let (ca, cc) = (cues_for(a), cues_for(c));
        if is_cross {
            cross_pairs.insert((a, c));
            for (e, cues) in [(a, ca), (c, cc)] {
                for part in cues.chunks(SENTENCE_WINDOW - 1) {
                    sentences.push(vec![Chunk { entity: e, cues: part.to_vec() }]);
                }
            }
        } else {
            let per = (SENTENCE_WINDOW - 2) / 2;
            let rounds = ca.len().max(cc.len()).div_ceil(per).max(1);
            for r in 0..rounds {
                let take = |v: &Vec<u32>| v.iter().skip(r * per).take(per).copied().collect::<Vec<_>>();
                let mut s = vec![
                    Chunk { entity: a, cues: take(&ca) },
                    Chunk { entity: c, cues: take(&cc) },
                ];
                s.shuffle(b.rng);
                sentences.push(s);
            }
        }
    }

    // Top up mentions. Fillers either stand alone or co-occur with an entity
    // that is not cross-linked to them, so cross pairs never share a window.
    let mut placed = vec![0usize; n];
    for s in &sentences {
        for ch in s {
            placed[ch.entity] += 1;
        }
    }
    let is_cross = |x: usize, y: usize| cross_pairs.contains(&(x.min(y), x.max(y)));
    for e in 0..n {
        while placed[e] < mention_budget[e] {
            let partner = if b.rng.gen_bool(0.5) {
                let options: Vec<usize> = (0..n).filter(|&o| o != e && !is_cross(e, o)).collect();
                options.choose(b.rng).copied()
            } else {
                None
            };
            let mut s = vec![Chunk { entity: e, cues: vec![] }];
            placed[e] += 1;
            if let Some(o) = partner {
                s.push(Chunk { entity: o, cues: vec![] });
                placed[o] += 1;
                s.shuffle(b.rng);
            }
            sentences.push(s);
        }
    }
    sentences.shuffle(b.rng);

    let mut tokens = Vec::with_capacity(sentences.len() * SENTENCE_WINDOW);
    let mut mentions: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for s in &sentences {
        let base = tokens.len();
        let (toks, offsets) = b.sentence(s, &names);
        for (ch, off) in s.iter().zip(offsets) {
            mentions[ch.entity].push((base + off, base + off + 1));
        }
        tokens.extend(toks);
    }
    let entities = types
        .iter()
        .zip(mentions)
        .map(|(&type_id, mentions)| Entity { type_id, mentions })
        .collect();
    facts.sort_unstable();
    Document {
        doc_id,
        tokens,
        entities,
        facts,
    }
}

fn generate_with(cfg: &SynthConfig, rng: &mut ChaCha8Rng, count: usize, prefix: &str) -> Vec<Document> {
    (0..count)
        .map(|i| generate_document(cfg, rng, format!("{prefix}-{i:04}")))
        .collect()
}

/// `cfg.num_docs` documents with ids `doc-0000`, `doc-0001`, …
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(generate_with(cfg, &mut rng, cfg.num_docs, "doc"))
}

/// Train and dev corpora from one seeded stream; ids are `train-*` and `dev-*`.
pub fn generate_split(cfg: &SynthConfig, num_train: usize, num_dev: usize) -> Result<(Vec<Document>, Vec<Document>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate_with(cfg, &mut rng, num_train, "train");
    let dev = generate_with(cfg, &mut rng, num_dev, "dev");
    Ok((train, dev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_json, insert_entity_markers};

    fn windows_of(doc: &Document, e: usize) -> HashSet<usize> {
        doc.entities[e].mentions.iter().map(|m| m.0 / SENTENCE_WINDOW).collect()
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig { num_docs: 20, ..Default::default() };
        let a = corpus_to_json(&generate_synthetic_corpus(&cfg).unwrap()).unwrap();
        let b = corpus_to_json(&generate_synthetic_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = SynthConfig { seed: 8, ..cfg };
        assert_ne!(a, corpus_to_json(&generate_synthetic_corpus(&other).unwrap()).unwrap());
    }

    #[test]
    fn zero_edge_probability_gives_no_facts() {
        let cfg = SynthConfig { num_docs: 30, num_relations: 3, edge_prob: 0.0, ..Default::default() };
        for d in generate_synthetic_corpus(&cfg).unwrap() {
            assert!(d.facts.is_empty());
            d.validate(Some(3)).unwrap();
        }
    }

    #[test]
    fn config_errors() {
        let small = SynthConfig { vocab_size: 50, ..Default::default() };
        assert!(matches!(generate_synthetic_corpus(&small), Err(Error::Config(_))));
        let one_rel = SynthConfig { num_relations: 1, ..Default::default() };
        assert!(one_rel.validate().is_err());
    }

    #[test]
    fn default_corpus_statistics() {
        let cfg = SynthConfig::default();
        let docs = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(docs.len(), 200);
        let mut pairs = 0usize;
        let mut facts = 0usize;
        let mut cross_facts = 0usize;
        let mut multi_label = false;
        for d in &docs {
            d.validate(Some(cfg.num_relations)).unwrap();
            let n = d.num_entities();
            assert!((4..=8).contains(&n));
            pairs += n * (n - 1);
            facts += d.facts.len();
            let mut per_pair: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for f in &d.facts {
                *per_pair.entry((f.head, f.tail)).or_default() += 1;
                if windows_of(d, f.head).is_disjoint(&windows_of(d, f.tail)) {
                    cross_facts += 1;
                }
            }
            multi_label |= per_pair.values().any(|&c| c >= 2);
            assert_eq!(d.tokens.len() % SENTENCE_WINDOW, 0);
        }
        let density = facts as f64 / pairs as f64;
        assert!((0.02..=0.3).contains(&density), "density {density}");
        assert!(multi_label);
        let cross = cross_facts as f64 / facts as f64;
        assert!((0.3..=0.5).contains(&cross), "cross share {cross}");
    }

    #[test]
    fn cues_sit_next_to_mentions() {
        let cfg = SynthConfig { num_docs: 40, ..Default::default() };
        for d in generate_synthetic_corpus(&cfg).unwrap() {
            for f in &d.facts {
                let ht = d.entities[f.head].type_id;
                let tt = d.entities[f.tail].type_id;
                for (e, side) in [(f.head, false), (f.tail, true)] {
                    let cue = cfg.cue(ht, f.relation, tt, side);
                    let near = d.entities[e].mentions.iter().any(|&(_, end)| {
                        d.tokens[end..(end + SENTENCE_WINDOW).min(d.tokens.len())].contains(&cue)
                    });
                    assert!(near, "{}: cue for {:?} missing near entity {e}", d.doc_id, f);
                }
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_markers_are_consistent() {
        let cfg = SynthConfig::default();
        let (train, dev) = generate_split(&cfg, 30, 10).unwrap();
        let ids: HashSet<_> = train.iter().map(|d| &d.doc_id).collect();
        assert!(dev.iter().all(|d| !ids.contains(&d.doc_id)));
        for d in train.iter().chain(&dev) {
            let m = insert_entity_markers(d);
            assert_eq!(m.len(), d.tokens.len() + 2 * d.total_mentions());
        }
    }
}
