//! Documents, their on-disk JSON form, and entity-marker insertion.

mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_split, generate_synthetic_corpus, SynthConfig};

/// Token id reserved for the `*` entity marker.
pub const MARKER_TOKEN: u32 = 0;

/// Tokens per sentence window.
pub const SENTENCE_WINDOW: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "type")]
    pub type_id: usize,
    /// Half-open `[start, end)` token spans.
    pub mentions: Vec<(usize, usize)>,
}

impl Entity {
    pub fn coref_count(&self) -> usize {
        self.mentions.len()
    }
}

/// A golden triple `(head, relation, tail)` over entity and relation indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Fact {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Fact { head, relation, tail }
    }
}

impl Serialize for Fact {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.head, self.relation, self.tail].serialize(s)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RelRef {
    Index(usize),
    Name(String),
}

#[derive(Deserialize)]
struct RawDocument {
    doc_id: String,
    tokens: Vec<u32>,
    entities: Vec<Entity>,
    facts: Vec<(usize, RelRef, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<u32>,
    pub entities: Vec<Entity>,
    pub facts: Vec<Fact>,
}

/// Relation names plus the vocabulary facts a model needs to size its tables.
///
/// Class index `relations.len()` is the threshold class and never appears in
/// golden facts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub relations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_types: Option<usize>,
}

impl RelationSchema {
    pub fn new(relations: Vec<String>) -> Result<Self> {
        let s = RelationSchema {
            relations,
            vocab_size: None,
            num_types: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn threshold_class(&self) -> usize {
        self.relations.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.relations {
            if !seen.insert(r) {
                return Err(Error::Parse(format!("schema: duplicate relation name '{r}'")));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let s: RelationSchema = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("schema: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn nested(a: (usize, usize), b: (usize, usize)) -> bool {
    a != b && a.0 <= b.0 && b.1 <= a.1
}

impl Document {
    /// Check every structural invariant. `num_relations` bounds fact relations when given.
    pub fn validate(&self, num_relations: Option<usize>) -> Result<()> {
        let id = &self.doc_id;
        let err = |msg: String| Err(Error::Parse(format!("doc {id}: {msg}")));
        let n = self.tokens.len();
        for (e, ent) in self.entities.iter().enumerate() {
            if ent.mentions.is_empty() {
                return err(format!("entity {e} has no mentions"));
            }
            let mut spans = ent.mentions.clone();
            for &(s, t) in &spans {
                if s >= t || t > n {
                    return err(format!("entity {e} mention span [{s}, {t}) out of bounds"));
                }
            }
            spans.sort_unstable();
            if spans.windows(2).any(|w| w[1].0 < w[0].1) {
                return err(format!("entity {e} has overlapping mentions"));
            }
        }
        let all: Vec<(usize, usize)> = self
            .entities
            .iter()
            .flat_map(|e| e.mentions.iter().copied())
            .collect();
        for (i, &a) in all.iter().enumerate() {
            for &b in &all[i + 1..] {
                if nested(a, b) || nested(b, a) {
                    return err(format!("nested mention spans {a:?} and {b:?}"));
                }
            }
        }
        let ne = self.entities.len();
        let mut seen = HashSet::new();
        for f in &self.facts {
            if f.head >= ne {
                return err("fact head out of range".into());
            }
            if f.tail >= ne {
                return err("fact tail out of range".into());
            }
            if f.head == f.tail {
                return err("fact head equals tail".into());
            }
            if let Some(r) = num_relations {
                if f.relation >= r {
                    return err("fact relation out of range".into());
                }
            }
            if !seen.insert(*f) {
                return err(format!("duplicate fact {:?}", f));
            }
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn total_mentions(&self) -> usize {
        self.entities.iter().map(Entity::coref_count).sum()
    }
}

fn resolve(raw: RawDocument, schema: Option<&RelationSchema>) -> Result<Document> {
    let mut facts = Vec::with_capacity(raw.facts.len());
    for (h, r, t) in raw.facts {
        let rel = match r {
            RelRef::Index(i) => i,
            RelRef::Name(name) => schema
                .and_then(|s| s.index_of(&name))
                .ok_or_else(|| {
                    Error::Parse(format!("doc {}: unknown relation name '{name}'", raw.doc_id))
                })?,
        };
        facts.push(Fact::new(h, rel, t));
    }
    let doc = Document {
        doc_id: raw.doc_id,
        tokens: raw.tokens,
        entities: raw.entities,
        facts,
    };
    doc.validate(schema.map(RelationSchema::num_relations))?;
    Ok(doc)
}

/// Parse a corpus from JSON text. Relations may be indices or, with a schema, names.
pub fn parse_corpus(json: &str, schema: Option<&RelationSchema>) -> Result<Vec<Document>> {
    let raws: Vec<serde_json::Value> =
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("corpus: {e}")))?;
    let mut docs = Vec::with_capacity(raws.len());
    let mut ids = HashSet::new();
    for (i, v) in raws.into_iter().enumerate() {
        let label = v
            .get("doc_id")
            .and_then(|d| d.as_str())
            .map_or_else(|| format!("#{i}"), str::to_owned);
        let raw: RawDocument =
            serde_json::from_value(v).map_err(|e| Error::Parse(format!("doc {label}: {e}")))?;
        let doc = resolve(raw, schema)?;
        if !ids.insert(doc.doc_id.clone()) {
            return Err(Error::Parse(format!("doc {}: duplicate doc_id", doc.doc_id)));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn read_corpus(path: impl AsRef<Path>, schema: Option<&RelationSchema>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    parse_corpus(&text, schema)
}

pub fn corpus_to_json(docs: &[Document]) -> Result<String> {
    Ok(serde_json::to_string(docs)? + "\n")
}

pub fn write_corpus(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, corpus_to_json(docs)?)?;
    Ok(())
}

/// A document after marker insertion, with the bookkeeping the encoder needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedDocument {
    /// Remapped document: marker tokens inserted, spans point at the mention
    /// tokens between their markers, facts unchanged.
    pub doc: Document,
    /// Position of each mention's start marker, per entity, in mention order.
    pub start_markers: Vec<Vec<usize>>,
    /// Sentence-window id of every token.
    pub windows: Vec<usize>,
}

impl MarkedDocument {
    pub fn len(&self) -> usize {
        self.doc.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc.tokens.is_empty()
    }
}

/// Insert `*` before and after every mention.
///
/// Markers are emitted left to right; at a shared boundary the end markers of
/// earlier mentions come before the start markers of later ones, so adjacent
/// spans stay disjoint.
pub fn insert_entity_markers(doc: &Document) -> MarkedDocument {
    let n = doc.tokens.len();
    // (position, entity, mention)
    let mut starts: Vec<(usize, usize, usize)> = Vec::new();
    let mut ends: Vec<(usize, usize, usize)> = Vec::new();
    for (e, ent) in doc.entities.iter().enumerate() {
        for (m, &(s, t)) in ent.mentions.iter().enumerate() {
            starts.push((s, e, m));
            ends.push((t, e, m));
        }
    }
    starts.sort_unstable();
    ends.sort_unstable();

    let window_of = |p: usize| p.min(n.saturating_sub(1)) / SENTENCE_WINDOW;
    let mut tokens = Vec::with_capacity(n + 2 * starts.len());
    let mut windows = Vec::with_capacity(tokens.capacity());
    let mut start_pos: Vec<Vec<usize>> = doc.entities.iter().map(|e| vec![0; e.mentions.len()]).collect();
    let mut end_pos = start_pos.clone();
    let (mut si, mut ei) = (0, 0);
    for p in 0..=n {
        while ei < ends.len() && ends[ei].0 == p {
            let (_, e, m) = ends[ei];
            end_pos[e][m] = tokens.len();
            tokens.push(MARKER_TOKEN);
            windows.push(window_of(p.saturating_sub(1)));
            ei += 1;
        }
        while si < starts.len() && starts[si].0 == p {
            let (_, e, m) = starts[si];
            start_pos[e][m] = tokens.len();
            tokens.push(MARKER_TOKEN);
            windows.push(window_of(p));
            si += 1;
        }
        if p < n {
            tokens.push(doc.tokens[p]);
            windows.push(window_of(p));
        }
    }

    let entities = doc
        .entities
        .iter()
        .enumerate()
        .map(|(e, ent)| Entity {
            type_id: ent.type_id,
            mentions: (0..ent.mentions.len())
                .map(|m| (start_pos[e][m] + 1, end_pos[e][m]))
                .collect(),
        })
        .collect();
    MarkedDocument {
        doc: Document {
            doc_id: doc.doc_id.clone(),
            tokens,
            entities,
            facts: doc.facts.clone(),
        },
        start_markers: start_pos,
        windows,
    }
}
