use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use constgcn::corpus::{
    generate_split, insert_entity_markers, read_corpus, write_corpus, Document, Entity, Fact, RelationSchema,
    SynthConfig,
};
use constgcn::encoder::EncoderConfig;
use constgcn::gcn::{GcnConfig, PoolKind};
use constgcn::head::{sample_negatives, NceConfig};
use constgcn::kge::{KgeKind, KgeVariant};
use constgcn::model::{gradient_check, Model, ModelConfig};
use constgcn::trainer::{
    evaluate_with_scores, history_csv, mark_corpus, train_fact_set, train_with, Checkpoint, TrainConfig,
};
use constgcn::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "constgcn", version, about = "Constrained transmission graph convolution for document-level relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/dev corpora and their relation schema.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Write one relation's transmitting scores for one document as CSV.
    ExportScores(ExportArgs),
    /// Finite-difference check of the combined loss on a small random document.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Training documents.
    #[arg(long, default_value_t = 200)]
    docs: usize,
    /// Dev documents.
    #[arg(long, default_value_t = 50)]
    dev_docs: usize,
    #[arg(long, default_value_t = 5)]
    relations: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    min_entities: usize,
    #[arg(long, default_value_t = 8)]
    max_entities: usize,
    #[arg(long, default_value_t = 4)]
    types: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Probability of each (ordered pair, relation) edge.
    #[arg(long, default_value_t = 0.03)]
    edge_prob: f64,
    /// Share of related pairs whose mentions never share a sentence window.
    #[arg(long, default_value_t = 0.4)]
    cross_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Relation schema; defaults to schema.json next to the training corpus.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Config override `key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Training corpus whose facts are excluded for Ign F1.
    #[arg(long)]
    train_facts: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    doc_id: String,
    /// Relation name or index.
    #[arg(long)]
    relation: String,
    /// Layer index; defaults to the last layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Score CSV path; the golden adjacency and manifest are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of entities (2 to 6).
    #[arg(long, default_value_t = 4)]
    size: usize,
    /// Hidden size (2 to 8; even for ComplEx).
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Only this variant; default transe, distmult and complex.
    #[arg(long)]
    variant: Option<KgeKind>,
    /// Only this pooling; default sum and att.
    #[arg(long)]
    pool: Option<PoolKind>,
    /// Only this depth; default 1 and 2.
    #[arg(long)]
    layers: Option<usize>,
    /// Test hook: scale the first parameter's analytic gradient.
    #[arg(long, hide = true)]
    corrupt: bool,
}

/// Written beside every command's artifacts.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: Value,
    seed: u64,
    code_version: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    duration_secs: f64,
}

impl RunManifest {
    fn new(command: &str, config: Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            code_version: env!("CARGO_PKG_VERSION"),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_secs: 0.0,
        }
    }

    fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.into(), path.display().to_string());
        self
    }

    fn write(mut self, path: &Path, started: Instant) -> Result<(), Failure> {
        self.duration_secs = started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self).map_err(Error::from)?;
        std::fs::write(path, text + "\n").map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }
}

/// A command failure and its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => 3,
            Error::Incompatible(_) => 4,
            Error::Config(_) | Error::Parse(_) | Error::Domain(_) | Error::Io(_) => 2,
            Error::Shape(_) | Error::Contract(_) | Error::Invariant(_) | Error::Json(_) => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn print_line(v: &Value) {
    println!("{v}");
}

/// `--schema`, else `schema.json` next to `corpus`, else none.
fn load_schema(explicit: Option<&Path>, corpus: &Path) -> Result<Option<RelationSchema>, Failure> {
    if let Some(p) = explicit {
        return Ok(Some(RelationSchema::read(p)?));
    }
    let beside = corpus.parent().unwrap_or(Path::new(".")).join("schema.json");
    Ok(if beside.is_file() { Some(RelationSchema::read(beside)?) } else { None })
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let synth = SynthConfig {
        num_docs: a.docs,
        min_entities: a.min_entities,
        max_entities: a.max_entities,
        num_relations: a.relations,
        num_types: a.types,
        vocab_size: a.vocab,
        edge_prob: a.edge_prob,
        cross_fraction: a.cross_fraction,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let (train, dev) = generate_split(&synth, a.docs, a.dev_docs)?;
    if a.docs == 0 || a.dev_docs == 0 {
        eprintln!("warning: generating an empty corpus (train {}, dev {})", a.docs, a.dev_docs);
    }
    create_dir(&a.out)?;
    let paths = [("train", a.out.join("train.json")), ("dev", a.out.join("dev.json")), ("schema", a.out.join("schema.json"))];
    let io = |e: Error, p: &Path| Failure::usage(format!("cannot write {}: {e}", p.display()));
    write_corpus(&train, &paths[0].1).map_err(|e| io(e, &paths[0].1))?;
    write_corpus(&dev, &paths[1].1).map_err(|e| io(e, &paths[1].1))?;
    synth.schema().write(&paths[2].1).map_err(|e| io(e, &paths[2].1))?;
    let mut manifest = RunManifest::new("generate", serde_json::to_value(&synth).map_err(Error::from)?, a.seed);
    for (k, p) in &paths {
        manifest.outputs.insert((*k).into(), p.display().to_string());
    }
    manifest.write(&a.out.join("manifest.json"), started)?;
    let facts: usize = train.iter().chain(&dev).map(|d| d.facts.len()).sum();
    print_line(&json!({"command": "generate", "train_docs": train.len(), "dev_docs": dev.len(), "facts": facts, "out": a.out}));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::usage(format!("--set expects key=value, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    let schema_path = a.schema.clone();
    let schema = load_schema(schema_path.as_deref(), &a.train)?
        .ok_or_else(|| Failure::usage("no relation schema: pass --schema or put schema.json beside the training corpus"))?;
    let train = read_corpus(&a.train, Some(&schema))?;
    let dev = read_corpus(&a.dev, Some(&schema))?;
    create_dir(&a.out)?;
    let outcome = train_with(&train, &dev, &schema, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  l_cls {:.4}  l_nce {:.4}  dev_f1 {:.4}  dev_ign_f1 {:.4}",
            r.epoch, r.l_cls, r.l_nce, r.dev_f1, r.dev_ign_f1
        );
    })?;
    let ckpt_path = a.out.join("checkpoint.bin");
    let hist_path = a.out.join("history.csv");
    let ckpt = Checkpoint { model: outcome.best.clone(), train_config: cfg.to_text() };
    ckpt.save(&ckpt_path).map_err(|e| Failure::usage(format!("cannot write {}: {e}", ckpt_path.display())))?;
    write_file(&hist_path, &history_csv(&outcome.history))?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg).map_err(Error::from)?, cfg.seed)
        .input("train", &a.train)
        .input("dev", &a.dev);
    if let Some(p) = &a.config {
        manifest = manifest.input("config", p);
    }
    if let Some(p) = &a.schema {
        manifest = manifest.input("schema", p);
    }
    manifest.outputs.insert("checkpoint".into(), ckpt_path.display().to_string());
    manifest.outputs.insert("history".into(), hist_path.display().to_string());
    manifest.write(&a.out.join("manifest.json"), started)?;
    let best = &outcome.history[outcome.best_epoch - 1];
    print_line(&json!({
        "command": "train",
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "stopped_early": outcome.stopped_early,
        "dev_f1": best.dev_f1,
        "dev_ign_f1": best.dev_ign_f1,
        "dev_auc": best.dev_auc,
        "transmit_auc": best.transmit_auc,
        "checkpoint": ckpt_path,
    }));
    Ok(())
}

/// Load a checkpoint and a corpus that must fit it.
fn load_pair(checkpoint: &Path, corpus: &Path, schema: Option<&Path>) -> Result<(Checkpoint, Vec<Document>), Failure> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| match e {
        Error::Io(io) => Failure::usage(format!("{}: {io}", checkpoint.display())),
        other => other.into(),
    })?;
    let schema = load_schema(schema, corpus)?;
    if let Some(s) = &schema {
        if s.num_relations() != ckpt.model.config.num_relations {
            return Err(Error::Incompatible(format!(
                "schema has {} relations but the checkpoint has {}",
                s.num_relations(),
                ckpt.model.config.num_relations
            ))
            .into());
        }
    }
    let docs = read_corpus(corpus, schema.as_ref())?;
    ckpt.model.check_compatible(&docs)?;
    Ok((ckpt, docs))
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Failure> {
    let (ckpt, docs) = load_pair(&a.checkpoint, &a.corpus, a.schema.as_deref())?;
    let train_keys = match &a.train_facts {
        Some(p) => {
            let schema = load_schema(a.schema.as_deref(), p)?;
            train_fact_set(&read_corpus(p, schema.as_ref())?)
        }
        None => Default::default(),
    };
    let ev = evaluate_with_scores(&ckpt.model, &docs, &train_keys)?;
    let mut v = serde_json::to_value(&ev.report).map_err(Error::from)?;
    v["command"] = json!("eval");
    v["transmit_auc"] = json!(ev.transmit.map(|t| t.auc));
    print_line(&v);
    Ok(())
}

fn cmd_export_scores(a: &ExportArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let (ckpt, docs) = load_pair(&a.checkpoint, &a.corpus, a.schema.as_deref())?;
    let model = &ckpt.model;
    let doc = docs
        .iter()
        .find(|d| d.doc_id == a.doc_id)
        .ok_or_else(|| Failure::usage(format!("unknown doc-id '{}'", a.doc_id)))?;
    let nrel = model.config.num_relations;
    let schema = load_schema(a.schema.as_deref(), &a.corpus)?;
    let relation = match a.relation.parse::<usize>() {
        Ok(k) => k,
        Err(_) => schema
            .as_ref()
            .and_then(|s| s.index_of(&a.relation))
            .ok_or_else(|| Failure::usage(format!("unknown relation '{}'", a.relation)))?,
    };
    if relation >= nrel {
        return Err(Failure::usage(format!("relation {relation} out of range for {nrel} relations")));
    }
    let layers = model.config.gcn.layers;
    if layers == 0 {
        return Err(Failure::usage("the checkpoint has no graph layers, so there are no transmitting scores"));
    }
    let layer = a.layer.unwrap_or(layers - 1);
    if layer >= layers {
        return Err(Failure::usage(format!("layer {layer} out of range for {layers} layers")));
    }
    let marked = mark_corpus(model, std::slice::from_ref(doc))?;
    let pred = model.predict(&marked[0])?;
    let slice = pred.scores[layer].slice(relation);
    let n = doc.num_entities();
    let header = (0..n).map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let mut scores = header.clone() + "\n";
    let mut golden = header + "\n";
    let edges: std::collections::HashSet<(usize, usize)> =
        doc.facts.iter().filter(|f| f.relation == relation).map(|f| (f.head, f.tail)).collect();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| slice.at(i, j).to_string()).collect();
        let gold: Vec<&str> = (0..n).map(|j| if edges.contains(&(i, j)) { "1" } else { "0" }).collect();
        let _ = writeln!(scores, "{}", row.join(","));
        let _ = writeln!(golden, "{}", gold.join(","));
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let golden_path = a.out.with_extension("golden.csv");
    write_file(&a.out, &scores)?;
    write_file(&golden_path, &golden)?;
    let config = json!({"doc_id": a.doc_id, "relation": relation, "layer": layer});
    let mut manifest = RunManifest::new("export-scores", config, 0)
        .input("checkpoint", &a.checkpoint)
        .input("corpus", &a.corpus);
    manifest.outputs.insert("scores".into(), a.out.display().to_string());
    manifest.outputs.insert("golden".into(), golden_path.display().to_string());
    manifest.write(&a.out.with_extension("manifest.json"), started)?;
    let (mut on, mut off) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let acc = if edges.contains(&(i, j)) { &mut on } else { &mut off };
            acc.0 += slice.at(i, j);
            acc.1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    print_line(&json!({
        "command": "export-scores",
        "doc_id": a.doc_id,
        "relation": relation,
        "layer": layer,
        "entities": n,
        "mean_edge_score": mean(on),
        "mean_non_edge_score": mean(off),
        "scores": a.out,
        "golden": golden_path,
    }));
    Ok(())
}

fn random_document(rng: &mut ChaCha8Rng, entities: usize, vocab: usize, relations: usize) -> Document {
    let len = 4 * entities + 4;
    let tokens = (0..len).map(|_| rng.gen_range(1..vocab as u32)).collect();
    let entities_v = (0..entities)
        .map(|e| {
            let mut mentions = vec![(4 * e, 4 * e + 1)];
            if rng.gen_bool(0.5) {
                mentions.push((4 * e + 2, 4 * e + 3));
            }
            Entity { type_id: rng.gen_range(0..2), mentions }
        })
        .collect();
    let mut facts = vec![Fact::new(0, 0, 1)];
    for h in 0..entities {
        for t in (0..entities).filter(|&t| t != h) {
            for r in 0..relations {
                if rng.gen_bool(0.15) && !facts.contains(&Fact::new(h, r, t)) {
                    facts.push(Fact::new(h, r, t));
                }
            }
        }
    }
    facts.sort_unstable();
    Document { doc_id: "gradcheck".into(), tokens, entities: entities_v, facts }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    if !(2..=6).contains(&a.size) {
        return Err(Failure::usage(format!("--size must lie in 2..=6, got {}", a.size)));
    }
    if !(2..=8).contains(&a.dim) {
        return Err(Failure::usage(format!("--dim must lie in 2..=8, got {}", a.dim)));
    }
    let variants = a.variant.map_or(vec![KgeKind::TransE, KgeKind::DistMult, KgeKind::ComplEx], |v| vec![v]);
    let pools = a.pool.map_or(vec![PoolKind::Sum, PoolKind::Att], |p| vec![p]);
    let depths = a.layers.map_or(vec![1, 2], |t| vec![t]);
    let (relations, vocab) = (2, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let doc = insert_entity_markers(&random_document(&mut rng, a.size, vocab, relations));
    let samples = sample_negatives(&mut rng, a.size, &doc.doc.facts, 3);
    let mut cases = Vec::new();
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for &kind in &variants {
        for &pool in &pools {
            for &layers in &depths {
                let rotate_transmit = kind == KgeKind::RotatE;
                let config = ModelConfig {
                    num_relations: relations,
                    encoder: EncoderConfig {
                        vocab_size: vocab,
                        word_dim: a.dim,
                        num_types: 2,
                        max_coref: 2,
                        type_coref: false,
                        local_attention: true,
                        span_context: 2,
                    },
                    gcn: GcnConfig { layers, pool, num_basis: 3, residual: false, dropout: 0.0, rotate_transmit },
                    variant: KgeVariant::new(kind, 2.0)?,
                    nce: NceConfig { num_negatives: 3, temperature: 1.0, weight: 0.5, layer_weight: 0.3 },
                };
                let model = Model::new(config, a.seed)?;
                let corrupt = a.corrupt;
                let errors = gradient_check(&model, &doc, &samples, 1e-6, |grads| {
                    if corrupt {
                        grads[0] = grads[0].map(|x| 1.5 * x + 1e-3);
                    }
                })?;
                let mut max: f64 = 0.0;
                for (name, err) in &errors {
                    eprintln!("{kind:>9} {pool:>4} T={layers}  {name:<16} {err:.3e}");
                    max = max.max(*err);
                    if !(*err <= GRADCHECK_TOLERANCE) {
                        failed.push(format!("{kind}/{pool}/T{layers}/{name}"));
                    }
                }
                worst = worst.max(max);
                cases.push(json!({"variant": kind.to_string(), "pool": pool.to_string(), "layers": layers, "max_rel_error": max}));
            }
        }
    }
    let passed = failed.is_empty();
    print_line(&json!({
        "command": "gradcheck",
        "passed": passed,
        "tolerance": GRADCHECK_TOLERANCE,
        "max_rel_error": worst,
        "cases": cases,
        "failed": failed,
    }));
    if passed {
        Ok(())
    } else {
        Err(Failure { code: 5, message: format!("gradient check failed for {}", failed.join(", ")) })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportScores(a) => cmd_export_scores(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
