//! Command-line front end: `gen`, `train`, `eval` and `trace`.
//!
//! Settings resolve as command-line flag, then `--config` file (TOML
//! `key = value` lines), then built-in default.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, parse_cbt_file, build_vocab, write_cbt_file, Example, SyntheticSpec, Vocabulary};
use crate::error::{NseError, Result};
use crate::hypothesis::HaltingMode;
use crate::trace::trace_example;
use crate::training::{evaluate, train, CheckpointRecord, ClipMode, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "nse", version, about = "Hypothesis-test cloze reader")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cloze dataset in CBT layout.
    Gen(GenArgs),
    /// Train a reader and keep the best checkpoint by dev accuracy.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Export per-step memory keys, gates or halting scores for one example.
    Trace(TraceArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Gating,
    Adaptive,
}

/// Every setting a config file may hold; unset fields fall through.
#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
    /// Loop steps T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size n.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(default)]
    pub clip_mode: Option<ClipModeName>,
    #[arg(long)]
    pub crossed_state_init: Option<bool>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub doc_sentences: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Training documents to generate.
    #[arg(long)]
    pub docs: Option<usize>,
    #[arg(long)]
    pub dev_docs: Option<usize>,
    #[arg(long)]
    pub test_docs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipModeName {
    GlobalNorm,
    Elementwise,
}

macro_rules! merge_fields {
    ($a:ident, $b:ident; $($f:ident),*) => {
        Settings { $($f: $a.$f.or($b.$f)),* }
    };
}

impl Settings {
    /// Fields set here win over fields set in `fallback`.
    pub fn over(self, fallback: Settings) -> Settings {
        let (a, b) = (self, fallback);
        merge_fields!(a, b; seed, mode, steps, k, lr, batch, clip, dropout, patience, embed_dim,
            max_epochs, pool_size, min_count, clip_mode, crossed_state_init, entities, relations,
            doc_sentences, candidates, docs, dev_docs, test_docs)
    }

    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = fs::read_to_string(path).map_err(|e| NseError::io(path, e))?;
        toml::from_str(&text).map_err(|e| NseError::invalid(format!("{}: {e}", path.display())))
    }

    fn resolve(self, config: Option<&Path>) -> Result<Settings> {
        match config {
            Some(p) => Ok(self.over(Settings::from_file(p)?)),
            None => Ok(self),
        }
    }

    fn mode(&self, default: HaltingMode) -> Result<HaltingMode> {
        let steps = self.steps.unwrap_or(default.steps());
        match self.mode {
            None if default.is_adaptive() => HaltingMode::adaptive(steps),
            None => HaltingMode::gating(steps),
            Some(ModeName::Adaptive) => HaltingMode::adaptive(steps),
            Some(ModeName::Gating) => HaltingMode::gating(steps),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            k: self.k.unwrap_or(d.k),
            embed_dim: self.embed_dim.unwrap_or(d.embed_dim),
            mode: self.mode(d.mode)?,
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch.unwrap_or(d.batch_size),
            pool_size: self.pool_size.or(d.pool_size),
            clip: self.clip.unwrap_or(d.clip),
            clip_mode: match self.clip_mode {
                Some(ClipModeName::Elementwise) => ClipMode::Elementwise,
                Some(ClipModeName::GlobalNorm) => ClipMode::GlobalNorm,
                None => d.clip_mode,
            },
            dropout: self.dropout.unwrap_or(d.dropout),
            patience: self.patience.unwrap_or(d.patience),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            seed: self.seed.unwrap_or(d.seed),
            crossed_state_init: self.crossed_state_init.unwrap_or(d.crossed_state_init),
            parallel: d.parallel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        let train = self.docs.unwrap_or(d.train);
        let held_out = (train / 10).max(1);
        SyntheticSpec {
            entities: self.entities.unwrap_or(d.entities),
            relations: self.relations.unwrap_or(d.relations),
            doc_sentences: self.doc_sentences.unwrap_or(d.doc_sentences),
            candidates: self.candidates.unwrap_or(d.candidates),
            train,
            dev: self.dev_docs.unwrap_or(held_out),
            test: self.test_docs.unwrap_or(held_out),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory for train.txt, dev.txt, test.txt and spec.json.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Run directory for the checkpoint, vocabulary, log and manifest.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep every per-example pass on the calling thread.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-example records (JSON lines); defaults to predictions.jsonl next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based example index within the data file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "trace")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    pub examples: usize,
}

/// Everything needed to repeat a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub min_count: usize,
    pub datasets: Vec<DatasetEntry>,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub best_epoch: Option<u64>,
    pub best_dev_accuracy: Option<f64>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| NseError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| NseError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NseError::io(dir, e))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let settings = args.settings.resolve(args.config.as_deref())?;
    let spec = settings.synthetic_spec();
    let splits = generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    write_cbt_file(args.out.join("train.txt"), &splits.train)?;
    write_cbt_file(args.out.join("dev.txt"), &splits.dev)?;
    write_cbt_file(args.out.join("test.txt"), &splits.test)?;
    write_json(&args.out.join("spec.json"), &spec)?;
    println!(
        "wrote {} train, {} dev, {} test examples to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        args.out.display()
    );
    Ok(())
}

fn load_split(path: &Path, vocab: &Vocabulary, role: &str) -> Result<Vec<Example>> {
    let records = parse_cbt_file(path)?;
    vocab.encode_all(&records, role)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let settings = args.settings.resolve(args.config.as_deref())?;
    let mut config = settings.train_config()?;
    config.parallel = !args.sequential;
    let min_count = settings.min_count.unwrap_or(1);
    let train_records = parse_cbt_file(&args.train)?;
    let vocab = build_vocab(&train_records, min_count)?;
    let train_set = vocab.encode_all(&train_records, "train")?;
    let dev_set = load_split(&args.dev, &vocab, "dev")?;

    create_dir(&args.out)?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        seed: config.seed,
        min_count,
        datasets: vec![
            DatasetEntry { role: "train".into(), path: args.train.clone(), sha256: sha256_file(&args.train)?, examples: train_set.len() },
            DatasetEntry { role: "dev".into(), path: args.dev.clone(), sha256: sha256_file(&args.dev)?, examples: dev_set.len() },
        ],
        out_dir: args.out.clone(),
        started_unix: now_unix(),
        finished_unix: None,
        best_epoch: None,
        best_dev_accuracy: None,
    };
    let manifest_path = args.out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    vocab.save(args.out.join("vocab.tsv"))?;

    let log_path = args.out.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| NseError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let outcome = train(&config, vocab.len(), &train_set, &dev_set, Some(&mut log))?;
    log.flush().map_err(|e| NseError::io(&log_path, e))?;

    let mut best = outcome.best;
    best.vocab = vocab.to_text();
    best.save(args.out.join("best.ckpt"))?;
    manifest.finished_unix = Some(now_unix());
    manifest.best_epoch = Some(best.epoch);
    manifest.best_dev_accuracy = Some(best.dev_accuracy);
    write_json(&manifest_path, &manifest)?;
    println!(
        "best dev accuracy {:.4} at epoch {} ({} epochs, {} steps); checkpoint in {}",
        best.dev_accuracy,
        best.epoch,
        outcome.history.len(),
        outcome.steps,
        args.out.join("best.ckpt").display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(CheckpointRecord, Vocabulary)> {
    let ckpt = CheckpointRecord::load(path)?;
    if ckpt.vocab.is_empty() {
        return Err(NseError::Checkpoint(format!("{} carries no vocabulary", path.display())));
    }
    let vocab = Vocabulary::from_text(&ckpt.vocab)?;
    Ok((ckpt, vocab))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let settings = args.settings.resolve(args.config.as_deref())?;
    let (ckpt, vocab) = load_checkpoint(&args.checkpoint)?;
    let mode = settings.mode(ckpt.train.mode)?;
    let model = ckpt.to_model()?;
    let examples = load_split(&args.data, &vocab, "eval")?;
    let report = evaluate(&model, &examples, mode, !args.sequential)?;
    let out = args.out.unwrap_or_else(|| args.checkpoint.with_file_name("predictions.jsonl"));
    let mut text = String::new();
    for r in &report.records {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    fs::write(&out, text).map_err(|e| NseError::io(&out, e))?;
    let correct = report.records.iter().filter(|r| r.correct).count();
    println!(
        "accuracy {:.4} ({correct}/{}), mean loss {:.4}, mode {} T={}",
        report.accuracy,
        report.records.len(),
        report.mean_loss,
        mode.name(),
        mode.steps()
    );
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let settings = args.settings.resolve(args.config.as_deref())?;
    let (ckpt, vocab) = load_checkpoint(&args.checkpoint)?;
    let mode = settings.mode(ckpt.train.mode)?;
    let model = ckpt.to_model()?;
    let examples = load_split(&args.data, &vocab, "trace")?;
    let example = examples.get(args.index).ok_or_else(|| {
        NseError::invalid(format!("example index {} out of range (file has {})", args.index, examples.len()))
    })?;
    let trace = trace_example(&model, example, &vocab, mode)?;
    trace.write(&args.out)?;
    for (t, words) in trace.top_words.iter().enumerate() {
        let shown: Vec<String> = words.iter().map(|w| format!("{}@{} ({:.3})", w.token, w.position, w.weight)).collect();
        println!("step {}: {}", t + 1, shown.join(", "));
    }
    println!(
        "predicted {} (gold {}); artifacts in {}",
        trace.candidates[trace.predicted],
        trace.candidates[trace.gold],
        args.out.display()
    );
    Ok(())
}

/// Exit status for an error: 2 for rejected input, 1 for everything else.
pub fn exit_code(err: &NseError) -> i32 {
    match err {
        NseError::InvalidInput(_) => 2,
        _ => 1,
    }
}

/// Runs the tool on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Trace(a) => cmd_trace(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
