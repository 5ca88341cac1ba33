//! `slm`: corpus generation, prompt rendering, pre-training, instruction
//! tuning, evaluation and ablation grids.
//!
//! Every command writes into a run directory (under `$SLM_RUN_ROOT`, default
//! `runs/`) holding its outputs and a `manifest.json` with the resolved
//! configuration and the arguments needed to replay it.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use spatial_lm::ablation::{self, AblationCell, AblationReport, AblationSetup, CellRun};
use spatial_lm::attention::DecoderMode;
use spatial_lm::checkpoint;
use spatial_lm::config::{ConfigError, RunConfig};
use spatial_lm::corpus::{block_documents, generate_corpus, read_corpus, write_corpus, Corpus, CorpusError};
use spatial_lm::instruct::{dataset_stats, read_jsonl, write_jsonl, EncodedPrompt, InstructError, PromptSet, RenderConfig, Split, Task};
use spatial_lm::metrics::{self, Gold, Metric, MetricError, Prediction};
use spatial_lm::model::Model;
use spatial_lm::train::{self, instruct_tune, make_examples, ntp_accuracy, pretrain, LogRecord, Objective, ObjectivePreset, TrainError};

pub const RUN_ROOT_ENV: &str = "SLM_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "slm", version, about = "Layout-aware language model toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration; keys may be nested tables or dotted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set pretrain.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; defaults to a fresh directory under the run root.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Render instruction prompts from a corpus.
    GenPrompts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Pre-train a model on a corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// `causal`, `causal+spatial`, `infill+spatial`, or a bare loss
        /// (`ar`, `infill`) that keeps the configured gates.
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        mask_rate: Option<f64>,
        /// `causal` or `prefix`.
        #[arg(long)]
        decoder: Option<DecoderMode>,
    },
    /// Fine-tune a checkpoint on rendered prompts and predict.
    Instruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `gen-prompts`.
        #[arg(long)]
        prompts: PathBuf,
        /// Corpus directory (for the vocabulary).
        #[arg(long)]
        corpus: PathBuf,
        /// Keep only prompts of this task (VQA, NLI, KIE, CLS).
        #[arg(long)]
        task: Option<String>,
        /// Keep only the first N training prompts.
        #[arg(long)]
        limit: Option<usize>,
        /// Split to predict on.
        #[arg(long, default_value = "test")]
        predict_split: String,
    },
    /// Score a predictions file, or a checkpoint's held-out NTP accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "anls,f1,acc")]
        metrics: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run an ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// `spatial`, `decoder`, `objective` or `all`.
        #[arg(long, default_value = "spatial")]
        grid: String,
    },
    /// Re-run the command recorded in a manifest into a new run directory.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "invalid data: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(m) => CliError::Io(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<InstructError> for CliError {
    fn from(e: InstructError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<spatial_lm::infill::InfillError> for CliError {
    fn from(e: spatial_lm::infill::InfillError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        match e {
            checkpoint::CheckpointError::Io(m) => CliError::Io(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    command: String,
    /// Arguments after the program name, without `--run-dir`.
    args: Vec<String>,
    seed: u64,
    config: String,
    inputs: serde_json::Value,
    outputs: Vec<String>,
    metrics: serde_json::Value,
    version: String,
}

struct Run {
    dir: PathBuf,
    command: &'static str,
    args: Vec<String>,
    cfg: RunConfig,
    outputs: Vec<String>,
}

impl Run {
    fn start(command: &'static str, common: &Common, args: Vec<String>) -> Result<Self, CliError> {
        if let Some(p) = &common.config {
            if !p.exists() {
                return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
            }
        }
        let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
        let dir = match &common.run_dir {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into());
                let base = format!("{command}-seed{}", cfg.seed);
                (1..)
                    .map(|i| if i == 1 { root.join(&base) } else { root.join(format!("{base}-{i}")) })
                    .find(|p| !p.exists())
                    .expect("unbounded search")
            }
        };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_err(&dir))?;
        log::info!("{command}: writing to {}", dir.display());
        Ok(Self {
            dir,
            command,
            args,
            cfg,
            outputs: vec!["config.toml".into()],
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(io_err(&p))
    }

    fn finish(self, inputs: serde_json::Value, metrics: serde_json::Value) -> Result<PathBuf, CliError> {
        let m = Manifest {
            command: self.command.to_string(),
            args: self.args,
            seed: self.cfg.seed,
            config: self.cfg.to_toml(),
            inputs,
            outputs: self.outputs,
            metrics,
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let p = self.dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&m).expect("manifest serializes")).map_err(io_err(&p))?;
        println!("{}", self.dir.display());
        Ok(self.dir)
    }
}

/// Arguments without `--run-dir` and its value, for the manifest.
fn replay_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv.iter().skip(1) {
        if skip {
            skip = false;
            continue;
        }
        if a == "--run-dir" {
            skip = true;
            continue;
        }
        if a.starts_with("--run-dir=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}

fn abs(p: &Path) -> String {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    if !dir.join("vocab.json").exists() {
        return Err(CliError::Usage(format!("{} is not a corpus directory", dir.display())));
    }
    Ok(read_corpus(dir)?)
}

fn write_log(run: &mut Run, name: &str, log: &[LogRecord], extra: &[serde_json::Value]) -> Result<(), CliError> {
    let p = run.path(name);
    let mut f = fs::File::create(&p).map_err(io_err(&p))?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r).expect("log serializes")).map_err(io_err(&p))?;
    }
    for v in extra {
        writeln!(f, "{v}").map_err(io_err(&p))?;
    }
    Ok(())
}

fn gen_corpus(common: &Common, args: Vec<String>) -> Result<(), CliError> {
    let mut run = Run::start("gen-corpus", common, args)?;
    let mut cfg = run.cfg.corpus.clone();
    cfg.seed = run.cfg.seed;
    let corpus = generate_corpus(&cfg)?;
    let dir = run.path("corpus");
    write_corpus(&corpus, &dir)?;
    let metrics = json!({
        "train_docs": corpus.train.len(),
        "heldout_docs": corpus.heldout.len(),
        "vocab_size": corpus.vocab.size(),
    });
    run.finish(json!({}), metrics)?;
    Ok(())
}

fn gen_prompts(common: &Common, corpus_dir: &Path, args: Vec<String>) -> Result<(), CliError> {
    let corpus = load_corpus(corpus_dir)?;
    let mut run = Run::start("gen-prompts", common, args)?;
    let rc = RenderConfig {
        mcq_choices: run.cfg.instruct.mcq_choices,
        absent_keys: run.cfg.instruct.absent_keys,
    };
    let set = PromptSet::build(&corpus, &rc, run.cfg.seed)?;
    for split in [Split::Train, Split::Test] {
        let enc: Vec<&EncodedPrompt> = set.encoded.iter().filter(|e| e.split == split).collect();
        let mut buf = Vec::new();
        write_jsonl(&enc, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
        run.write(&format!("{split}.jsonl"), buf)?;
        let recs: Vec<_> = set.records.iter().filter(|r| r.split == split).collect();
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
        run.write(&format!("{split}.records.jsonl"), buf)?;
    }
    let stats = dataset_stats(&set.records);
    run.write("stats.txt", stats.to_string())?;
    print!("{stats}");
    let metrics = serde_json::to_value(&stats).expect("stats serialize");
    run.finish(json!({ "corpus": abs(corpus_dir) }), metrics)?;
    Ok(())
}

fn apply_objective(cfg: &mut RunConfig, name: &str) -> Result<(), CliError> {
    if let Ok(preset) = name.parse::<ObjectivePreset>() {
        cfg.pretrain.objective = preset.objective();
        let (ts, st, ss) = preset.gates();
        cfg.model.attention = cfg.model.attention.with_gates(ts, st, ss);
        return Ok(());
    }
    cfg.pretrain.objective = name
        .parse::<Objective>()
        .map_err(|e| CliError::Usage(format!("{e}; expected causal, causal+spatial, infill+spatial, ar or infill")))?;
    Ok(())
}

fn pretrain_cmd(
    common: &Common,
    corpus_dir: &Path,
    objective: Option<&str>,
    mask_rate: Option<f64>,
    decoder: Option<DecoderMode>,
    args: Vec<String>,
) -> Result<(), CliError> {
    let corpus = load_corpus(corpus_dir)?;
    let mut run = Run::start("pretrain", common, args)?;
    if let Some(o) = objective {
        apply_objective(&mut run.cfg, o)?;
    }
    if let Some(r) = mask_rate {
        run.cfg.pretrain.mask_rate = r;
    }
    if let Some(d) = decoder {
        run.cfg.model.attention.decoder_mode = d;
    }
    run.cfg.model.vocab_size = corpus.vocab.size();
    run.cfg.pretrain.seed = run.cfg.seed;
    fs::write(run.dir.join("config.toml"), run.cfg.to_toml()).map_err(io_err(&run.dir))?;
    let train_docs = block_documents(&corpus.train, &corpus.vocab)?;
    let held = block_documents(&corpus.heldout, &corpus.vocab)?;
    let specials = *corpus.vocab.specials();
    let model = Model::<f32>::new(run.cfg.model, run.cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    log::info!("{} parameters", model.config.num_params());
    let tcfg = run.cfg.pretrain;
    let (model, report) = pretrain(model, &train_docs, &specials, &tcfg, |r| {
        if r.step % 50 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    let eval = make_examples(&held, tcfg.objective, tcfg.mask_rate, tcfg.chunk_len.min(model.config.max_context), &specials, run.cfg.ablation.eval_seed)?;
    let ntp = ntp_accuracy(&model, &eval)?;
    let ntp_line = json!({"split": "heldout", "ntp_accuracy": ntp.accuracy(), "correct": ntp.correct, "total": ntp.total});
    write_log(&mut run, "metrics.jsonl", &report.log, std::slice::from_ref(&ntp_line))?;
    let ck = run.path("model.ckpt");
    checkpoint::save(&model, &ck)?;
    println!("held-out NTP accuracy {:.4} ({} / {})", ntp.accuracy(), ntp.correct, ntp.total);
    run.finish(json!({ "corpus": abs(corpus_dir) }), ntp_line)?;
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}`"))),
    }
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    Task::ALL
        .into_iter()
        .find(|t| t.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| CliError::Usage(format!("unknown task `{s}`")))
}

fn read_prompts(dir: &Path, split: Split) -> Result<Vec<EncodedPrompt>, CliError> {
    let p = dir.join(format!("{split}.jsonl"));
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    read_jsonl(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

#[allow(clippy::too_many_arguments)]
fn instruct_cmd(
    common: &Common,
    ckpt: &Path,
    prompts_dir: &Path,
    corpus_dir: &Path,
    task: Option<&str>,
    limit: Option<usize>,
    predict_split: &str,
    args: Vec<String>,
) -> Result<(), CliError> {
    let corpus = load_corpus(corpus_dir)?;
    let predict_split = parse_split(predict_split)?;
    let task = task.map(parse_task).transpose()?;
    let model = checkpoint::load::<f32>(ckpt)?;
    let mut run = Run::start("instruct", common, args)?;
    let keep = |p: &EncodedPrompt| task.is_none_or(|t| p.task == t);
    let mut train_prompts: Vec<EncodedPrompt> = read_prompts(prompts_dir, Split::Train)?.into_iter().filter(|p| keep(p)).collect();
    if let Some(n) = limit {
        train_prompts.truncate(n);
    }
    let specials = *corpus.vocab.specials();
    let ic = run.cfg.instruct.clone();
    let max_len = ic.max_len.min(model.config.max_context);
    let seqs = train_prompts
        .iter()
        .map(|p| p.train_sequence(&specials, max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let tcfg = train::TrainConfig {
        seed: run.cfg.seed,
        chunk_len: max_len,
        ..ic.train
    };
    let (model, report) = instruct_tune(model, &seqs, &tcfg, |_| {})?;
    write_log(&mut run, "metrics.jsonl", &report.log, &[])?;
    let out_ck = run.path("model.ckpt");
    checkpoint::save(&model, &out_ck)?;
    let targets = match predict_split {
        Split::Train => train_prompts,
        Split::Test => read_prompts(prompts_dir, Split::Test)?.into_iter().filter(|p| keep(p)).collect(),
    };
    let mut preds = Vec::with_capacity(targets.len());
    for p in &targets {
        let out = p.predict(&model, &specials, max_len, ic.max_new_tokens)?;
        preds.push(Prediction {
            doc_id: p.doc_id.clone(),
            task: p.task,
            pred: corpus.vocab.decode(&out),
            gold: Gold::One(corpus.vocab.decode(&p.response_tokens)),
            key: p.key.clone(),
        });
    }
    let mut buf = Vec::new();
    write_jsonl(&preds, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    run.write("predictions.jsonl", buf)?;
    let golds: Vec<&str> = preds.iter().map(|p| p.gold.first()).collect();
    let got: Vec<&str> = preds.iter().map(|p| p.pred.as_str()).collect();
    let em = if preds.is_empty() { 0.0 } else { metrics::exact_accuracy(&got, &golds)? };
    println!("exact match {em:.4} over {} {predict_split} prompts", preds.len());
    run.finish(
        json!({ "checkpoint": abs(ckpt), "prompts": abs(prompts_dir), "corpus": abs(corpus_dir) }),
        json!({ "exact_match": em, "n": preds.len(), "train_prompts": seqs.len() }),
    )?;
    Ok(())
}

fn eval_cmd(
    common: &Common,
    predictions: Option<&Path>,
    metric_list: &str,
    ckpt: Option<&Path>,
    corpus_dir: Option<&Path>,
    args: Vec<String>,
) -> Result<(), CliError> {
    let metric_list = Metric::parse_list(metric_list).map_err(|e| CliError::Usage(e.to_string()))?;
    if predictions.is_none() && (ckpt.is_none() || corpus_dir.is_none()) {
        return Err(CliError::Usage("eval needs --predictions, or --checkpoint with --corpus".into()));
    }
    let mut run = Run::start("eval", common, args)?;
    let mut report = serde_json::Map::new();
    let mut lines = Vec::new();
    let mut inputs = serde_json::Map::new();
    if let Some(p) = predictions {
        let text = fs::read_to_string(p).map_err(io_err(p))?;
        let preds = metrics::parse_predictions(&text)?;
        let results = metrics::evaluate(&preds, &metric_list)?;
        for r in &results {
            let line = json!({"metric": r.metric.name(), "value": r.value, "n": r.n, "f1": r.f1});
            report.insert(r.metric.name().into(), json!(r.value));
            lines.push(line);
        }
        let table = metrics::report_table(&results);
        print!("{table}");
        run.write("report.txt", table)?;
        inputs.insert("predictions".into(), json!(abs(p)));
    }
    if let (Some(ck), Some(cd)) = (ckpt, corpus_dir) {
        let corpus = load_corpus(cd)?;
        let model = checkpoint::load::<f32>(ck)?;
        let held = block_documents(&corpus.heldout, &corpus.vocab)?;
        let t = run.cfg.pretrain;
        let ex = make_examples(&held, t.objective, t.mask_rate, t.chunk_len.min(model.config.max_context), corpus.vocab.specials(), run.cfg.ablation.eval_seed)?;
        let ntp = ntp_accuracy(&model, &ex)?;
        println!("held-out NTP accuracy {:.4} ({} / {})", ntp.accuracy(), ntp.correct, ntp.total);
        report.insert("ntp_accuracy".into(), json!(ntp.accuracy()));
        lines.push(json!({"metric": "ntp_accuracy", "value": ntp.accuracy(), "n": ntp.total}));
        inputs.insert("checkpoint".into(), json!(abs(ck)));
        inputs.insert("corpus".into(), json!(abs(cd)));
    }
    let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
    run.write("metrics.jsonl", body)?;
    run.finish(serde_json::Value::Object(inputs), serde_json::Value::Object(report))?;
    Ok(())
}

fn ablate_cmd(common: &Common, corpus_dir: &Path, grid: &str, args: Vec<String>) -> Result<(), CliError> {
    let cells: Vec<AblationCell> = match grid {
        "spatial" => ablation::spatial_grid(),
        "decoder" => ablation::decoder_grid(),
        "objective" => ablation::objective_grid(),
        "all" => ablation::full_grid(),
        other => return Err(CliError::Usage(format!("unknown grid `{other}`; expected spatial, decoder, objective or all"))),
    };
    let corpus = load_corpus(corpus_dir)?;
    let mut run = Run::start("ablate", common, args)?;
    let a = run.cfg.ablation.clone();
    let train_docs = block_documents(&corpus.train, &corpus.vocab)?;
    let held = block_documents(&corpus.heldout, &corpus.vocab)?;
    let mut model = a.model;
    model.vocab_size = corpus.vocab.size();
    let setup = AblationSetup {
        train_docs: &train_docs,
        heldout_docs: &held,
        specials: *corpus.vocab.specials(),
        model,
        train: a.train,
        eval_seed: a.eval_seed,
    };
    let mut runs = Vec::new();
    let runs_path = run.path("runs.jsonl");
    let mut f = fs::File::create(&runs_path).map_err(io_err(&runs_path))?;
    for cell in &cells {
        for &seed in &a.seeds {
            let r = ablation::run_cell(&setup, cell, seed)?;
            let cr = CellRun {
                cell: cell.name.clone(),
                seed,
                accuracy: r.accuracy(),
            };
            log::info!("{} seed {seed}: {:.4}", cell.name, cr.accuracy);
            writeln!(f, "{}", serde_json::to_string(&cr).expect("run serializes")).map_err(io_err(&runs_path))?;
            runs.push(cr);
        }
    }
    let report = AblationReport::from_runs(&runs);
    print!("{report}");
    run.write("report.txt", report.to_string())?;
    let rj = serde_json::to_string_pretty(&report).expect("report serializes");
    run.write("report.json", rj)?;
    let metrics = json!({
        "cells": report.cells.iter().map(|(k, v)| (k.clone(), json!({"mean": v.mean, "std": v.std}))).collect::<serde_json::Map<_, _>>(),
        "verdicts_hold": report.verdicts.iter().filter(|v| v.holds).count(),
        "verdicts": report.verdicts.len(),
    });
    run.finish(json!({ "corpus": abs(corpus_dir), "grid": grid }), metrics)?;
    Ok(())
}

fn replay(manifest: &Path, run_dir: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", manifest.display())))?;
    let mut argv = vec!["slm".to_string()];
    argv.extend(m.args);
    if let Some(d) = run_dir {
        argv.push("--run-dir".into());
        argv.push(d.display().to_string());
    }
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.cmd, Cmd::Replay { .. }) {
        return Err(CliError::Usage("a replay manifest cannot replay itself".into()));
    }
    dispatch(cli, &argv)
}

fn dispatch(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let args = replay_args(argv);
    match &cli.cmd {
        Cmd::GenCorpus { common } => gen_corpus(common, args),
        Cmd::GenPrompts { common, corpus } => gen_prompts(common, corpus, args),
        Cmd::Pretrain {
            common,
            corpus,
            objective,
            mask_rate,
            decoder,
        } => pretrain_cmd(common, corpus, objective.as_deref(), *mask_rate, *decoder, args),
        Cmd::Instruct {
            common,
            checkpoint,
            prompts,
            corpus,
            task,
            limit,
            predict_split,
        } => instruct_cmd(common, checkpoint, prompts, corpus, task.as_deref(), *limit, predict_split, args),
        Cmd::Eval {
            common,
            predictions,
            metrics,
            checkpoint,
            corpus,
        } => eval_cmd(common, predictions.as_deref(), metrics, checkpoint.as_deref(), corpus.as_deref(), args),
        Cmd::Ablate { common, corpus, grid } => ablate_cmd(common, corpus, grid, args),
        Cmd::Replay { manifest, run_dir } => replay(manifest, run_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slm: {e}");
            ExitCode::from(e.code())
        }
    }
}
