//! Command-line entry point: synthetic data generation, training (with an
//! optional prompt-template sweep), evaluation, single-sentence
//! prediction, and attention inspection.
//!
//! Exit codes: 0 on success, 2 for usage or input-validation errors, 1 for
//! runtime failures (I/O, corrupt artifacts). Every command that writes
//! artifacts also writes a `manifest.json` next to them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use edetect::backbone::BackboneConfig;
use edetect::checkpoint::{load_checkpoint, save_checkpoint};
use edetect::corpus::synth::{generate, SynthSpec};
use edetect::corpus::{load_corpus, save_corpus, Corpus, CorpusError, EventTypeRegistry, Instance, Split};
use edetect::etc_tower::{PromptTemplate, TDefinition};
use edetect::evaluation::{evaluate, render_table};
use edetect::inference::{extract_attention, predict, AttnReduction, CombinationMode};
use edetect::manifest::RunManifest;
use edetect::trainer::{train_with, EpochLog, Model, TrainConfig, TrainError};
use edetect::viz::render_attention_png;

/// Relative output paths are joined under this directory when it is set.
const OUT_ROOT_ENV: &str = "EDETECT_OUT_ROOT";

/// The five alternative templates compared by the prompt sweep.
const SWEEP_TEMPLATES: [&str; 5] = ["prompt_1", "prompt_2", "prompt_3", "prompt_4", "soft"];

#[derive(Parser)]
#[command(
    name = "edetect",
    version,
    about = "Trigger-free event detection: a recognition tower and a cloze tower over one encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus (train/dev/test).
    GenData(GenDataArgs),
    /// Train a model; optionally sweep the alternative prompt templates.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict event types for one sentence.
    Predict(PredictArgs),
    /// Report attention mass over the event-marker tokens.
    Attn(AttnArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of event types.
    #[arg(long, default_value_t = 10)]
    types: usize,
    /// Training instances.
    #[arg(long, default_value_t = 2000)]
    train: usize,
    /// Dev instances.
    #[arg(long, default_value_t = 400)]
    dev: usize,
    /// Test instances.
    #[arg(long, default_value_t = 400)]
    test: usize,
    /// Fraction of event sentences carrying two event types.
    #[arg(long, default_value_t = 0.2)]
    multi_rate: f64,
    /// Fraction of sentences with no event.
    #[arg(long, default_value_t = 0.3)]
    none_rate: f64,
    /// Total pseudo-word lexicon size (cues plus fillers).
    #[arg(long, default_value_t = 300)]
    vocab: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding registry.json and {train,dev,test}.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, logs, and manifests.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prompt template name for the cloze tower.
    #[arg(long)]
    prompt: Option<String>,
    /// Combination mode; rce_only/etc_only also zero the other tower's
    /// loss weight.
    #[arg(long, value_parser = CombinationMode::from_str)]
    mode: Option<CombinationMode>,
    /// Train one model per alternative template and report P/R/F1 each.
    #[arg(long)]
    sweep_prompts: bool,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the recognition-tower loss.
    #[arg(long)]
    w_rce: Option<f64>,
    /// Weight of the cloze-tower loss.
    #[arg(long)]
    w_etc: Option<f64>,
    /// How the cloze loss forms its positive set: gold or score.
    #[arg(long, value_parser = TDefinition::from_str)]
    t_definition: Option<TDefinition>,
    /// Encoder layers.
    #[arg(long)]
    depth: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    width: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward width multiplier.
    #[arg(long)]
    ffn_mult: Option<usize>,
    /// Initialization standard deviation.
    #[arg(long)]
    init_std: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a directory containing model.ckpt.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding the split files.
    #[arg(long)]
    data: PathBuf,
    /// Which split to score.
    #[arg(long, default_value = "test", value_parser = Split::from_str)]
    split: Split,
    /// Combination mode (default: the mode the checkpoint trained with).
    #[arg(long, value_parser = CombinationMode::from_str)]
    mode: Option<CombinationMode>,
    /// If set, write report.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint file, or a directory containing model.ckpt.
    #[arg(long)]
    ckpt: PathBuf,
    /// Sentence (whitespace-tokenized).
    #[arg(long)]
    text: String,
    /// Combination mode (default: the mode the checkpoint trained with).
    #[arg(long, value_parser = CombinationMode::from_str)]
    mode: Option<CombinationMode>,
}

#[derive(Args)]
struct AttnArgs {
    /// Checkpoint file, or a directory containing model.ckpt.
    #[arg(long)]
    ckpt: PathBuf,
    /// Sentence (whitespace-tokenized). Exactly one of --text/--id.
    #[arg(long)]
    text: Option<String>,
    /// Instance id to look up in --data.
    #[arg(long)]
    id: Option<String>,
    /// Directory holding the split files (required with --id).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split to search for --id.
    #[arg(long, default_value = "dev", value_parser = Split::from_str)]
    split: Split,
    /// Attention reduction: last_layer_mean_heads or mean_all.
    #[arg(long, default_value = "last_layer_mean_heads", value_parser = AttnReduction::from_str)]
    reduction: AttnReduction,
    /// If set, write attn.json (and the heat map) plus a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also render attn.png (requires --out).
    #[arg(long)]
    png: bool,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

/// Configuration problems exit 2; I/O and numeric failures exit 1.
fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_)
        | TrainError::RegistryMismatch
        | TrainError::EmptyCorpus { .. }
        | TrainError::Template(_) => usage(e),
        other => runtime(other),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Attn(args) => cmd_attn(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Joins a relative output path under `EDETECT_OUT_ROOT` when that is set.
fn resolve_out(path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path,
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| runtime(anyhow::anyhow!("cannot create {}: {e}", path.display())))
}

fn ckpt_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model.ckpt")
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<(Model, TrainConfig), CliError> {
    load_checkpoint(&ckpt_file(path)).map_err(runtime)
}

fn load_split(data: &Path, registry: &EventTypeRegistry, split: Split) -> Result<Corpus, CliError> {
    let path = data.join(format!("{}.jsonl", split.as_str()));
    load_corpus(&path, registry, split).map_err(|e| match e {
        CorpusError::UnknownEvent { .. } | CorpusError::EmptyTokens { .. } => usage(e),
        other => runtime(other),
    })
}

fn write_run_log(path: &Path, log: &[EpochLog]) -> Result<(), CliError> {
    let mut text = String::new();
    for entry in log {
        text.push_str(&serde_json::to_string(entry).map_err(runtime)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(runtime)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string(value).map_err(runtime)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        num_types: args.types,
        train: args.train,
        dev: args.dev,
        test: args.test,
        multi_event_rate: args.multi_rate,
        none_rate: args.none_rate,
        vocab_size: args.vocab,
    };
    let corpora = generate(&spec, args.seed).map_err(|e| match e {
        CorpusError::InvalidSpec(_) => usage(e),
        other => runtime(other),
    })?;

    let out = resolve_out(args.out);
    create_dir(&out)?;
    let files = ["train.jsonl", "dev.jsonl", "test.jsonl", "cues.json", "registry.json"];
    save_corpus(&corpora.train, &out.join(files[0])).map_err(runtime)?;
    save_corpus(&corpora.dev, &out.join(files[1])).map_err(runtime)?;
    save_corpus(&corpora.test, &out.join(files[2])).map_err(runtime)?;
    corpora.manifest.save(&out.join(files[3])).map_err(runtime)?;
    corpora.registry.save(&out.join(files[4])).map_err(runtime)?;
    RunManifest::new(
        "gen-data",
        json!({"spec": spec, "seed": args.seed}),
        args.seed,
        files.iter().map(|f| f.to_string()).collect(),
    )
    .write(&out)
    .map_err(runtime)?;

    println!(
        "wrote {} train / {} dev / {} test instances with {} event types to {}",
        corpora.train.len(),
        corpora.dev.len(),
        corpora.test.len(),
        corpora.registry.num_types(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn assemble_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| runtime(anyhow::anyhow!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| usage(format!("invalid config file {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = args.max_grad_norm {
        config.max_grad_norm = v;
    }
    if let Some(v) = args.dropout {
        config.dropout = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.max_len {
        config.max_len = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.w_rce {
        config.loss_weights.w_rce = v;
    }
    if let Some(v) = args.w_etc {
        config.loss_weights.w_etc = v;
    }
    if let Some(v) = args.t_definition {
        config.t_definition = v;
    }
    if let Some(v) = &args.prompt {
        config.prompt = v.clone();
    }
    if let Some(mode) = args.mode {
        config.combination_mode = mode;
        // Single-tower modes silence the other tower's training signal.
        match mode {
            CombinationMode::RceOnly => config.loss_weights.w_etc = 0.0,
            CombinationMode::EtcOnly => config.loss_weights.w_rce = 0.0,
            _ => {}
        }
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

fn assemble_arch(args: &TrainArgs) -> BackboneConfig {
    let mut arch = BackboneConfig::default();
    if let Some(v) = args.depth {
        arch.depth = v;
    }
    if let Some(v) = args.width {
        arch.width = v;
    }
    if let Some(v) = args.heads {
        arch.heads = v;
    }
    if let Some(v) = args.ffn_mult {
        arch.ffn_mult = v;
    }
    if let Some(v) = args.init_std {
        arch.init_std = v;
    }
    arch
}

/// One sweep-report line.
#[derive(Serialize, Deserialize)]
struct SweepRow {
    template: String,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize, Deserialize)]
struct SweepReport {
    mode: CombinationMode,
    seed: u64,
    split: Split,
    rows: Vec<SweepRow>,
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = assemble_train_config(&args)?;
    let arch = assemble_arch(&args);

    let registry =
        EventTypeRegistry::load(&args.data.join("registry.json")).map_err(runtime)?;
    let train_corpus = load_split(&args.data, &registry, Split::Train)?;
    let dev_corpus = load_split(&args.data, &registry, Split::Dev)?;

    let out = resolve_out(args.out.clone());
    create_dir(&out)?;

    if args.sweep_prompts {
        return run_sweep(&args, &config, &arch, &train_corpus, &dev_corpus, &out);
    }

    let template = PromptTemplate::find_builtin(&config.prompt).map_err(usage)?;
    let outcome = train_with(&train_corpus, &dev_corpus, &arch, &config, &template, |entry| {
        println!("{}", serde_json::to_string(entry).expect("log entries serialize"));
    })
    .map_err(train_err)?;

    save_checkpoint(&outcome.model, &config, &out.join("model.ckpt")).map_err(runtime)?;
    write_run_log(&out.join("run_log.jsonl"), &outcome.log)?;
    outcome.model.vocab.save(&out.join("vocab.json")).map_err(runtime)?;
    outcome.model.registry.save(&out.join("registry.json")).map_err(runtime)?;
    RunManifest::new(
        "train",
        json!({"train": config, "backbone": arch}),
        config.seed,
        ["model.ckpt", "run_log.jsonl", "vocab.json", "registry.json"]
            .iter()
            .map(|f| f.to_string())
            .collect(),
    )
    .write(&out)
    .map_err(runtime)?;

    match outcome.best_epoch {
        Some(epoch) => println!(
            "best dev F1 {:.4} at epoch {epoch}; checkpoint written to {}",
            outcome.best_dev_f1,
            out.join("model.ckpt").display()
        ),
        None => println!(
            "no epoch improved on the initial weights (dev F1 {:.4}); initial checkpoint written to {}",
            outcome.best_dev_f1,
            out.join("model.ckpt").display()
        ),
    }
    Ok(())
}

fn run_sweep(
    args: &TrainArgs,
    config: &TrainConfig,
    arch: &BackboneConfig,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    out: &Path,
) -> Result<(), CliError> {
    let registry = &train_corpus.registry;
    let test_corpus = load_split(&args.data, registry, Split::Test)?;

    let mut rows = Vec::new();
    for name in SWEEP_TEMPLATES {
        let mut cfg = config.clone();
        cfg.prompt = name.to_string();
        let template = PromptTemplate::find_builtin(name).map_err(usage)?;
        let outcome =
            train_with(train_corpus, dev_corpus, arch, &cfg, &template, |entry| {
                println!(
                    "{name} {}",
                    serde_json::to_string(entry).expect("log entries serialize")
                );
            })
            .map_err(train_err)?;

        let sub = out.join("sweep").join(name);
        create_dir(&sub)?;
        save_checkpoint(&outcome.model, &cfg, &sub.join("model.ckpt")).map_err(runtime)?;
        write_run_log(&sub.join("run_log.jsonl"), &outcome.log)?;

        let report =
            evaluate(&test_corpus, &outcome.model, cfg.combination_mode).map_err(runtime)?;
        rows.push(SweepRow {
            template: name.to_string(),
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
        });
    }

    let report = SweepReport {
        mode: config.combination_mode,
        seed: config.seed,
        split: Split::Test,
        rows,
    };
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(out.join("sweep_report.json"), &json).map_err(runtime)?;

    println!("{:<10}  {:>7}  {:>7}  {:>7}", "template", "P", "R", "F1");
    for row in &report.rows {
        println!(
            "{:<10}  {:>7.4}  {:>7.4}  {:>7.4}",
            row.template, row.precision, row.recall, row.f1
        );
    }

    RunManifest::new(
        "train --sweep-prompts",
        json!({"train": config, "backbone": arch, "templates": SWEEP_TEMPLATES}),
        config.seed,
        std::iter::once("sweep_report.json".to_string())
            .chain(SWEEP_TEMPLATES.iter().map(|n| format!("sweep/{n}/model.ckpt")))
            .collect(),
    )
    .write(out)
    .map_err(runtime)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / predict / attn
// ---------------------------------------------------------------------------

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (model, train_config) = load_model(&args.ckpt)?;
    let corpus = load_split(&args.data, &model.registry, args.split)?;
    let mode = args.mode.unwrap_or(train_config.combination_mode);
    let report = evaluate(&corpus, &model, mode).map_err(runtime)?;

    // The report is augmented with the mode it was computed under so the
    // JSON is self-describing when archived.
    let mut tagged = serde_json::to_value(&report).map_err(runtime)?;
    tagged["mode"] = json!(mode);
    print_json(&tagged)?;
    print!("{}", render_table(&report));

    if let Some(out) = args.out {
        let out = resolve_out(out);
        create_dir(&out)?;
        let json = serde_json::to_string_pretty(&tagged).map_err(runtime)?;
        std::fs::write(out.join("report.json"), json).map_err(runtime)?;
        RunManifest::new(
            "eval",
            json!({"split": args.split, "mode": mode, "ckpt": ckpt_file(&args.ckpt).display().to_string()}),
            train_config.seed,
            vec!["report.json".to_string()],
        )
        .write(&out)
        .map_err(runtime)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let (model, train_config) = load_model(&args.ckpt)?;
    let mode = args.mode.unwrap_or(train_config.combination_mode);
    let tokens: Vec<String> = args.text.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(usage("--text must contain at least one token"));
    }
    let prediction = predict(&model, &tokens, mode).map_err(runtime)?;
    print_json(&prediction.record(&model))
}

fn cmd_attn(args: AttnArgs) -> Result<(), CliError> {
    if args.png && args.out.is_none() {
        return Err(usage("--png requires --out"));
    }
    let (model, train_config) = load_model(&args.ckpt)?;
    let instance = match (&args.text, &args.id) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(usage("pass exactly one of --text or --id"));
        }
        (Some(text), None) => {
            let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            if tokens.is_empty() {
                return Err(usage("--text must contain at least one token"));
            }
            Instance { id: "input".to_string(), tokens, gold_events: Default::default() }
        }
        (None, Some(id)) => {
            let data = args.data.as_ref().ok_or_else(|| usage("--id requires --data"))?;
            let corpus = load_split(data, &model.registry, args.split)?;
            corpus
                .instances
                .iter()
                .find(|i| &i.id == id)
                .cloned()
                .ok_or_else(|| {
                    usage(format!("no instance {id:?} in the {} split", args.split.as_str()))
                })?
        }
    };
    if args.png && args.out.is_none() {
        return Err(usage("--png requires --out"));
    }

    let report = extract_attention(&model, &instance, args.reduction).map_err(runtime)?;
    print_json(&report)?;

    if let Some(out) = args.out {
        let out = resolve_out(out);
        create_dir(&out)?;
        let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
        std::fs::write(out.join("attn.json"), json).map_err(runtime)?;
        let mut outputs = vec!["attn.json".to_string()];
        if args.png {
            render_attention_png(&report, &out.join("attn.png")).map_err(runtime)?;
            outputs.push("attn.png".to_string());
        }
        RunManifest::new(
            "attn",
            json!({
                "reduction": args.reduction,
                "id": report.id,
                "ckpt": ckpt_file(&args.ckpt).display().to_string(),
            }),
            train_config.seed,
            outputs,
        )
        .write(&out)
        .map_err(runtime)?;
    }
    Ok(())
}
