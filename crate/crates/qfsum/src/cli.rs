//! Command-line entry points: one binary exposing the pipeline as
//! subcommands that share a session configuration file.
//!
//! Precedence for every setting is flag > config file > built-in default.
//! Each run writes a provenance manifest next to its outputs recording the
//! resolved configuration, inputs, output checksums, and seed, so any run
//! can be reproduced from its manifest (timestamps aside).
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure during training.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{restore_model, restore_vocabulary, Checkpoint};
use crate::config::SessionConfig;
use crate::corpus::{load_split, save_split, DataFormat, DatasetSplit, SplitName};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_split;
use crate::labeler::{
    label_by_bigram_overlap_multi, label_by_gold_spans, load_labels, save_labels, SegmentLabels,
};
use crate::manifest::{manifest_path_for, write_text, RunManifest};
use crate::model::ModelConfig;
use crate::segmenter::{segment_document, Vocabulary};
use crate::trainer::{
    generate_summary, sweep_table, sweep_temperature, train, TrainSession,
};

/// Temperature grid swept when `--grid` is not given.
pub const DEFAULT_TAU_GRID: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Contrastive query-focused summarization over long documents.
#[derive(Debug, Parser)]
#[command(
    name = "qfsum",
    version,
    about = "Query-focused summarization: segment, label, train, generate, evaluate",
    long_about = "Query-focused summarization over long documents. Documents are split \
                  into overlapping query-prefixed segments, an encoder-decoder generates \
                  the summary, and training couples generation with per-segment relevance \
                  classification and a contrastive objective.\n\n\
                  Settings resolve as flag > config file > default. Key defaults: \
                  segments of 512 tokens with 0.5 overlap, learning rate 5e-5, 10 epochs, \
                  loss weights 0.6/0.2/0.2, temperature 0.6, bigram threshold 6."
)]
pub struct Cli {
    /// Session configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an upstream dataset into the normalized instance format.
    Ingest(IngestArgs),
    /// Write per-segment relevance labels for a normalized dataset.
    Label(LabelArgs),
    /// Train a model and keep per-epoch checkpoints and reports.
    Train(TrainArgs),
    /// Generate summaries from a checkpoint.
    Generate(GenerateArgs),
    /// Score generated summaries against references.
    Evaluate(EvaluateArgs),
    /// Train once per temperature value and tabulate validation scores.
    SweepTau(SweepTauArgs),
}

/// Segmentation flags shared by every command that windows documents.
#[derive(Debug, Args, Default, Clone)]
pub struct SegmenterArgs {
    /// Segment length in tokens [default: 512].
    #[arg(long, value_name = "TOKENS")]
    pub segment_length: Option<usize>,
    /// Fractional overlap between consecutive segments, in [0, 1) [default: 0.5].
    #[arg(long, value_name = "FRACTION")]
    pub overlap_fraction: Option<f64>,
    /// Query tokens prefixed to each segment, truncating longer queries [default: 128].
    #[arg(long, value_name = "TOKENS")]
    pub max_query_length: Option<usize>,
}

impl SegmenterArgs {
    fn apply(&self, config: &mut SessionConfig) {
        if let Some(v) = self.segment_length {
            config.segmenter.segment_length = v;
        }
        if let Some(v) = self.overlap_fraction {
            config.segmenter.overlap_fraction = v;
        }
        if let Some(v) = self.max_query_length {
            config.segmenter.max_query_length = v;
        }
    }
}

fn parse_ingest_format(s: &str) -> std::result::Result<DataFormat, String> {
    match s.parse::<DataFormat>() {
        Ok(DataFormat::Normalized) => {
            Err("ingest reads upstream data; pass qmsum or squality".to_string())
        }
        Ok(format) => Ok(format),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Upstream dataset: a file, or a directory of files read in name order.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Source format: qmsum (meeting transcripts) or squality (stories).
    #[arg(long, value_parser = parse_ingest_format)]
    pub format: DataFormat,
    /// Normalized output file, one JSON instance per line.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Split name recorded in diagnostics [default: train].
    #[arg(long, default_value = "train")]
    pub split: SplitName,
}

/// How segments earn their relevance flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelMode {
    /// Flag segments intersecting an annotated gold span.
    Spans,
    /// Flag segments sharing enough bigrams with any reference summary.
    Bigram,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Normalized dataset to label.
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Labeling mode.
    #[arg(long, value_enum)]
    pub mode: LabelMode,
    /// Minimum shared-bigram count for a positive in bigram mode [default: 6].
    #[arg(long, value_name = "COUNT")]
    pub threshold: Option<usize>,
    /// Vocabulary file; defaults to the config value, else one built from
    /// the dataset itself.
    #[arg(long, value_name = "FILE")]
    pub vocabulary: Option<PathBuf>,
    /// Labels output file, one JSON record per line.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    #[command(flatten)]
    pub segmenter: SegmenterArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training split [default: data/train.jsonl].
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Validation split [default: data/validation.jsonl].
    #[arg(long, value_name = "FILE")]
    pub validation: Option<PathBuf>,
    /// Segment labels for the training split [default: data/labels.jsonl].
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Vocabulary file; built from the training split (and saved to the
    /// output directory) when absent.
    #[arg(long, value_name = "FILE")]
    pub vocabulary: Option<PathBuf>,
    /// Output directory for checkpoints, reports, and logs [default: runs].
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Training epochs [default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// AdamW learning rate [default: 5e-5].
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Contrastive temperature τ [default: 0.6].
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Generation loss weight; the three weights must sum to 1 [default: 0.6].
    #[arg(long)]
    pub lambda_gen: Option<f64>,
    /// Classification loss weight [default: 0.2].
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    /// Contrastive loss weight [default: 0.2].
    #[arg(long)]
    pub lambda_cont: Option<f64>,
    /// Seed for initialization, dropout, and shuffling; sets both the model
    /// seed and the training seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub segmenter: SegmenterArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Trained checkpoint (carries its model shape and vocabulary).
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Normalized dataset to summarize.
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Output file: one {"id", "summary"} JSON object per line, input order.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Generation length cap in tokens [default: 128].
    #[arg(long)]
    pub max_length: Option<usize>,
    #[command(flatten)]
    pub segmenter: SegmenterArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Trained checkpoint; required unless --oracle-copy is given.
    #[arg(long, value_name = "FILE", required_unless_present = "oracle_copy")]
    pub checkpoint: Option<PathBuf>,
    /// Normalized dataset with reference summaries.
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Report base path, written as <base>.json, <base>.txt, and
    /// <base>.generations.txt [default: <output_dir>/eval].
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Score a copy of each instance's first reference instead of model
    /// output; a correctness oracle that must score f1 = 1 everywhere.
    #[arg(long)]
    pub oracle_copy: bool,
    /// Generation length cap in tokens [default: 128].
    #[arg(long)]
    pub max_length: Option<usize>,
    #[command(flatten)]
    pub segmenter: SegmenterArgs,
}

#[derive(Debug, Args)]
pub struct SweepTauArgs {
    /// Comma-separated temperature grid [default: 0.2,0.4,0.6,0.8].
    #[arg(long, value_delimiter = ',', value_name = "TAUS")]
    pub grid: Vec<f64>,
    /// Training split [default: data/train.jsonl].
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Validation split [default: data/validation.jsonl].
    #[arg(long, value_name = "FILE")]
    pub validation: Option<PathBuf>,
    /// Segment labels for the training split [default: data/labels.jsonl].
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Vocabulary file; built from the training split when absent.
    #[arg(long, value_name = "FILE")]
    pub vocabulary: Option<PathBuf>,
    /// Output directory; each cell trains into tau-<τ>/ beneath it [default: runs].
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Training epochs per cell [default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed shared by every cell [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub segmenter: SegmenterArgs,
}

/// Execute a parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let config = match cli.config.as_deref() {
        Some(path) => SessionConfig::load(path)?,
        None => SessionConfig::default(),
    };
    match cli.command {
        Command::Ingest(args) => cmd_ingest(config, &args),
        Command::Label(args) => cmd_label(config, &args),
        Command::Train(args) => cmd_train(config, &args),
        Command::Generate(args) => cmd_generate(config, &args),
        Command::Evaluate(args) => cmd_evaluate(config, &args),
        Command::SweepTau(args) => cmd_sweep_tau(config, &args),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn manifest_config(config: &SessionConfig, invocation: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "session": config,
        "invocation": invocation,
    })
}

fn cmd_ingest(config: SessionConfig, args: &IngestArgs) -> Result<()> {
    let split = load_split(&args.input, args.format, args.split)?;
    ensure_parent(&args.output)?;
    save_split(&args.output, &split)?;
    println!(
        "ingested {} instance(s) into {}",
        split.instances.len(),
        args.output.display()
    );

    let mut manifest = RunManifest::begin(
        "ingest",
        manifest_config(
            &config,
            serde_json::json!({
                "input": args.input.display().to_string(),
                "format": format!("{:?}", args.format).to_lowercase(),
                "split": args.split.to_string(),
                "output": args.output.display().to_string(),
            }),
        ),
        0,
    );
    manifest.record_input(&args.input);
    manifest.record_output(&args.output)?;
    manifest.save(&manifest_path_for(&args.output))
}

/// Build a vocabulary from every token of a split, keeping all of them.
fn build_vocabulary(split: &DatasetSplit) -> Vocabulary {
    let tokens = split.instances.iter().flat_map(|instance| {
        instance
            .query
            .iter()
            .chain(instance.document.iter())
            .chain(instance.references.iter().flatten())
    });
    Vocabulary::build(tokens, 1)
}

/// Flag path, then config path, then a vocabulary built from the split.
fn resolve_vocabulary(
    flag: Option<&PathBuf>,
    config: &SessionConfig,
    split: &DatasetSplit,
) -> Result<(Vocabulary, Option<PathBuf>)> {
    let explicit = flag.cloned().or_else(|| config.data.vocabulary_path.clone());
    match explicit {
        Some(path) => Ok((Vocabulary::load(&path)?, Some(path))),
        None => Ok((build_vocabulary(split), None)),
    }
}

fn cmd_label(config: SessionConfig, args: &LabelArgs) -> Result<()> {
    let mut config = config;
    args.segmenter.apply(&mut config);
    config.segmenter.validate()?;
    let threshold = args.threshold.unwrap_or(6);
    if threshold < 1 {
        return Err(Error::Config(format!(
            "bigram threshold must be at least 1, got {threshold}"
        )));
    }

    let split = load_split(&args.dataset, DataFormat::Normalized, SplitName::Train)?;
    if args.mode == LabelMode::Spans {
        let missing: Vec<&str> = split
            .instances
            .iter()
            .filter(|i| i.gold_spans.is_empty())
            .map(|i| i.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "spans mode needs gold spans on every instance; missing on: {}",
                missing.join(", ")
            )));
        }
    }
    let (vocabulary, vocabulary_file) = resolve_vocabulary(args.vocabulary.as_ref(), &config, &split)?;

    let mut labels = Vec::with_capacity(split.instances.len());
    for instance in &split.instances {
        let doc_ids = vocabulary.encode(&instance.document);
        let segments = segment_document(
            &doc_ids,
            config.segmenter.segment_length,
            config.segmenter.overlap_fraction,
        )?;
        let instance_labels = match args.mode {
            LabelMode::Spans => {
                label_by_gold_spans(&instance.id, &segments, &instance.gold_spans)
            }
            LabelMode::Bigram => {
                let references: Vec<Vec<u32>> = instance
                    .references
                    .iter()
                    .map(|r| vocabulary.encode(r))
                    .collect();
                label_by_bigram_overlap_multi(&instance.id, &segments, &references, threshold)?
            }
        };
        labels.push(instance_labels);
    }

    ensure_parent(&args.output)?;
    save_labels(&args.output, &labels)?;
    print_label_stats(&labels, &args.output);

    let mode_name = match args.mode {
        LabelMode::Spans => "spans",
        LabelMode::Bigram => "bigram",
    };
    let mut manifest = RunManifest::begin(
        "label",
        manifest_config(
            &config,
            serde_json::json!({
                "dataset": args.dataset.display().to_string(),
                "mode": mode_name,
                "threshold": threshold,
                "output": args.output.display().to_string(),
            }),
        ),
        0,
    );
    manifest.record_input(&args.dataset);
    if let Some(path) = &vocabulary_file {
        manifest.record_input(path);
    }
    manifest.record_output(&args.output)?;
    manifest.save(&manifest_path_for(&args.output))
}

fn print_label_stats(labels: &[SegmentLabels], output: &Path) {
    let rates: Vec<f64> = labels
        .iter()
        .map(|l| l.positive_count() as f64 / l.flags.len().max(1) as f64)
        .collect();
    let n = rates.len().max(1) as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let max = rates.iter().copied().fold(0.0f64, f64::max);
    let zeros = labels.iter().filter(|l| l.positive_count() == 0).count();
    println!("labeled {} instance(s) into {}", labels.len(), output.display());
    if !labels.is_empty() {
        println!(
            "positive rate per instance: min {min:.4} mean {mean:.4} max {max:.4}; \
             {zeros} instance(s) with no positive segment"
        );
    }
}

/// Splits, labels, and vocabulary loaded for a training-style command, with
/// the model's vocabulary size resolved.
struct SessionData {
    train_split: DatasetSplit,
    validation_split: DatasetSplit,
    labels: Vec<SegmentLabels>,
    vocabulary: Vocabulary,
    /// Set when the vocabulary came from a file rather than being built.
    vocabulary_file: Option<PathBuf>,
    model_config: ModelConfig,
}

fn load_session_data(config: &SessionConfig, vocabulary_flag: Option<&PathBuf>) -> Result<SessionData> {
    let train_split = load_split(&config.data.train_path, DataFormat::Normalized, SplitName::Train)?;
    let validation_split = load_split(
        &config.data.validation_path,
        DataFormat::Normalized,
        SplitName::Validation,
    )?;
    let labels = load_labels(&config.data.labels_path)?;
    let (vocabulary, vocabulary_file) = resolve_vocabulary(vocabulary_flag, config, &train_split)?;
    let mut model_config = config.model.clone();
    if model_config.vocab_size == 0 {
        model_config.vocab_size = vocabulary.size();
    }
    Ok(SessionData {
        train_split,
        validation_split,
        labels,
        vocabulary,
        vocabulary_file,
        model_config,
    })
}

fn train_session<'a>(
    data: &'a SessionData,
    config: &SessionConfig,
    output_dir: PathBuf,
) -> TrainSession<'a> {
    TrainSession {
        train_split: &data.train_split,
        validation_split: &data.validation_split,
        labels: &data.labels,
        vocabulary: &data.vocabulary,
        segmenter: config.segmenter.clone(),
        contrastive: config.contrastive.to_options(config.train.temperature),
        validation_max_length: config.validation.max_length,
        output_dir,
    }
}

fn apply_train_overrides(config: &mut SessionConfig, args: &TrainArgs) {
    if let Some(v) = &args.train {
        config.data.train_path = v.clone();
    }
    if let Some(v) = &args.validation {
        config.data.validation_path = v.clone();
    }
    if let Some(v) = &args.labels {
        config.data.labels_path = v.clone();
    }
    if let Some(v) = &args.output_dir {
        config.data.output_dir = v.clone();
    }
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = args.temperature {
        config.train.temperature = v;
    }
    if let Some(v) = args.lambda_gen {
        config.train.lambda_gen = v;
    }
    if let Some(v) = args.lambda_cls {
        config.train.lambda_cls = v;
    }
    if let Some(v) = args.lambda_cont {
        config.train.lambda_cont = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
        config.model.seed = v;
    }
    args.segmenter.apply(config);
}

fn cmd_train(config: SessionConfig, args: &TrainArgs) -> Result<()> {
    let mut config = config;
    apply_train_overrides(&mut config, args);
    config.validate()?;

    let data = load_session_data(&config, args.vocabulary.as_ref())?;
    let output_dir = config.data.output_dir.clone();
    let session = train_session(&data, &config, output_dir.clone());
    let outcome = train(&config.train, &data.model_config, &session)?;

    let built_vocabulary_path = if data.vocabulary_file.is_none() {
        let path = output_dir.join("vocabulary.txt");
        data.vocabulary.save(&path)?;
        Some(path)
    } else {
        None
    };

    println!(
        "trained {} epoch(s) on {} instance(s)",
        outcome.reports.len(),
        data.train_split.instances.len()
    );
    println!(
        "best epoch {}: validation mean ROUGE {:.4}",
        outcome.best.epoch, outcome.best.mean_rouge
    );
    println!(
        "checkpoint: {}",
        output_dir.join(&outcome.best.checkpoint_path).display()
    );

    let mut manifest = RunManifest::begin(
        "train",
        manifest_config(&config, serde_json::json!({"output_dir": output_dir.display().to_string()})),
        config.train.seed,
    );
    manifest.record_input(&config.data.train_path);
    manifest.record_input(&config.data.validation_path);
    manifest.record_input(&config.data.labels_path);
    if let Some(path) = &data.vocabulary_file {
        manifest.record_input(path);
    }
    manifest.record_output(&outcome.reports_path)?;
    manifest.record_output(&outcome.event_log_path)?;
    manifest.record_output(&output_dir.join("best_checkpoint.json"))?;
    if let Some(path) = &built_vocabulary_path {
        manifest.record_output(path)?;
    }
    for report in &outcome.reports {
        manifest.record_output(&output_dir.join(&report.checkpoint_path))?;
    }
    manifest.save(&output_dir.join("manifest.json"))
}

fn cmd_generate(config: SessionConfig, args: &GenerateArgs) -> Result<()> {
    let mut config = config;
    args.segmenter.apply(&mut config);
    config.segmenter.validate()?;

    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let model = restore_model(&checkpoint)?;
    let vocabulary = restore_vocabulary(&checkpoint)?;
    if config.segmenter.max_input_length() > model.config().max_positions {
        return Err(Error::Config(format!(
            "segmenter windows of up to {} tokens exceed the checkpoint's position budget {}",
            config.segmenter.max_input_length(),
            model.config().max_positions
        )));
    }
    let max_length = args.max_length.unwrap_or(config.validation.max_length);
    if max_length == 0 {
        return Err(Error::Config("max_length must be at least 1".into()));
    }

    let split = load_split(&args.dataset, DataFormat::Normalized, SplitName::Test)?;
    ensure_parent(&args.output)?;
    let file = std::fs::File::create(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for instance in &split.instances {
        let tokens = generate_summary(&model, &vocabulary, &config.segmenter, instance, max_length)?;
        let line = serde_json::json!({
            "id": instance.id,
            "summary": tokens.join(" "),
        });
        writeln!(writer, "{line}").map_err(|e| Error::io(&args.output, e))?;
    }
    writer.flush().map_err(|e| Error::io(&args.output, e))?;
    println!(
        "generated {} summar{} into {}",
        split.instances.len(),
        if split.instances.len() == 1 { "y" } else { "ies" },
        args.output.display()
    );

    let mut manifest = RunManifest::begin(
        "generate",
        manifest_config(
            &config,
            serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "dataset": args.dataset.display().to_string(),
                "output": args.output.display().to_string(),
                "max_length": max_length,
            }),
        ),
        model.config().seed,
    );
    manifest.record_input(&args.checkpoint);
    manifest.record_input(&args.dataset);
    manifest.record_output(&args.output)?;
    manifest.save(&manifest_path_for(&args.output))
}

fn cmd_evaluate(config: SessionConfig, args: &EvaluateArgs) -> Result<()> {
    let mut config = config;
    args.segmenter.apply(&mut config);
    config.segmenter.validate()?;
    let max_length = args.max_length.unwrap_or(config.validation.max_length);
    if max_length == 0 {
        return Err(Error::Config("max_length must be at least 1".into()));
    }

    let split = load_split(&args.dataset, DataFormat::Normalized, SplitName::Validation)?;
    let report = if args.oracle_copy {
        evaluate_split(&split, |instance| {
            Ok(instance.references[0].clone())
        })?
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .expect("clap enforces --checkpoint unless --oracle-copy");
        let checkpoint = Checkpoint::load(path)?;
        let model = restore_model(&checkpoint)?;
        let vocabulary = restore_vocabulary(&checkpoint)?;
        if config.segmenter.max_input_length() > model.config().max_positions {
            return Err(Error::Config(format!(
                "segmenter windows of up to {} tokens exceed the checkpoint's position budget {}",
                config.segmenter.max_input_length(),
                model.config().max_positions
            )));
        }
        evaluate_split(&split, |instance| {
            generate_summary(&model, &vocabulary, &config.segmenter, instance, max_length)
        })?
    };

    let base = args
        .report
        .clone()
        .unwrap_or_else(|| config.data.output_dir.join("eval"));
    ensure_parent(&base)?;
    report.save(&base)?;
    println!(
        "evaluated {} instance(s): rouge1 {:.4} rouge2 {:.4} rougeL {:.4} mean {:.4}",
        report.per_instance.len(),
        report.rouge1,
        report.rouge2,
        report.rouge_l,
        report.mean_rouge
    );
    println!("report: {}", base.with_extension("json").display());

    let mut manifest = RunManifest::begin(
        "evaluate",
        manifest_config(
            &config,
            serde_json::json!({
                "checkpoint": args.checkpoint.as_ref().map(|p| p.display().to_string()),
                "dataset": args.dataset.display().to_string(),
                "oracle_copy": args.oracle_copy,
                "report": base.display().to_string(),
                "max_length": max_length,
            }),
        ),
        0,
    );
    if let Some(path) = &args.checkpoint {
        manifest.record_input(path);
    }
    manifest.record_input(&args.dataset);
    manifest.record_output(&base.with_extension("json"))?;
    manifest.record_output(&base.with_extension("txt"))?;
    manifest.record_output(&base.with_extension("generations.txt"))?;
    manifest.save(&base.with_extension("manifest.json"))
}

fn apply_sweep_overrides(config: &mut SessionConfig, args: &SweepTauArgs) {
    if let Some(v) = &args.train {
        config.data.train_path = v.clone();
    }
    if let Some(v) = &args.validation {
        config.data.validation_path = v.clone();
    }
    if let Some(v) = &args.labels {
        config.data.labels_path = v.clone();
    }
    if let Some(v) = &args.output_dir {
        config.data.output_dir = v.clone();
    }
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
        config.model.seed = v;
    }
    args.segmenter.apply(config);
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

fn cmd_sweep_tau(config: SessionConfig, args: &SweepTauArgs) -> Result<()> {
    let mut config = config;
    apply_sweep_overrides(&mut config, args);
    config.validate()?;
    let grid: Vec<f64> = if args.grid.is_empty() {
        DEFAULT_TAU_GRID.to_vec()
    } else {
        args.grid.clone()
    };

    let data = load_session_data(&config, args.vocabulary.as_ref())?;
    let output_dir = config.data.output_dir.clone();
    let session = train_session(&data, &config, output_dir.clone());
    let cells = sweep_temperature(&config.train, &data.model_config, &session, &grid)?;

    let table = sweep_table(&cells);
    print!("{table}");
    write_text(&output_dir.join("sweep.txt"), &table)?;

    // Plot-ready CSV; numeric cells use shortest-round-trip formatting so
    // repeat runs are byte-identical.
    let mut csv = String::from("temperature,mean_rouge,best_epoch,error\n");
    for cell in &cells {
        let rouge = cell.mean_rouge.map(|v| v.to_string()).unwrap_or_default();
        let epoch = cell.best_epoch.map(|v| v.to_string()).unwrap_or_default();
        let error = cell.error.as_deref().map(csv_field).unwrap_or_default();
        csv.push_str(&format!("{},{rouge},{epoch},{error}\n", cell.temperature));
    }
    write_text(&output_dir.join("sweep.csv"), &csv)?;

    let mut manifest = RunManifest::begin(
        "sweep-tau",
        manifest_config(
            &config,
            serde_json::json!({
                "grid": grid,
                "output_dir": output_dir.display().to_string(),
            }),
        ),
        config.train.seed,
    );
    manifest.record_input(&config.data.train_path);
    manifest.record_input(&config.data.validation_path);
    manifest.record_input(&config.data.labels_path);
    if let Some(path) = &data.vocabulary_file {
        manifest.record_input(path);
    }
    manifest.record_output(&output_dir.join("sweep.txt"))?;
    manifest.record_output(&output_dir.join("sweep.csv"))?;
    manifest.save(&output_dir.join("manifest.json"))
}
