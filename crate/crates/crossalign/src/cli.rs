//! Command-line entry point. [`run`] parses arguments, executes one
//! subcommand and writes a JSON run summary; the process exit code is 0 on
//! success, 1 for usage or validation errors and 2 for I/O failures.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use crossalign_core::align::{score_unit, ImageTextMode, Weights};
use crossalign_core::bench::{corpus_stats, dedup, iterate_generation, subsample, GenerationConfig, PoolStatus, TextProvider};
use crossalign_core::eval::{
    aggregate_image_scores, correlate_by_criterion, image_systems, score_histogram, AllMode, CorrelationTable,
    HumanJudgment,
};
use crossalign_core::filter::{entry_for, rank_unit, FilterOptions, FilterStrategy, RankedEntry};
use crossalign_core::{AlignmentBreakdown, Rubric, ScoringUnit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bench_io::{self, HttpProvider, RecordingProvider, ReplayProvider};
use crate::ingest::{
    join_units, load_detections, parse_manifest, EmbeddingLookup, EmbeddingReader, IngestError, JoinPolicy, Orphan,
    Sources, DEFAULT_THRESHOLD,
};
use crate::report;
use crate::select::{emit_manifest, par_rank_range, thread_pool};
use crate::service::{self, ServiceError};

pub const ENV_PROVIDER_URL: &str = "CROSSALIGN_PROVIDER_URL";
pub const ENV_DATA_DIR: &str = "CROSSALIGN_DATA_DIR";
pub const ENV_RUN_SUMMARY: &str = "CROSSALIGN_RUN_SUMMARY";

#[derive(Debug, Parser)]
#[command(name = "crossalign", version, about = "Cross-lingual image-caption alignment scoring, filtering and evaluation")]
pub struct Cli {
    /// Where to write the JSON run summary.
    #[arg(long, global = true, env = ENV_RUN_SUMMARY, default_value = "crossalign-run.json")]
    pub run_summary: PathBuf,
    /// Worker threads for scoring.
    #[arg(long, global = true, default_value_t = 4)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and join it with embeddings; writes the orphan report.
    Ingest(IngestArgs),
    /// Write the alignment breakdown of every unit.
    Score(ScoreArgs),
    /// Select the top-K records under a strategy and write them as a manifest.
    Filter(FilterArgs),
    /// Benchmark prompt generation and statistics.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Meta-evaluation against human judgments.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus manifest, one record per line.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Source caption token embeddings (EMB1).
    #[arg(long)]
    pub src: PathBuf,
    /// Translated caption token embeddings (EMB1).
    #[arg(long)]
    pub tgt: PathBuf,
    /// Image embeddings, one row per id (EMB1).
    #[arg(long)]
    pub img: PathBuf,
    /// Object label embeddings, one row per detection (EMB1).
    #[arg(long)]
    pub obj: Option<PathBuf>,
    /// Pooled translated-caption vectors, one row per id (EMB1).
    #[arg(long)]
    pub pooled: Option<PathBuf>,
    /// Detector output, one `{id, objects:[{label, score}]}` per line.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Detections are kept when their score is strictly above this.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Score records without object embeddings with an empty object set.
    #[arg(long)]
    pub allow_missing_objects: bool,
    /// Image-text alignment: `pooled` or `token-max`.
    #[arg(long, default_value = "pooled")]
    pub mode: ImageTextMode,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Orphan report output, one `{id, missing}` per line.
    #[arg(long)]
    pub orphans: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value = "ours")]
    pub strategy: String,
    /// Explicit `text,image,object` weights instead of the strategy's.
    #[arg(long, value_parser = parse_weights)]
    pub weights: Option<Weights>,
    /// Breakdown output, one `{id, a_st, a_it, a_ot, a_ot_defined, combined}` per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Corpus manifest, one record per line.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Rank a breakdown file from `score` instead of scoring embeddings.
    #[arg(long, conflicts_with_all = ["src", "tgt", "img", "obj", "pooled", "detections"])]
    pub scores: Option<PathBuf>,
    /// Source caption token embeddings (EMB1).
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// Translated caption token embeddings (EMB1).
    #[arg(long)]
    pub tgt: Option<PathBuf>,
    /// Image embeddings, one row per id (EMB1).
    #[arg(long)]
    pub img: Option<PathBuf>,
    /// Object label embeddings, one row per detection (EMB1).
    #[arg(long)]
    pub obj: Option<PathBuf>,
    /// Pooled translated-caption vectors, one row per id (EMB1).
    #[arg(long)]
    pub pooled: Option<PathBuf>,
    /// Detector output, one `{id, objects:[{label, score}]}` per line.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Detections are kept when their score is strictly above this.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Score records without object embeddings with an empty object set.
    #[arg(long)]
    pub allow_missing_objects: bool,
    /// Image-text alignment: `pooled` or `token-max`.
    #[arg(long, default_value = "pooled")]
    pub mode: ImageTextMode,
    /// `ours`, `text-only`, `image-only`, `object-ablated` or `random`.
    #[arg(long, default_value = "ours")]
    pub strategy: String,
    #[arg(long)]
    pub top_k: usize,
    /// Seed of the `random` strategy.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave out records without detected objects.
    #[arg(long)]
    pub drop_undefined_objects: bool,
    /// Filtered manifest output.
    #[arg(long)]
    pub out: PathBuf,
    /// Selection summary output (one line).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Grow a prompt pool from seed captions with a text-generation provider.
    Gen(BenchGenArgs),
    /// Count, mean words and mean objects of a prompt file.
    Stats(BenchStatsArgs),
    /// Uniform subset of a pool, kept in pool order.
    Sample(BenchSampleArgs),
}

#[derive(Debug, Args)]
pub struct BenchGenArgs {
    /// Seed captions, one per line; defaults to the bundled five.
    #[arg(long)]
    pub seeds: Option<PathBuf>,
    /// Prompt template JSON; defaults to the bundled template.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Final pool size, seeds included.
    #[arg(long)]
    pub target: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crossalign_core::bench::DEFAULT_ROUND_LIMIT)]
    pub round_limit: u32,
    /// Provider endpoint accepting `{prompt}` and answering `{text}`.
    #[arg(long, env = ENV_PROVIDER_URL)]
    pub provider_url: Option<String>,
    /// Answer from a recorded transcript; takes precedence over a provider.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Append every provider exchange to this transcript.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    /// Pool output, one `{text, round, seed_ids}` per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchStatsArgs {
    /// Plain captions or a pool file; defaults to the bundled seeds.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// `{id, count}` lines with object counts per prompt id.
    #[arg(long)]
    pub object_counts: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchSampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Pearson correlation of metric scores with human judgments per criterion.
    Correlate(CorrelateArgs),
    /// Mean image-rubric score per criterion and system.
    Aggregate(AggregateArgs),
    /// Score distribution and share of scores of 3 or more.
    Histogram(HistogramArgs),
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// Judgments as exported by the annotation service.
    #[arg(long)]
    pub judgments: PathBuf,
    /// Breakdown file; yields rows for ours, text-only, image-only,
    /// object-ablated and object-only.
    #[arg(long)]
    pub breakdown: Option<PathBuf>,
    /// Extra metric as NAME=PATH with `{id, score}` lines.
    #[arg(long = "metric", value_parser = parse_named_path)]
    pub metrics: Vec<(String, PathBuf)>,
    #[arg(long, default_value = "caption")]
    pub rubric: Rubric,
    /// `pooled` or `mean-of-r`.
    #[arg(long, default_value = "pooled")]
    pub all_mode: AllMode,
    /// Line-delimited table output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub judgments: PathBuf,
    /// Systems to report, in order; defaults to every tagged system.
    #[arg(long = "system")]
    pub systems: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    #[arg(long)]
    pub judgments: PathBuf,
    #[arg(long)]
    pub rubric: Option<Rubric>,
    /// One row per system tag instead of one overall row.
    #[arg(long)]
    pub by_system: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    #[arg(long, env = ENV_DATA_DIR, default_value = "annotation-data")]
    pub data_dir: PathBuf,
    /// Directory served under /static/; defaults to `<data-dir>/static`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn parse_weights(s: &str) -> Result<Weights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [t, i, o] if [t, i, o].iter().all(|v| v.is_finite()) => Ok(Weights::new(t, i, o)),
        _ => Err("expected three finite numbers: text,image,object".into()),
    }
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    if name.is_empty() || path.is_empty() {
        return Err("expected NAME=PATH".into());
    }
    Ok((name.into(), path.into()))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Validation(_) => "validation",
            CliError::Io(_) => "io",
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<usize, CliError> {
    let mut w = create(path)?;
    let mut n = 0;
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
        n += 1;
    }
    w.flush().map_err(io_err(path))?;
    Ok(n)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| invalid(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Runs the command line `args` (program name first) and returns the exit
/// code. Reports go to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = io::stdout();
    run_with(args, &mut stdout.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = command_name(&cli.command);
    let result = execute(&cli, out);
    let (code, summary) = match result {
        Ok(details) => (0, json!({ "command": name, "status": "ok", "exit_code": 0, "details": details })),
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            (code, json!({ "command": name, "status": "error", "exit_code": code, "error": { "kind": e.kind(), "message": e.to_string() } }))
        }
    };
    if let Err(e) = write_run_summary(&cli.run_summary, &summary) {
        eprintln!("error: {e}");
        return if code == 0 { 2 } else { code };
    }
    code
}

fn write_run_summary(path: &Path, summary: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest(_) => "ingest",
        Command::Score(_) => "score",
        Command::Filter(_) => "filter",
        Command::Bench(BenchCommand::Gen(_)) => "bench gen",
        Command::Bench(BenchCommand::Stats(_)) => "bench stats",
        Command::Bench(BenchCommand::Sample(_)) => "bench sample",
        Command::Eval(EvalCommand::Correlate(_)) => "eval correlate",
        Command::Eval(EvalCommand::Aggregate(_)) => "eval aggregate",
        Command::Eval(EvalCommand::Histogram(_)) => "eval histogram",
        Command::Serve(_) => "serve",
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<Value, CliError> {
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    match &cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Score(a) => score(a, cli.workers),
        Command::Filter(a) => filter(a, cli.workers, out),
        Command::Bench(BenchCommand::Gen(a)) => bench_gen(a),
        Command::Bench(BenchCommand::Stats(a)) => bench_stats(a, out),
        Command::Bench(BenchCommand::Sample(a)) => bench_sample(a),
        Command::Eval(EvalCommand::Correlate(a)) => eval_correlate(a, out),
        Command::Eval(EvalCommand::Aggregate(a)) => eval_aggregate(a, out),
        Command::Eval(EvalCommand::Histogram(a)) => eval_histogram(a, out),
        Command::Serve(a) => serve(a),
    }
}

struct Corpus {
    units: Vec<ScoringUnit>,
    orphans: Vec<Orphan>,
    records: usize,
    parse_errors: Vec<String>,
}

type Reader = EmbeddingReader<BufReader<File>>;

fn open_emb(path: &Path) -> Result<Reader, CliError> {
    EmbeddingReader::open(path).map_err(|e| match e {
        IngestError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

fn load_corpus(c: &CorpusArgs) -> Result<Corpus, CliError> {
    if c.mode == ImageTextMode::Pooled && c.pooled.is_none() {
        return Err(CliError::Usage("--mode pooled needs --pooled (or use --mode token-max)".into()));
    }
    if !(0.0..=1.0).contains(&c.threshold) {
        return Err(CliError::Usage("--threshold must lie in [0, 1]".into()));
    }
    let (lines, errors) = parse_manifest(open(&c.manifest)?)?;
    let mut src = open_emb(&c.src)?;
    let mut tgt = open_emb(&c.tgt)?;
    let mut img = open_emb(&c.img)?;
    let mut obj = c.obj.as_deref().map(open_emb).transpose()?;
    let mut pooled = c.pooled.as_deref().map(open_emb).transpose()?;
    let detections = match &c.detections {
        Some(p) => Some(load_detections(open(p)?)?),
        None => None,
    };
    let policy = JoinPolicy {
        allow_missing_objects: c.allow_missing_objects,
        require_pooled_text: c.mode == ImageTextMode::Pooled,
        threshold: c.threshold,
    };
    let mut sources = Sources {
        src: &mut src,
        tgt: &mut tgt,
        obj: obj.as_mut().map(|o| o as &mut dyn EmbeddingLookup),
        img: &mut img,
        pooled: pooled.as_mut().map(|p| p as &mut dyn EmbeddingLookup),
        detections: detections.as_ref(),
    };
    let records = lines.len();
    let (units, orphans) = join_units(lines.into_iter().map(|l| l.record), &mut sources, policy)?;
    for e in &errors {
        log::warn!("{}: {e}", c.manifest.display());
    }
    Ok(Corpus { units, orphans, records, parse_errors: errors.iter().map(ToString::to_string).collect() })
}

fn corpus_counts(c: &Corpus) -> Value {
    json!({
        "records": c.records,
        "units": c.units.len(),
        "orphans": c.orphans.len(),
        "malformed_lines": c.parse_errors,
    })
}

fn ingest(a: &IngestArgs, out: &mut dyn Write) -> Result<Value, CliError> {
    let corpus = load_corpus(&a.corpus)?;
    if let Some(path) = &a.orphans {
        write_jsonl(path, &corpus.orphans)?;
    }
    writeln!(
        out,
        "records {}  units {}  orphans {}  malformed lines {}",
        corpus.records,
        corpus.units.len(),
        corpus.orphans.len(),
        corpus.parse_errors.len()
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    let details = json!({ "counts": corpus_counts(&corpus), "orphans_file": a.orphans.as_deref().map(display) });
    if !corpus.parse_errors.is_empty() {
        return Err(CliError::Validation(format!(
            "{} malformed manifest line(s); first: {}",
            corpus.parse_errors.len(),
            corpus.parse_errors[0]
        )));
    }
    Ok(details)
}

/// One line of a breakdown file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub id: String,
    #[serde(flatten)]
    pub breakdown: AlignmentBreakdown,
}

fn score(a: &ScoreArgs, workers: usize) -> Result<Value, CliError> {
    let strategy = FilterStrategy::parse(&a.strategy, 0).map_err(|e| CliError::Usage(e.to_string()))?;
    let weights = match (a.weights, strategy.weights()) {
        (Some(w), _) | (None, Some(w)) => w,
        (None, None) => return Err(CliError::Usage("the random strategy has no alignment breakdown".into())),
    };
    let corpus = load_corpus(&a.corpus)?;
    let mode = a.corpus.mode;
    let pool = thread_pool(workers);
    let scored: Vec<_> = pool.install(|| corpus.units.par_iter().map(|u| score_unit(u, mode, weights)).collect());
    let mut rows = Vec::with_capacity(scored.len());
    let mut errors = Vec::new();
    for (unit, s) in corpus.units.iter().zip(scored) {
        match s {
            Ok(b) => rows.push(BreakdownRow { id: unit.record.id.clone(), breakdown: b }),
            Err(e) => errors.push(e.to_string()),
        }
    }
    let written = write_jsonl(&a.out, &rows)?;
    Ok(json!({
        "strategy": strategy.name(),
        "mode": mode.as_str(),
        "weights": [weights.text, weights.image, weights.object],
        "counts": corpus_counts(&corpus),
        "scored": written,
        "unit_errors": errors,
        "out": display(&a.out),
    }))
}

fn filter(a: &FilterArgs, workers: usize, out: &mut dyn Write) -> Result<Value, CliError> {
    let strategy = FilterStrategy::parse(&a.strategy, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let options = FilterOptions { drop_undefined_objects: a.drop_undefined_objects };
    let pool = thread_pool(workers);
    let (ranked, counts) = match &a.scores {
        Some(path) => {
            let rows: Vec<BreakdownRow> = read_jsonl(path)?;
            let ranked = par_rank_range(&pool, rows.len(), a.top_k, |i| {
                entry_for(&rows[i].id, &rows[i].breakdown, strategy, options)
            });
            (ranked, json!({ "breakdown_rows": rows.len() }))
        }
        None => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone().ok_or_else(|| CliError::Usage(format!("{flag} is required unless --scores is given")))
            };
            let corpus = load_corpus(&CorpusArgs {
                manifest: a.manifest.clone(),
                src: need(&a.src, "--src")?,
                tgt: need(&a.tgt, "--tgt")?,
                img: need(&a.img, "--img")?,
                obj: a.obj.clone(),
                pooled: a.pooled.clone(),
                detections: a.detections.clone(),
                threshold: a.threshold,
                allow_missing_objects: a.allow_missing_objects,
                mode: a.mode,
            })?;
            let units = &corpus.units;
            let ranked = par_rank_range(&pool, units.len(), a.top_k, |i| rank_unit(&units[i], strategy, a.mode, options));
            (ranked, corpus_counts(&corpus))
        }
    };
    let scored = ranked.scored;
    let errors: Vec<String> = ranked.errors.iter().map(ToString::to_string).collect();
    let top: Vec<RankedEntry> = ranked.top.into_sorted_vec();
    let mut w = create(&a.out)?;
    let summary = emit_manifest(&top, strategy.name(), a.top_k, open(&a.manifest)?, &mut w).map_err(io_err(&a.out))?;
    if let Some(path) = &a.summary {
        write_jsonl(path, [&summary])?;
    }
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    writeln!(
        out,
        "{}: selected {} of {} (k={}, dropped {})  min {}  median {}  max {}",
        summary.strategy,
        summary.selected,
        scored,
        summary.k,
        summary.dropped,
        fmt(summary.min),
        fmt(summary.median),
        fmt(summary.max)
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(json!({
        "counts": counts,
        "ranked": scored,
        "unit_errors": errors,
        "selection": summary,
        "out": display(&a.out),
    }))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn bench_gen(a: &BenchGenArgs) -> Result<Value, CliError> {
    let seeds = match &a.seeds {
        Some(p) => read_lines(p)?,
        None => bench_io::default_seeds(),
    };
    let template = match &a.template {
        Some(p) => serde_json::from_reader(open(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => bench_io::default_template(),
    };
    let mut config = GenerationConfig::new(template, seeds, a.target, a.seed);
    config.round_limit = a.round_limit;
    let mut provider: Box<dyn TextProvider> = match (&a.replay, &a.provider_url) {
        (Some(p), _) => Box::new(ReplayProvider::read(open(p)?).map_err(io_err(p))?),
        (None, Some(url)) => Box::new(HttpProvider::new(url.clone(), Duration::from_secs(a.timeout_secs))),
        (None, None) => {
            return Err(CliError::Usage(format!("give --replay or --provider-url (or set {ENV_PROVIDER_URL})")))
        }
    };
    if let Some(p) = &a.record {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(io_err(p))?;
        provider = Box::new(RecordingProvider::new(provider, file));
    }
    let backoff_base = if a.replay.is_some() { Duration::ZERO } else { Duration::from_millis(a.backoff_ms) };
    let mut backoff = bench_io::exponential_backoff(backoff_base);
    let outcome = iterate_generation(provider.as_mut(), &config, &mut backoff).map_err(invalid)?;
    let w = create(&a.out)?;
    bench_io::write_pool(w, &outcome.pool).map_err(io_err(&a.out))?;
    Ok(json!({
        "target": a.target,
        "seed": a.seed,
        "pool": outcome.pool.len(),
        "rounds": outcome.rounds,
        "status": match outcome.status { PoolStatus::Complete => "complete", PoolStatus::PartialPool => "partial" },
        "failures": outcome.failures.iter().map(|f| json!({ "round": f.round, "error": f.error })).collect::<Vec<_>>(),
        "out": display(&a.out),
    }))
}

fn bench_stats(a: &BenchStatsArgs, out: &mut dyn Write) -> Result<Value, CliError> {
    let (name, prompts) = match &a.input {
        Some(p) => (display(p), bench_io::read_prompts(open(p)?).map_err(io_err(p))?),
        None => ("seeds".to_string(), bench_io::read_prompts(bench_io::DEFAULT_SEEDS.as_bytes()).expect("in memory")),
    };
    let counts: HashMap<String, u32> = match &a.object_counts {
        Some(p) => bench_io::read_object_counts(open(p)?).map_err(|e| match e.kind() {
            io::ErrorKind::InvalidData => invalid(format!("{}: {e}", p.display())),
            _ => CliError::Io(format!("{}: {e}", p.display())),
        })?,
        None => HashMap::new(),
    };
    let object_counts: Vec<Option<u32>> = prompts.iter().map(|p| counts.get(&p.id).copied()).collect();
    let texts: Vec<&str> = prompts.iter().map(|p| p.prompt.text.as_str()).collect();
    let stats = corpus_stats(&texts, &object_counts).map_err(invalid)?;
    let row = json!({
        "input": name,
        "count": stats.count,
        "mean_words": format!("{:.2}", stats.mean_words),
        "mean_objects": format!("{:.2}", stats.mean_objects),
        "objects_heuristic": stats.objects_heuristic,
    });
    if let Some(p) = &a.out {
        write_jsonl(p, [&row])?;
    }
    let heuristic = stats.objects_heuristic;
    out.write_all(report::stats_table(&[(name, stats)]).render().as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
    if heuristic {
        writeln!(out, "* object counts estimated by the noun-chunk heuristic").map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(row)
}

fn bench_sample(a: &BenchSampleArgs) -> Result<Value, CliError> {
    let prompts = bench_io::read_prompts(open(&a.input)?).map_err(io_err(&a.input))?;
    let pool: Vec<_> = prompts.into_iter().map(|p| p.prompt).collect();
    let unique = dedup(&pool);
    let picked = subsample(&unique, a.n, a.seed).map_err(invalid)?;
    bench_io::write_pool(create(&a.out)?, &picked).map_err(io_err(&a.out))?;
    Ok(json!({ "input": pool.len(), "unique": unique.len(), "n": picked.len(), "seed": a.seed, "out": display(&a.out) }))
}

#[derive(Deserialize)]
struct MetricRow {
    id: String,
    #[serde(alias = "combined")]
    score: f64,
}

/// Metric rows derived from a breakdown file: the full score, its single
/// components and the object-ablated sum.
fn breakdown_metrics(rows: &[BreakdownRow]) -> Vec<(String, BTreeMap<String, f64>)> {
    let variants: [(&str, Weights); 5] = [
        ("ours", Weights::ALL),
        ("text-only", Weights::new(1.0, 0.0, 0.0)),
        ("image-only", Weights::new(0.0, 1.0, 0.0)),
        ("object-ablated", Weights::new(1.0, 1.0, 0.0)),
        ("object-only", Weights::new(0.0, 0.0, 1.0)),
    ];
    variants
        .iter()
        .map(|(name, w)| {
            let scores = rows
                .iter()
                .map(|r| {
                    let b = &r.breakdown;
                    (r.id.clone(), w.text * b.a_st + w.image * b.a_it + w.object * b.a_ot)
                })
                .collect();
            (name.to_string(), scores)
        })
        .collect()
}

fn eval_correlate(a: &CorrelateArgs, out: &mut dyn Write) -> Result<Value, CliError> {
    let judgments: Vec<HumanJudgment> = read_jsonl(&a.judgments)?;
    let mut metrics: Vec<(String, BTreeMap<String, f64>)> = Vec::new();
    if let Some(p) = &a.breakdown {
        metrics.extend(breakdown_metrics(&read_jsonl::<BreakdownRow>(p)?));
    }
    for (name, p) in &a.metrics {
        let rows: Vec<MetricRow> = read_jsonl(p)?;
        metrics.push((name.clone(), rows.into_iter().map(|r| (r.id, r.score)).collect()));
    }
    if metrics.is_empty() {
        return Err(CliError::Usage("give --breakdown and/or --metric NAME=PATH".into()));
    }
    let mut tables: Vec<(String, CorrelationTable)> = Vec::new();
    for (name, scores) in &metrics {
        let t = correlate_by_criterion(&judgments, scores, a.rubric, a.all_mode)
            .map_err(|e| invalid(format!("{name}: {e}")))?;
        tables.push((name.clone(), t));
    }
    let mut rows = Vec::new();
    for (name, t) in &tables {
        for (criterion, cell) in t.criteria.iter().map(|(c, cell)| (c.as_str(), cell)).chain([("all", &t.all)]) {
            rows.push(json!({
                "metric": name,
                "rubric": a.rubric,
                "criterion": criterion,
                "n": cell.n,
                "status": cell.status,
                "r": cell.r,
                "p_value": cell.p_value,
            }));
        }
    }
    if let Some(p) = &a.out {
        write_jsonl(p, &rows)?;
    }
    out.write_all(report::correlation_table(a.rubric, &tables).render().as_bytes())
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(json!({ "judgments": judgments.len(), "metrics": metrics.len(), "all_mode": a.all_mode, "rows": rows.len() }))
}

fn eval_aggregate(a: &AggregateArgs, out: &mut dyn Write) -> Result<Value, CliError> {
    let judgments: Vec<HumanJudgment> = read_jsonl(&a.judgments)?;
    let systems = if a.systems.is_empty() { image_systems(&judgments) } else { a.systems.clone() };
    let mut rows = Vec::new();
    for s in &systems {
        rows.push(aggregate_image_scores(&judgments, s).map_err(invalid)?);
    }
    if let Some(p) = &a.out {
        write_jsonl(p, &rows)?;
    }
    out.write_all(report::aggregation_table(Rubric::Image, &rows).render().as_bytes())
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok(json!({ "judgments": judgments.len(), "systems": systems }))
}

fn eval_histogram(a: &HistogramArgs, out: &mut dyn Write) -> Result<Value, CliError> {
    let judgments: Vec<HumanJudgment> = read_jsonl(&a.judgments)?;
    let selected: Vec<&HumanJudgment> = judgments.iter().filter(|j| a.rubric.map_or(true, |r| j.rubric == r)).collect();
    let mut groups: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for j in &selected {
        let key = if a.by_system { j.system_tag.clone().unwrap_or_else(|| "-".into()) } else { "all".into() };
        groups.entry(key).or_default().push(j.score);
    }
    if groups.is_empty() && !a.by_system {
        groups.insert("all".into(), Vec::new());
    }
    let rows: Vec<_> = groups.into_iter().map(|(k, v)| (k, score_histogram(v))).collect();
    if let Some(p) = &a.out {
        write_jsonl(p, rows.iter().map(|(k, h)| json!({ "group": k, "histogram": h })))?;
    }
    out.write_all(report::histogram_table(&rows).render().as_bytes()).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(json!({ "judgments": selected.len(), "groups": rows.len() }))
}

fn serve(a: &ServeArgs) -> Result<Value, CliError> {
    let static_dir = a.static_dir.clone().unwrap_or_else(|| a.data_dir.join("static"));
    service::serve(SocketAddr::new(a.bind, a.port), &a.data_dir, static_dir)?;
    Ok(json!({ "data_dir": display(&a.data_dir) }))
}
