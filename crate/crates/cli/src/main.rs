//! `tablecot` — run table-reasoning evaluations from the command line.
//!
//! Subcommands: `run` (one evaluation end to end), `ablate-shots` (shot-count
//! sweep over a shared subset), `analyze` (bucket persisted records by table
//! size), `score` (re-score persisted records), and `plot-data` (x,y series
//! for external plotting).

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tablecot_core::backend::{BackendConfig, CompletionBackend, HttpBackend, MockBackend};
use tablecot_core::dataset::SamplingSpec;
use tablecot_core::linearize::TruncationLimits;
use tablecot_core::runner::{
    bucket_by_size, load_records, run_eval, score_records, shot_ablation, RunConfig,
    DEFAULT_SHOT_GRID,
};

#[derive(Parser)]
#[command(name = "tablecot", version, about = "Table-reasoning evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one evaluation: prompt, sample, vote, score, and write reports.
    Run(RunArgs),
    /// Run the same evaluation once per shot count and emit ablation.csv.
    AblateShots(AblateArgs),
    /// Bucket persisted records by table token estimate.
    Analyze(AnalyzeArgs),
    /// Re-score persisted records and print the metric.
    Score(ScoreArgs),
    /// Emit x,y series from records or an ablation CSV.
    PlotData(PlotArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Dataset file (canonical JSONL or an upstream format).
    #[arg(long)]
    data: PathBuf,
    /// Input format: canonical, wikitq-tsv, fetaqa-jsonl, tabfact-json, feverous-jsonl.
    #[arg(long, default_value = "canonical")]
    format: String,
    /// Task kind: short-answer-qa, long-form-qa, fact-verification.
    #[arg(long)]
    kind: String,
    /// Prompting mode: direct, cot, cot-sc.
    #[arg(long)]
    mode: String,
    /// Number of demonstrations (k-shot).
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Model name sent to the backend.
    #[arg(long)]
    model: String,
    /// Backend: http or mock.
    #[arg(long, default_value = "mock")]
    backend: String,
    /// Completion endpoint base URL (http backend).
    #[arg(long, default_value = "http://localhost:8000/v1")]
    base_url: String,
    /// Response cache directory (http backend).
    #[arg(long, default_value = "cache")]
    cache: PathBuf,
    /// Output directory for records and reports.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate a uniform sample of N instances instead of the full set.
    #[arg(long)]
    limit: Option<usize>,
    /// Sampling seed (used with --limit).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Abort on the first backend failure instead of excluding the instance.
    #[arg(long)]
    strict: bool,
    /// Concurrent workers (at most this many requests in flight).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Mock fixtures: JSON file mapping request digest to completions.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// HTTP timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    /// Maximum new tokens per completion.
    #[arg(long, default_value_t = 256)]
    max_new_tokens: usize,
    /// Stop sequence (repeatable).
    #[arg(long = "stop", default_values_t = vec!["\n\n".to_string()])]
    stop: Vec<String>,
    #[command(flatten)]
    limits: LimitArgs,
}

#[derive(Args, Clone)]
struct LimitArgs {
    /// Keep at most this many table rows.
    #[arg(long, default_value_t = 22)]
    max_rows: usize,
    /// Keep at most this many table columns.
    #[arg(long, default_value_t = 8)]
    max_cols: usize,
    /// Keep at most this many words per cell.
    #[arg(long, default_value_t = 10)]
    max_cell_words: usize,
    /// Token budget for the linearized table.
    #[arg(long, default_value_t = 2000)]
    token_budget: usize,
}

impl LimitArgs {
    fn to_limits(&self) -> TruncationLimits {
        TruncationLimits {
            max_rows: self.max_rows,
            max_cols: self.max_cols,
            max_words_per_cell: self.max_cell_words,
            token_budget: self.token_budget,
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated shot counts, e.g. 0,1,2,3,5.
    #[arg(long, default_value = "0,1,2,3,5")]
    ks: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// records.jsonl produced by a run.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = 100)]
    bucket_width: usize,
}

#[derive(Args)]
struct ScoreArgs {
    /// records.jsonl produced by a run.
    #[arg(long)]
    records: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// records.jsonl to plot as bucket metric vs table size.
    #[arg(long, conflicts_with = "ablation")]
    records: Option<PathBuf>,
    /// ablation.csv to plot as metric vs shot count.
    #[arg(long)]
    ablation: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    bucket_width: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::AblateShots(args) => cmd_ablate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Score(args) => cmd_score(args),
        Command::PlotData(args) => cmd_plot(args),
    }
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = RunConfig::new(
        &args.data,
        args.kind.parse()?,
        args.mode.parse()?,
        &args.model,
        &args.out,
    );
    config.format = args.format.parse()?;
    config.shots = args.shots;
    config.limits = args.limits.to_limits();
    config.sample = args.limit.map(|n| SamplingSpec { n, seed: args.seed });
    config.strict = args.strict;
    config.max_new_tokens = args.max_new_tokens;
    config.stop = args.stop.clone();
    config.workers = args.workers.max(1);
    Ok(config)
}

fn build_backend(args: &RunArgs) -> Result<Box<dyn CompletionBackend>> {
    match args.backend.as_str() {
        "mock" => {
            let fixtures: HashMap<String, Vec<String>> = match &args.fixtures {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading fixtures {}", path.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing fixtures {}", path.display()))?
                }
                None => HashMap::new(),
            };
            Ok(Box::new(MockBackend::new(fixtures)))
        }
        "http" => {
            let mut backend_config = BackendConfig::new(&args.base_url);
            backend_config.timeout_secs = args.timeout;
            backend_config.max_concurrent = args.workers.max(1);
            Ok(Box::new(HttpBackend::new(backend_config, &args.cache)?))
        }
        other => bail!("unknown backend `{other}` (expected http or mock)"),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = build_config(&args)?;
    let backend = build_backend(&args)?;
    let report = run_eval(&config, backend.as_ref())?;
    println!(
        "{} = {:.2} over {} instances ({} failed) in {:.2}s",
        report.metric.metric,
        report.metric.value,
        report.metric.count,
        report.instances_failed,
        report.wall_secs
    );
    println!(
        "network calls: {}, cache hits: {}",
        report.network_calls, report.cache_hits
    );
    println!("wrote {}", config.out_dir.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let ks = parse_ks(&args.ks)?;
    let config = build_config(&args.run)?;
    let backend = build_backend(&args.run)?;
    let rows = shot_ablation(&config, &ks, backend.as_ref())?;
    println!("k,metric,count");
    for row in &rows {
        println!("{},{:.2},{}", row.k, row.metric, row.count);
    }
    println!("wrote {}", config.out_dir.join("ablation.csv").display());
    Ok(())
}

fn parse_ks(text: &str) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Ok(DEFAULT_SHOT_GRID.to_vec());
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .with_context(|| format!("bad shot count `{part}`"))
        })
        .collect()
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let records = load_records(&args.records)?;
    let buckets = bucket_by_size(&records, args.bucket_width)?;
    println!("bucket,count,value");
    for bucket in buckets {
        let value = bucket.value.map(|v| format!("{v:.2}")).unwrap_or_default();
        println!("{},{},{value}", bucket.bucket, bucket.count);
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let records = load_records(&args.records)?;
    let summary = score_records(&records)?;
    println!("metric,value,count");
    println!("{},{:.2},{}", summary.metric, summary.value, summary.count);
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    match (&args.records, &args.ablation) {
        (Some(records_path), None) => {
            let records = load_records(records_path)?;
            let buckets = bucket_by_size(&records, args.bucket_width)?;
            println!("x,y");
            for bucket in buckets {
                if let Some(value) = bucket.value {
                    let upper = bucket
                        .bucket
                        .split('-')
                        .nth(1)
                        .context("malformed bucket label")?;
                    println!("{upper},{value:.2}");
                }
            }
        }
        (None, Some(ablation_path)) => {
            let text = std::fs::read_to_string(ablation_path)
                .with_context(|| format!("reading {}", ablation_path.display()))?;
            println!("x,y");
            for line in text.lines().skip(1) {
                let mut fields = line.split(',');
                let (Some(k), Some(metric)) = (fields.next(), fields.next()) else {
                    bail!("malformed ablation row: {line}");
                };
                println!("{k},{metric}");
            }
        }
        _ => bail!("pass exactly one of --records or --ablation"),
    }
    Ok(())
}
