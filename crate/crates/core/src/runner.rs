//! End-to-end run orchestration: load instances, prompt, sample completions,
//! vote, score, and persist per-instance records plus summary reports.
//!
//! Determinism is the design constraint everything here serves: instance
//! processing may fan out across workers, but records are sorted by instance
//! id before any aggregation or output, so a fixed config with a warm cache
//! or mock backend produces byte-identical files regardless of concurrency.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{cache_key, CompletionBackend, CompletionRequest};
use crate::dataset::{adapt_source, load_canonical, sample_subset, SamplingSpec, SourceFormat};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, corpus_bleu, exact_match, extract_answer, majority_vote, MetricKind, ScoreSummary,
    Verdict,
};
use crate::linearize::{fit_to_budget, TruncationLimits};
use crate::prompt::{build_prompt, default_demos, PromptMode};
use crate::table::{TaskInstance, TaskKind};

/// Prompting variant for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Direct,
    Cot,
    CotSc,
}

impl RunMode {
    pub fn prompt_mode(&self) -> PromptMode {
        match self {
            RunMode::Direct => PromptMode::Direct,
            RunMode::Cot | RunMode::CotSc => PromptMode::CoT,
        }
    }

    /// Sampled reasoning paths per instance: five under self-consistency,
    /// one otherwise.
    pub fn paths(&self) -> usize {
        match self {
            RunMode::CotSc => 5,
            _ => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Direct => "direct",
            RunMode::Cot => "cot",
            RunMode::CotSc => "cot-sc",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(RunMode::Direct),
            "cot" => Ok(RunMode::Cot),
            "cot-sc" => Ok(RunMode::CotSc),
            other => Err(Error::Config(format!("unknown mode: {other}"))),
        }
    }
}

/// Input format for a run: the canonical JSONL or one of the adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Canonical,
    #[serde(untagged)]
    Source(SourceFormat),
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "canonical" {
            Ok(DataFormat::Canonical)
        } else {
            Ok(DataFormat::Source(s.parse()?))
        }
    }
}

/// Everything that defines a run. Output directory and worker count are
/// execution details and stay out of the serialized config echo, which keeps
/// reports byte-identical across concurrency settings.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub format: DataFormat,
    pub kind: TaskKind,
    pub mode: RunMode,
    pub shots: usize,
    pub model: String,
    pub limits: TruncationLimits,
    pub sample: Option<SamplingSpec>,
    pub strict: bool,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub workers: usize,
}

impl RunConfig {
    /// A run with default sampling settings over canonical JSONL input.
    pub fn new(
        data_path: impl Into<PathBuf>,
        kind: TaskKind,
        mode: RunMode,
        model: impl Into<String>,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        let request_defaults = CompletionRequest::new("", "", 1);
        RunConfig {
            data_path: data_path.into(),
            format: DataFormat::Canonical,
            kind,
            mode,
            shots: 1,
            model: model.into(),
            limits: TruncationLimits::default(),
            sample: None,
            strict: false,
            max_new_tokens: request_defaults.max_new_tokens,
            stop: request_defaults.stop,
            out_dir: out_dir.into(),
            workers: 1,
        }
    }

    /// The completion request this config issues for a given prompt text.
    pub fn request_for(&self, prompt_text: &str) -> CompletionRequest {
        let mut request =
            CompletionRequest::new(&self.model, prompt_text, self.mode.paths());
        request.max_new_tokens = self.max_new_tokens;
        request.stop = self.stop.clone();
        request
    }
}

/// Per-instance outcome; one JSONL line in `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub kind: TaskKind,
    pub prompt_digest: String,
    pub completions: Vec<String>,
    /// Per-completion vote keys (normalized answers or verdict labels).
    pub extracted: Vec<String>,
    /// Majority-vote winner; the hypothesis side of long-form scoring.
    pub voted: String,
    pub gold: Vec<String>,
    /// Set for exact-match and accuracy kinds; long-form records are scored
    /// corpus-level instead.
    pub correct: Option<bool>,
    pub failed: bool,
    pub table_token_estimate: usize,
    pub kept_rows: usize,
    pub kept_cols: usize,
}

/// One table-size bucket with its member count and metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: String,
    pub count: usize,
    pub value: Option<f64>,
}

/// Summary of one run; serialized as `report.json`. Wall time is echoed to
/// the console only, so reports stay reproducible byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub metric: ScoreSummary,
    pub buckets: Vec<BucketSummary>,
    pub instances_total: usize,
    pub instances_scored: usize,
    pub instances_failed: usize,
    pub network_calls: u64,
    pub cache_hits: u64,
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Run the full pipeline and write `records.jsonl`, `report.json`,
/// `metrics.csv`, and `buckets.csv` under the config's output directory.
pub fn run_eval(config: &RunConfig, backend: &dyn CompletionBackend) -> Result<RunReport> {
    let started = Instant::now();
    if config.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let instances = load_instances(config)?;
    let records = process_instances(config, &instances, backend)?;
    let metric = score_records(&records)?;
    let buckets = bucket_by_size(&records, 100)?;
    let failed = records.iter().filter(|r| r.failed).count();
    let report = RunReport {
        config: config.clone(),
        metric,
        buckets,
        instances_total: records.len(),
        instances_scored: records.len() - failed,
        instances_failed: failed,
        network_calls: backend.network_calls(),
        cache_hits: backend.cache_hits(),
        wall_secs: started.elapsed().as_secs_f64(),
    };
    emit_report(&records, &report, &config.out_dir)?;
    Ok(report)
}

fn load_instances(config: &RunConfig) -> Result<Vec<TaskInstance>> {
    let instances = match config.format {
        DataFormat::Canonical => load_canonical(&config.data_path)?,
        DataFormat::Source(format) => adapt_source(&config.data_path, format)?
            .into_iter()
            .map(|r| r.into_instance())
            .collect::<Result<Vec<_>>>()?,
    };
    for instance in &instances {
        if instance.kind != config.kind {
            return Err(Error::Config(format!(
                "instance {} has kind {} but the run expects {}",
                instance.id, instance.kind, config.kind
            )));
        }
    }
    match &config.sample {
        Some(spec) => sample_subset(&instances, spec),
        None => Ok(instances),
    }
}

fn process_instances(
    config: &RunConfig,
    instances: &[TaskInstance],
    backend: &dyn CompletionBackend,
) -> Result<Vec<PredictionRecord>> {
    let demos = default_demos(config.kind, config.shots)?;
    let slots: Vec<Mutex<Option<Result<PredictionRecord>>>> =
        instances.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.workers.min(instances.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= instances.len() {
                    break;
                }
                let outcome = process_one(config, &instances[i], &demos, backend);
                *slots[i].lock().expect("worker slot poisoned") = Some(outcome);
            });
        }
    });

    let mut records = Vec::with_capacity(instances.len());
    for slot in slots {
        let outcome = slot
            .into_inner()
            .expect("worker slot poisoned")
            .expect("every slot is filled");
        records.push(outcome?);
    }
    records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(records)
}

fn process_one(
    config: &RunConfig,
    instance: &TaskInstance,
    demos: &[crate::prompt::Demonstration],
    backend: &dyn CompletionBackend,
) -> Result<PredictionRecord> {
    let fit = fit_to_budget(&instance.table, &config.limits);
    let prompt = build_prompt(instance, demos, config.mode.prompt_mode(), &config.limits)?;
    let request = config.request_for(&prompt.text);
    let digest = cache_key(&request);

    let set = match backend.fetch(&request) {
        Ok(set) => set,
        Err(e @ (Error::BackendPermanent { .. } | Error::BackendTransientExhausted(_))) => {
            if config.strict {
                return Err(e);
            }
            log::warn!("instance {} failed: {e}; excluded from metrics", instance.id);
            return Ok(PredictionRecord {
                instance_id: instance.id.clone(),
                kind: instance.kind,
                prompt_digest: digest,
                completions: Vec::new(),
                extracted: Vec::new(),
                voted: String::new(),
                gold: instance.gold.clone(),
                correct: None,
                failed: true,
                table_token_estimate: fit.estimated_tokens,
                kept_rows: fit.kept_rows,
                kept_cols: fit.kept_cols,
            });
        }
        Err(other) => return Err(other),
    };

    let extracted: Vec<String> = set
        .completions
        .iter()
        .map(|c| extract_answer(c, instance.kind).vote_key())
        .collect();
    let vote = majority_vote(&extracted, extracted.len())?;
    let correct = match instance.kind {
        TaskKind::ShortAnswerQA => {
            let parts: Vec<String> = vote.winner.split('|').map(str::to_string).collect();
            Some(exact_match(&parts, &instance.gold))
        }
        TaskKind::FactVerification => Some(vote.winner == instance.gold[0]),
        TaskKind::LongFormQA => None,
    };

    Ok(PredictionRecord {
        instance_id: instance.id.clone(),
        kind: instance.kind,
        prompt_digest: digest,
        completions: set.completions,
        extracted,
        voted: vote.winner,
        gold: instance.gold.clone(),
        correct,
        failed: false,
        table_token_estimate: fit.estimated_tokens,
        kept_rows: fit.kept_rows,
        kept_cols: fit.kept_cols,
    })
}

/// Recompute the run metric from persisted records. Pure, so the reported
/// summary is always reproducible from `records.jsonl` alone. Failed records
/// never enter the denominator.
pub fn score_records(records: &[PredictionRecord]) -> Result<ScoreSummary> {
    let scored: Vec<&PredictionRecord> = records.iter().filter(|r| !r.failed).collect();
    if scored.is_empty() {
        return Err(Error::EmptyInput("no scored records".into()));
    }
    let kinds: BTreeSet<TaskKind> = scored.iter().map(|r| r.kind).collect();
    if kinds.len() > 1 {
        return Err(Error::Config("records mix task kinds".into()));
    }
    let kind = scored[0].kind;
    match kind {
        TaskKind::ShortAnswerQA => {
            let correct = scored
                .iter()
                .filter(|r| {
                    let parts: Vec<String> = r.voted.split('|').map(str::to_string).collect();
                    exact_match(&parts, &r.gold)
                })
                .count();
            Ok(ScoreSummary {
                metric: MetricKind::ExactMatch,
                value: 100.0 * correct as f64 / scored.len() as f64,
                count: scored.len(),
            })
        }
        TaskKind::FactVerification => {
            let pairs: Vec<(Verdict, &str)> = scored
                .iter()
                .map(|r| (parse_verdict(&r.voted), r.gold[0].as_str()))
                .collect();
            accuracy(&pairs)
        }
        TaskKind::LongFormQA => {
            let hyps: Vec<String> = scored.iter().map(|r| r.voted.clone()).collect();
            let refs: Vec<String> = scored.iter().map(|r| r.gold[0].clone()).collect();
            corpus_bleu(&hyps, &refs)
        }
    }
}

fn parse_verdict(text: &str) -> Verdict {
    match text {
        "SUPPORTS" => Verdict::Supports,
        "REFUTES" => Verdict::Refutes,
        _ => Verdict::Unknown,
    }
}

/// Group scored records into `[0,width)`, `[width,2*width)`, … buckets of
/// table token estimate and compute the run metric inside each bucket.
/// Empty buckets below the maximum observed estimate are emitted with a null
/// metric so the series has no holes.
pub fn bucket_by_size(records: &[PredictionRecord], width: usize) -> Result<Vec<BucketSummary>> {
    if width == 0 {
        return Err(Error::Config("bucket width must be positive".into()));
    }
    let scored: Vec<&PredictionRecord> = records.iter().filter(|r| !r.failed).collect();
    if scored.is_empty() {
        return Ok(Vec::new());
    }
    let max_bucket = scored
        .iter()
        .map(|r| r.table_token_estimate / width)
        .max()
        .unwrap_or(0);
    let mut buckets = Vec::with_capacity(max_bucket + 1);
    for b in 0..=max_bucket {
        let lo = b * width;
        let hi = lo + width;
        let members: Vec<PredictionRecord> = scored
            .iter()
            .filter(|r| r.table_token_estimate >= lo && r.table_token_estimate < hi)
            .map(|r| (*r).clone())
            .collect();
        let value = if members.is_empty() {
            None
        } else {
            Some(score_records(&members)?.value)
        };
        buckets.push(BucketSummary {
            bucket: format!("{lo}-{hi}"),
            count: members.len(),
            value,
        });
    }
    Ok(buckets)
}

/// One row of a shot-count ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub metric: f64,
    pub count: usize,
}

/// The default shot grid used by the ablation subcommand.
pub const DEFAULT_SHOT_GRID: [usize; 5] = [0, 1, 2, 3, 5];

/// Re-run the base config once per shot count, sharing the sampled subset
/// (same seed) and whatever cache the backend carries. Each run writes its
/// own report under `out_dir/k<k>/`; the rows land in `ablation.csv`.
pub fn shot_ablation(
    base: &RunConfig,
    ks: &[usize],
    backend: &dyn CompletionBackend,
) -> Result<Vec<AblationRow>> {
    if ks.is_empty() {
        return Err(Error::Config("ablation needs at least one shot count".into()));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut config = base.clone();
        config.shots = k;
        config.out_dir = base.out_dir.join(format!("k{k}"));
        let report = run_eval(&config, backend)?;
        rows.push(AblationRow {
            k,
            metric: report.metric.value,
            count: report.metric.count,
        });
    }
    let path = base.out_dir.join("ablation.csv");
    let mut text = String::from("k,metric,count\n");
    for row in &rows {
        text.push_str(&format!("{},{:.2},{}\n", row.k, row.metric, row.count));
    }
    write_file(&path, text.as_bytes())?;
    Ok(rows)
}

/// Write `records.jsonl`, `report.json`, `metrics.csv`, and `buckets.csv`.
/// CSV values are fixed to two decimals; ordering is fully deterministic.
pub fn emit_report(
    records: &[PredictionRecord],
    report: &RunReport,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut jsonl = String::new();
    for record in records {
        jsonl.push_str(&serde_json::to_string(record).expect("records are always encodable"));
        jsonl.push('\n');
    }
    write_file(&out_dir.join("records.jsonl"), jsonl.as_bytes())?;

    let mut report_json =
        serde_json::to_string_pretty(report).expect("reports are always encodable");
    report_json.push('\n');
    write_file(&out_dir.join("report.json"), report_json.as_bytes())?;

    let mut metrics_csv = String::from("metric,value,count\n");
    if !records.is_empty() {
        metrics_csv.push_str(&format!(
            "{},{:.2},{}\n",
            report.metric.metric, report.metric.value, report.metric.count
        ));
    }
    write_file(&out_dir.join("metrics.csv"), metrics_csv.as_bytes())?;

    let mut buckets_csv = String::from("bucket,count,value\n");
    for bucket in &report.buckets {
        let value = bucket
            .value
            .map(|v| format!("{v:.2}"))
            .unwrap_or_default();
        buckets_csv.push_str(&format!("{},{},{value}\n", bucket.bucket, bucket.count));
    }
    write_file(&out_dir.join("buckets.csv"), buckets_csv.as_bytes())?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read persisted records back for re-scoring and analysis.
pub fn load_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
