//! Core pipeline for table-reasoning evaluation: canonical table and task
//! types, dataset adapters, table linearization under a token budget, k-shot
//! prompt assembly, a completion backend with deterministic caching, answer
//! extraction with self-consistency voting, and run orchestration.

pub mod backend;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linearize;
pub mod prompt;
pub mod runner;
pub mod table;

pub use backend::{
    cache_key, cached_complete, complete, mock_complete, BackendConfig, CompletionBackend,
    CompletionRequest, CompletionSet, CompletionSource, HttpBackend, MockBackend, RetryPolicy,
};
pub use dataset::{
    adapt_source, filter_table_supported, load_canonical, sample_subset, write_canonical,
    CanonicalRecord, SamplingSpec, SourceFormat,
};
pub use error::{Error, Result};
pub use eval::{
    accuracy, corpus_bleu, exact_match, extract_answer, majority_vote, normalize_answer,
    ExtractedAnswer, MetricKind, ScoreSummary, Verdict, VoteResult,
};
pub use linearize::{
    estimate_tokens, fit_to_budget, linearize, truncate_table, LinearTable, TruncationFlags,
    TruncationLimits,
};
pub use prompt::{build_prompt, default_demos, Demonstration, PromptMode, PromptSpec};
pub use runner::{
    bucket_by_size, emit_report, load_records, run_eval, score_records, shot_ablation,
    AblationRow, BucketSummary, DataFormat, PredictionRecord, RunConfig, RunMode, RunReport,
    DEFAULT_SHOT_GRID,
};
pub use table::{table_dims, validate_table, Table, TaskInstance, TaskKind, ValidationReport};
