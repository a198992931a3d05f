//! End-to-end runs against the mock backend: scoring arithmetic, voting,
//! determinism, failure handling, concurrency, and the ablation sweep.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};

use common::{digest_for, fixtures_for_run, fv_instances, lf_instances, qa_instances, write_fixture};
use tablecot_core::backend::{CompletionBackend, CompletionRequest, CompletionSet, MockBackend};
use tablecot_core::dataset::SamplingSpec;
use tablecot_core::error::{Error, Result};
use tablecot_core::runner::{
    load_records, run_eval, score_records, shot_ablation, RunConfig, RunMode,
};
use tablecot_core::table::TaskKind;

fn base_config(data_path: &Path, out_dir: &Path, mode: RunMode) -> RunConfig {
    RunConfig::new(data_path, TaskKind::ShortAnswerQA, mode, "mock-model", out_dir)
}

#[test]
fn mock_run_scores_seventy_percent() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(10);
    let data = write_fixture(dir.path(), &instances);
    let config = base_config(&data, &dir.path().join("out"), RunMode::Cot);

    // 7 of 10 completions carry the gold after the cue; 3 answer wrong.
    let fixtures = fixtures_for_run(&config, &instances, |instance| {
        let idx: usize = instance.id[5..].parse().unwrap();
        if idx < 7 {
            vec![format!(
                "The table lists it directly. Therefore, the answer is {}.",
                instance.gold[0]
            )]
        } else {
            vec!["I think the answer is something else.".to_string()]
        }
    });
    let backend = MockBackend::new(fixtures);
    let report = run_eval(&config, &backend).unwrap();

    assert_eq!(report.metric.value, 70.0);
    assert_eq!(report.metric.count, 10);
    assert_eq!(report.instances_failed, 0);
    assert_eq!(backend.calls(), 10);

    let metrics = std::fs::read_to_string(config.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "metric,value,count\nEM,70.00,10\n");
}

#[test]
fn self_consistency_vote_rescues_minority_wrong_paths() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(6);
    let data = write_fixture(dir.path(), &instances);
    let config = base_config(&data, &dir.path().join("out"), RunMode::CotSc);

    // Three paths agree on gold, two disagree with each other; the vote
    // must pick the gold answer for every instance.
    let fixtures = fixtures_for_run(&config, &instances, |instance| {
        let gold = &instance.gold[0];
        vec![
            format!("Reasoning one. Therefore, the answer is {gold}."),
            "Confused path. Therefore, the answer is alpha.".to_string(),
            format!("Reasoning two. Therefore, the answer is {gold}."),
            "Another bad path. Therefore, the answer is beta.".to_string(),
            format!("Reasoning three. Therefore, the answer is {gold}."),
        ]
    });
    let backend = MockBackend::new(fixtures);
    let report = run_eval(&config, &backend).unwrap();

    assert_eq!(report.metric.value, 100.0);
    let records = load_records(&config.out_dir.join("records.jsonl")).unwrap();
    assert!(records.iter().all(|r| r.completions.len() == 5));
    assert!(records.iter().all(|r| r.extracted.len() == 5));
}

#[test]
fn unknown_digest_falls_back_and_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(3);
    let data = write_fixture(dir.path(), &instances);
    let config = base_config(&data, &dir.path().join("out"), RunMode::Direct);
    let backend = MockBackend::new(HashMap::new());
    let report = run_eval(&config, &backend).unwrap();
    assert_eq!(report.metric.value, 0.0);
    let records = load_records(&config.out_dir.join("records.jsonl")).unwrap();
    assert!(records.iter().all(|r| r.voted == "unknown"));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(25);
    let data = write_fixture(dir.path(), &instances);
    let template = base_config(&data, dir.path(), RunMode::Cot);
    let fixtures = fixtures_for_run(&template, &instances, |instance| {
        vec![format!("Therefore, the answer is {}.", instance.gold[0])]
    });

    let mut outputs: Vec<(String, String, String)> = Vec::new();
    for (label, workers) in [("a", 1), ("b", 1), ("c", 8), ("d", 8)] {
        let mut config = template.clone();
        config.out_dir = dir.path().join(format!("out-{label}"));
        config.workers = workers;
        let backend = MockBackend::new(fixtures.clone());
        run_eval(&config, &backend).unwrap();
        outputs.push((
            std::fs::read_to_string(config.out_dir.join("records.jsonl")).unwrap(),
            std::fs::read_to_string(config.out_dir.join("report.json")).unwrap(),
            std::fs::read_to_string(config.out_dir.join("metrics.csv")).unwrap(),
        ));
    }
    for other in &outputs[1..] {
        assert_eq!(outputs[0].0, other.0, "records.jsonl differs");
        assert_eq!(outputs[0].1, other.1, "report.json differs");
        assert_eq!(outputs[0].2, other.2, "metrics.csv differs");
    }
}

/// Mock wrapper that fails permanently for a chosen digest.
struct FailingBackend {
    inner: MockBackend,
    fail_digest: String,
}

impl CompletionBackend for FailingBackend {
    fn fetch(&self, request: &CompletionRequest) -> Result<CompletionSet> {
        if tablecot_core::backend::cache_key(request) == self.fail_digest {
            return Err(Error::BackendPermanent {
                status: 400,
                body_excerpt: "rigged failure".into(),
            });
        }
        self.inner.fetch(request)
    }
}

#[test]
fn permanent_failures_are_excluded_unless_strict() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(10);
    let data = write_fixture(dir.path(), &instances);
    let mut config = base_config(&data, &dir.path().join("out"), RunMode::Cot);

    let fixtures = fixtures_for_run(&config, &instances, |instance| {
        vec![format!("Therefore, the answer is {}.", instance.gold[0])]
    });
    let backend = FailingBackend {
        inner: MockBackend::new(fixtures.clone()),
        fail_digest: digest_for(&config, &instances[4]),
    };
    let report = run_eval(&config, &backend).unwrap();
    assert_eq!(report.instances_failed, 1);
    assert_eq!(report.instances_scored, 9);
    assert_eq!(report.metric.count, 9);
    assert_eq!(report.metric.value, 100.0);
    let records = load_records(&config.out_dir.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().any(|r| r.failed && r.instance_id == "inst-004"));

    config.strict = true;
    config.out_dir = dir.path().join("out-strict");
    let backend = FailingBackend {
        inner: MockBackend::new(fixtures),
        fail_digest: digest_for(&config, &instances[4]),
    };
    assert!(matches!(
        run_eval(&config, &backend),
        Err(Error::BackendPermanent { .. })
    ));
}

/// Counts concurrent in-flight fetches so worker fan-out can be bounded.
struct GaugeBackend {
    inner: MockBackend,
    in_flight: AtomicI64,
    max_seen: AtomicI64,
    calls: AtomicU64,
}

impl GaugeBackend {
    fn new(inner: MockBackend) -> Self {
        GaugeBackend {
            inner,
            in_flight: AtomicI64::new(0),
            max_seen: AtomicI64::new(0),
            calls: AtomicU64::new(0),
        }
    }
}

impl CompletionBackend for GaugeBackend {
    fn fetch(&self, request: &CompletionRequest) -> Result<CompletionSet> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_seen.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_millis(2));
        let result = self.inner.fetch(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

#[test]
fn at_most_configured_workers_are_in_flight() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(25);
    let data = write_fixture(dir.path(), &instances);
    let mut config = base_config(&data, &dir.path().join("out"), RunMode::Direct);
    config.workers = 3;
    let backend = GaugeBackend::new(MockBackend::new(HashMap::new()));
    run_eval(&config, &backend).unwrap();
    assert_eq!(backend.calls.load(Ordering::SeqCst), 25);
    let max = backend.max_seen.load(Ordering::SeqCst);
    assert!(max <= 3, "observed {max} concurrent fetches with 3 workers");
    assert!(max >= 1);
}

#[test]
fn ablation_emits_one_row_per_shot_count_over_a_shared_subset() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(12);
    let data = write_fixture(dir.path(), &instances);
    let mut base = base_config(&data, &dir.path().join("out"), RunMode::Cot);
    base.sample = Some(SamplingSpec { n: 5, seed: 42 });

    // Fixture map must cover each shot count, since prompts differ with k.
    let mut fixtures = HashMap::new();
    for k in [0usize, 1] {
        let mut config = base.clone();
        config.shots = k;
        fixtures.extend(fixtures_for_run(&config, &instances, |instance| {
            vec![format!("Therefore, the answer is {}.", instance.gold[0])]
        }));
    }
    let backend = MockBackend::new(fixtures);
    let rows = shot_ablation(&base, &[0, 1], &backend).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].k, rows[1].k), (0, 1));
    assert!(rows.iter().all(|r| r.count == 5));

    let ids = |k: usize| -> Vec<String> {
        load_records(&base.out_dir.join(format!("k{k}")).join("records.jsonl"))
            .unwrap()
            .into_iter()
            .map(|r| r.instance_id)
            .collect()
    };
    assert_eq!(ids(0), ids(1), "shared seed must give identical subsets");

    let csv = std::fs::read_to_string(base.out_dir.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("k,metric,count\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn fact_verification_run_scores_binary_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let instances = fv_instances(8);
    let data = write_fixture(dir.path(), &instances);
    let mut config = base_config(&data, &dir.path().join("out"), RunMode::Cot);
    config.kind = TaskKind::FactVerification;

    // Six verdicts echo the gold; one flips; one is unparseable (UNKNOWN).
    let fixtures = fixtures_for_run(&config, &instances, |instance| {
        let idx: usize = instance.id[6..].parse().unwrap();
        let gold_is_supports = instance.gold[0] == "SUPPORTS";
        let text = match idx {
            6 => "I cannot tell from this table.".to_string(),
            7 => format!(
                "The table shows otherwise, so {}.",
                if gold_is_supports { "no" } else { "yes" }
            ),
            _ => format!(
                "Checking the points column, the claim is {}.",
                if gold_is_supports { "true" } else { "false" }
            ),
        };
        vec![text]
    });
    let report = run_eval(&config, &MockBackend::new(fixtures)).unwrap();
    assert_eq!(report.metric.metric.as_str(), "Accuracy");
    assert_eq!(report.metric.value, 75.0);

    let records = load_records(&config.out_dir.join("records.jsonl")).unwrap();
    assert!(records
        .iter()
        .all(|r| ["SUPPORTS", "REFUTES", "UNKNOWN"].contains(&r.voted.as_str())));
    let unknown = records.iter().find(|r| r.instance_id == "claim-006").unwrap();
    assert_eq!(unknown.voted, "UNKNOWN");
    assert_eq!(unknown.correct, Some(false));
}

#[test]
fn long_form_run_scores_corpus_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let instances = lf_instances(5);
    let data = write_fixture(dir.path(), &instances);
    let mut config = base_config(&data, &dir.path().join("out"), RunMode::Direct);
    config.kind = TaskKind::LongFormQA;

    let fixtures = fixtures_for_run(&config, &instances, |instance| {
        vec![instance.gold[0].clone()]
    });
    let report = run_eval(&config, &MockBackend::new(fixtures)).unwrap();
    assert_eq!(report.metric.metric.as_str(), "BLEU");
    assert_eq!(report.metric.value, 100.0);
    let metrics = std::fs::read_to_string(config.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "metric,value,count\nBLEU,100.00,5\n");

    // Rescoring long-form records reproduces the corpus metric.
    let records = load_records(&config.out_dir.join("records.jsonl")).unwrap();
    assert_eq!(score_records(&records).unwrap().value, 100.0);
    assert!(records.iter().all(|r| r.correct.is_none()));
}

#[test]
fn self_consistency_with_identical_paths_reduces_to_plain_cot() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(8);
    let data = write_fixture(dir.path(), &instances);
    let answer_for = |instance: &tablecot_core::table::TaskInstance| {
        let idx: usize = instance.id[5..].parse().unwrap();
        if idx.is_multiple_of(3) {
            format!("Therefore, the answer is {}.", instance.gold[0])
        } else {
            "Therefore, the answer is off.".to_string()
        }
    };

    let cot_config = base_config(&data, &dir.path().join("cot"), RunMode::Cot);
    let fixtures = fixtures_for_run(&cot_config, &instances, |i| vec![answer_for(i)]);
    let cot = run_eval(&cot_config, &MockBackend::new(fixtures)).unwrap();

    let sc_config = base_config(&data, &dir.path().join("sc"), RunMode::CotSc);
    let fixtures = fixtures_for_run(&sc_config, &instances, |i| vec![answer_for(i); 5]);
    let sc = run_eval(&sc_config, &MockBackend::new(fixtures)).unwrap();

    assert_eq!(cot.metric.value, sc.metric.value);
    assert_eq!(cot.metric.count, sc.metric.count);
}

#[test]
fn reported_metric_is_recomputable_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let instances = qa_instances(8);
    let data = write_fixture(dir.path(), &instances);
    let config = base_config(&data, &dir.path().join("out"), RunMode::Cot);
    let fixtures = fixtures_for_run(&config, &instances, |instance| {
        let idx: usize = instance.id[5..].parse().unwrap();
        vec![if idx.is_multiple_of(2) {
            format!("Therefore, the answer is {}.", instance.gold[0])
        } else {
            "Therefore, the answer is wrong.".to_string()
        }]
    });
    let backend = MockBackend::new(fixtures);
    let report = run_eval(&config, &backend).unwrap();

    let records = load_records(&config.out_dir.join("records.jsonl")).unwrap();
    let rescored = score_records(&records).unwrap();
    assert_eq!(rescored.value, report.metric.value);
    assert_eq!(rescored.count, report.metric.count);
    for record in &records {
        let parts: Vec<String> = record.voted.split('|').map(str::to_string).collect();
        assert_eq!(
            record.correct,
            Some(tablecot_core::eval::exact_match(&parts, &record.gold))
        );
    }
}
