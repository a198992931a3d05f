//! k-shot prompt assembly in Direct or chain-of-thought form.
//!
//! A prompt is one instruction line, then blank-line-separated blocks: each
//! demonstration renders its budget-fitted table, a query line, and an answer
//! line; the test block has the same shape but stops at the bare answer cue.
//! Everything is deterministic, so identical inputs give byte-identical
//! prompts and cacheable requests.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::dataset::CanonicalRecord;
use crate::error::{Error, Result};
use crate::linearize::{estimate_tokens, fit_to_budget, TruncationLimits};
use crate::table::{Table, TaskInstance, TaskKind};

/// Prompting style: answer directly, or reason first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptMode {
    Direct,
    CoT,
}

/// One worked example prepended to the test prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub table: Table,
    pub query: String,
    pub rationale: Option<String>,
    pub answer: String,
    pub kind: TaskKind,
}

/// A fully assembled prompt plus the knobs that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub text: String,
    pub mode: PromptMode,
    pub shots: usize,
    pub instance_id: String,
    pub estimated_tokens: usize,
}

/// Instruction lines, one per task kind. These are pinned constants of the
/// harness (golden-file tests keep them stable across runs).
pub const INSTRUCTION_SHORT_QA: &str = "Read the table and answer the question.";
pub const INSTRUCTION_LONG_QA: &str =
    "Read the table and answer the question with a complete sentence.";
pub const INSTRUCTION_FACT: &str =
    "Read the table and determine whether the statement is supported. Answer yes or no.";

/// The cue every prompt ends with; completions are expected to continue it.
pub const ANSWER_CUE: &str = "Answer:";

fn instruction_for(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::ShortAnswerQA => INSTRUCTION_SHORT_QA,
        TaskKind::LongFormQA => INSTRUCTION_LONG_QA,
        TaskKind::FactVerification => INSTRUCTION_FACT,
    }
}

fn query_line(kind: TaskKind, query: &str) -> String {
    match kind {
        TaskKind::ShortAnswerQA | TaskKind::LongFormQA => format!("Question: {query}"),
        TaskKind::FactVerification => {
            let claim = query.trim().trim_end_matches('.');
            format!("Statement: {claim}. Is the statement supported by the table? Answer yes or no.")
        }
    }
}

// Verification demos answer yes/no in prompt text; verdict labels are mapped
// back to SUPPORTS/REFUTES at extraction time.
fn prompt_answer(kind: TaskKind, answer: &str) -> String {
    if kind == TaskKind::FactVerification {
        match answer.trim().to_lowercase().as_str() {
            "supports" | "yes" => "yes".to_string(),
            "refutes" | "no" => "no".to_string(),
            other => other.to_string(),
        }
    } else {
        answer.trim().to_string()
    }
}

/// Assemble the full prompt for one instance.
///
/// Demonstrations must share the instance's task kind, and chain-of-thought
/// mode requires every demo to carry a rationale. Demo tables go through the
/// same truncation and budget fitting as the test table so token accounting
/// is uniform.
pub fn build_prompt(
    instance: &TaskInstance,
    demos: &[Demonstration],
    mode: PromptMode,
    limits: &TruncationLimits,
) -> Result<PromptSpec> {
    for demo in demos {
        if demo.kind != instance.kind {
            return Err(Error::Prompt(format!(
                "demonstration kind {} does not match instance kind {}",
                demo.kind, instance.kind
            )));
        }
        if mode == PromptMode::CoT && demo.rationale.is_none() {
            return Err(Error::Prompt(
                "chain-of-thought mode requires a rationale on every demonstration".into(),
            ));
        }
    }

    let mut blocks = Vec::with_capacity(demos.len() + 2);
    blocks.push(instruction_for(instance.kind).to_string());
    for demo in demos {
        let table_text = fit_to_budget(&demo.table, limits).text;
        let answer = prompt_answer(demo.kind, &demo.answer);
        let answer_line = match mode {
            PromptMode::Direct => format!("{ANSWER_CUE} {answer}"),
            PromptMode::CoT => {
                let rationale = demo
                    .rationale
                    .as_deref()
                    .expect("checked above")
                    .trim();
                format!("{ANSWER_CUE} {rationale} Therefore, the answer is {answer}.")
            }
        };
        blocks.push(format!(
            "{table_text}\n{}\n{answer_line}",
            query_line(demo.kind, &demo.query)
        ));
    }
    let test_table = fit_to_budget(&instance.table, limits).text;
    blocks.push(format!(
        "{test_table}\n{}\n{ANSWER_CUE}",
        query_line(instance.kind, &instance.query)
    ));

    let text = blocks.join("\n\n");
    let estimated_tokens = estimate_tokens(&text);
    Ok(PromptSpec {
        text,
        mode,
        shots: demos.len(),
        instance_id: instance.id.clone(),
        estimated_tokens,
    })
}

pub fn prompt_token_estimate(spec: &PromptSpec) -> usize {
    estimate_tokens(&spec.text)
}

#[derive(Deserialize)]
struct DemoRecord {
    #[serde(flatten)]
    record: CanonicalRecord,
    rationale: String,
}

const DEMO_FIXTURES: &str = include_str!("../fixtures/demos.jsonl");

fn demo_pool() -> &'static Vec<Demonstration> {
    static POOL: OnceLock<Vec<Demonstration>> = OnceLock::new();
    POOL.get_or_init(|| {
        DEMO_FIXTURES
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let demo: DemoRecord =
                    serde_json::from_str(line).expect("shipped demo fixtures must parse");
                let answer = prompt_answer(demo.record.kind, &demo.record.gold[0]);
                Demonstration {
                    kind: demo.record.kind,
                    table: demo.record.table,
                    query: demo.record.query,
                    rationale: Some(demo.rationale),
                    answer,
                }
            })
            .collect()
    })
}

/// First `k` shipped demonstrations for a task kind, stable across runs.
pub fn default_demos(kind: TaskKind, k: usize) -> Result<Vec<Demonstration>> {
    let pool: Vec<&Demonstration> = demo_pool().iter().filter(|d| d.kind == kind).collect();
    if k > pool.len() {
        return Err(Error::Prompt(format!(
            "requested {k} demonstrations for {kind} but only {} are shipped",
            pool.len()
        )));
    }
    Ok(pool.into_iter().take(k).cloned().collect())
}
