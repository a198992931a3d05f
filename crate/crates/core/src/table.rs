//! Canonical in-memory representation of tables and task instances.
//!
//! Everything downstream (linearization, prompting, scoring) assumes the
//! invariants checked by [`validate_table`]: a non-empty header, rectangular
//! rows, and cells free of control characters. Ragged-row repair and cell
//! cleanup happen at ingestion (see the dataset module); this module only
//! detects violations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A web-style table: optional title, one header row, and string cells.
///
/// Cells are plain text on purpose. Numbers and dates stay strings; all
/// interpretation is delegated to the model reading the linearized table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>, rows: Vec<Vec<String>>) -> Self {
        Table {
            title: None,
            header,
            rows,
        }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }
}

/// Which family of task an instance belongs to, which fixes its metric:
/// exact match for short answers, corpus BLEU for long-form answers, and
/// binary accuracy for claim verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    ShortAnswerQA,
    LongFormQA,
    FactVerification,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::ShortAnswerQA => "ShortAnswerQA",
            TaskKind::LongFormQA => "LongFormQA",
            TaskKind::FactVerification => "FactVerification",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ShortAnswerQA" | "short-answer-qa" | "short-qa" => Ok(TaskKind::ShortAnswerQA),
            "LongFormQA" | "long-form-qa" | "long-qa" => Ok(TaskKind::LongFormQA),
            "FactVerification" | "fact-verification" | "fact" => Ok(TaskKind::FactVerification),
            other => Err(Error::Config(format!("unknown task kind: {other}"))),
        }
    }
}

/// One dataset item: a table, a query against it, and the gold answer(s).
///
/// For `FactVerification` the gold is exactly one of `SUPPORTS` / `REFUTES`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub dataset: String,
    pub kind: TaskKind,
    pub table: Table,
    pub query: String,
    pub gold: Vec<String>,
}

/// Violation descriptions; an empty report means the table is valid.
pub type ValidationReport = Vec<String>;

/// Check every structural invariant and return all violations found.
///
/// Pure: never mutates its input, and equal inputs yield equal reports.
pub fn validate_table(table: &Table) -> ValidationReport {
    let mut report = Vec::new();
    if table.header.is_empty() {
        report.push("empty header".to_string());
    }
    let width = table.header.len();
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != width {
            report.push(format!("row {i} width {} ≠ header width {width}", row.len()));
        }
    }
    if let Some(title) = &table.title {
        if has_control_chars(title) {
            report.push("title contains control characters".to_string());
        }
    }
    for (c, cell) in table.header.iter().enumerate() {
        if has_control_chars(cell) {
            report.push(format!("header cell {c} contains control characters"));
        }
    }
    for (r, row) in table.rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if has_control_chars(cell) {
                report.push(format!("cell ({r},{c}) contains control characters"));
            }
        }
    }
    report
}

fn has_control_chars(text: &str) -> bool {
    text.chars().any(|ch| ch.is_control())
}

/// Row and column counts of a valid table. The header is not counted as a row.
pub fn table_dims(table: &Table) -> Result<(usize, usize)> {
    let report = validate_table(table);
    if !report.is_empty() {
        return Err(Error::InvalidTable(report));
    }
    Ok((table.rows.len(), table.header.len()))
}
