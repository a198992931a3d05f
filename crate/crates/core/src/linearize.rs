//! Table-to-text rendering under truncation limits and a token budget.
//!
//! Large tables are cut down before prompting: keep the first rows and
//! columns, clip each cell to its first words, then drop trailing rows until
//! the estimated token count fits the budget. Earlier rows always win over
//! later ones.

use serde::{Deserialize, Serialize};

use crate::table::Table;

/// Caps applied before a table is rendered into a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationLimits {
    pub max_rows: usize,
    pub max_cols: usize,
    pub max_words_per_cell: usize,
    pub token_budget: usize,
}

impl Default for TruncationLimits {
    fn default() -> Self {
        TruncationLimits {
            max_rows: 22,
            max_cols: 8,
            max_words_per_cell: 10,
            token_budget: 2000,
        }
    }
}

/// Which truncation steps actually changed something.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TruncationFlags {
    pub rows_clipped: bool,
    pub cols_clipped: bool,
    pub cells_clipped: bool,
    /// Rows beyond the structural cap were dropped to meet the token budget.
    pub budget_rows_dropped: bool,
    /// Even a single row exceeded the budget; the text is best effort.
    pub over_budget: bool,
}

impl TruncationFlags {
    pub fn any(&self) -> bool {
        self.rows_clipped
            || self.cols_clipped
            || self.cells_clipped
            || self.budget_rows_dropped
            || self.over_budget
    }
}

/// A table rendered to prompt text, with the bookkeeping needed for
/// table-size analyses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearTable {
    pub text: String,
    pub kept_rows: usize,
    pub kept_cols: usize,
    pub estimated_tokens: usize,
    pub flags: TruncationFlags,
}

/// Keep the first `max_rows` rows and `max_cols` columns (header included),
/// and clip every cell to its first `max_words_per_cell` whitespace-delimited
/// words. Idempotent.
pub fn truncate_table(table: &Table, limits: &TruncationLimits) -> Table {
    let header: Vec<String> = table
        .header
        .iter()
        .take(limits.max_cols)
        .map(|c| clip_words(c, limits.max_words_per_cell))
        .collect();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .take(limits.max_rows)
        .map(|row| {
            row.iter()
                .take(limits.max_cols)
                .map(|c| clip_words(c, limits.max_words_per_cell))
                .collect()
        })
        .collect();
    Table {
        title: table.title.clone(),
        header,
        rows,
    }
}

fn clip_words(cell: &str, max_words: usize) -> String {
    let words: Vec<&str> = cell.split_whitespace().collect();
    if words.len() <= max_words {
        cell.to_string()
    } else {
        words[..max_words].join(" ")
    }
}

/// Cheap token estimate: `ceil(words * 4 / 3)` over whitespace-delimited
/// words. Monotone in word count; an exact BPE counter can be swapped in via
/// [`TokenEstimator`].
pub fn estimate_tokens(text: &str) -> usize {
    WordRatioEstimator.estimate(text)
}

/// Pluggable token counter used by budget fitting.
pub trait TokenEstimator {
    fn estimate(&self, text: &str) -> usize;
}

/// Default estimator: four tokens for every three whitespace-delimited words,
/// rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordRatioEstimator;

impl TokenEstimator for WordRatioEstimator {
    fn estimate(&self, text: &str) -> usize {
        let words = text.split_whitespace().count();
        (words * 4).div_ceil(3)
    }
}

/// Render a table as pipe-separated lines: an optional `Title:` line, the
/// header, then one line per row. Pipes inside cells become `/` so the
/// rendering stays unambiguous.
pub fn linearize(table: &Table) -> String {
    let mut lines = Vec::with_capacity(table.rows.len() + 2);
    if let Some(title) = &table.title {
        lines.push(format!("Title: {}", escape_pipes(title)));
    }
    lines.push(join_cells(&table.header));
    for row in &table.rows {
        lines.push(join_cells(row));
    }
    lines.join("\n")
}

fn join_cells(cells: &[String]) -> String {
    cells
        .iter()
        .map(|c| escape_pipes(c))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn escape_pipes(text: &str) -> String {
    if text.contains('|') {
        text.replace('|', "/")
    } else {
        text.to_string()
    }
}

/// Truncate, linearize, then drop trailing rows one at a time until the
/// estimate fits the budget. A table whose single remaining row still blows
/// the budget is returned as-is with `over_budget` set.
pub fn fit_to_budget(table: &Table, limits: &TruncationLimits) -> LinearTable {
    fit_to_budget_with(table, limits, &WordRatioEstimator)
}

pub fn fit_to_budget_with(
    table: &Table,
    limits: &TruncationLimits,
    estimator: &dyn TokenEstimator,
) -> LinearTable {
    let mut truncated = truncate_table(table, limits);
    let mut flags = TruncationFlags {
        rows_clipped: table.rows.len() > truncated.rows.len(),
        cols_clipped: table.header.len() > truncated.header.len()
            || table.rows.iter().any(|r| r.len() > limits.max_cols),
        cells_clipped: clipped_any_cell(table, &truncated),
        ..TruncationFlags::default()
    };

    let mut text = linearize(&truncated);
    let mut estimate = estimator.estimate(&text);
    while estimate > limits.token_budget && truncated.rows.len() > 1 {
        truncated.rows.pop();
        flags.budget_rows_dropped = true;
        text = linearize(&truncated);
        estimate = estimator.estimate(&text);
    }
    if estimate > limits.token_budget {
        flags.over_budget = true;
    }

    LinearTable {
        kept_rows: truncated.rows.len(),
        kept_cols: truncated.header.len(),
        estimated_tokens: estimate,
        text,
        flags,
    }
}

fn clipped_any_cell(original: &Table, truncated: &Table) -> bool {
    let header_changed = original
        .header
        .iter()
        .zip(&truncated.header)
        .any(|(a, b)| a != b);
    let rows_changed = original
        .rows
        .iter()
        .zip(&truncated.rows)
        .any(|(orig, trunc)| orig.iter().zip(trunc).any(|(a, b)| a != b));
    header_changed || rows_changed
}
