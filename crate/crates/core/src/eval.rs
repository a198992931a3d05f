//! Answer extraction, self-consistency voting, and scoring.
//!
//! Completions are parsed into canonical answers (or verdicts for claim
//! verification), aggregated by majority vote across sampled reasoning
//! paths, and scored with exact match, binary accuracy, or corpus BLEU
//! depending on the task kind.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::TaskKind;

/// Verdict parsed from a fact-verification completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "SUPPORTS")]
    Supports,
    #[serde(rename = "REFUTES")]
    Refutes,
    #[serde(rename = "UNKNOWN")]
    Unknown,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Supports => "SUPPORTS",
            Verdict::Refutes => "REFUTES",
            Verdict::Unknown => "UNKNOWN",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One completion reduced to the thing that gets voted on and scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub raw: String,
    /// Normalized answer parts; multi-answer predictions are `|`-separated
    /// in the completion and split here. Empty for fact verification.
    pub canonical: Vec<String>,
    /// Set exactly when the task kind is fact verification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

impl ExtractedAnswer {
    /// The string this answer contributes to a majority vote.
    pub fn vote_key(&self) -> String {
        match self.verdict {
            Some(v) => v.as_str().to_string(),
            None => self.canonical.join("|"),
        }
    }
}

const ANSWER_CUE: &str = "the answer is";

/// Parse one completion according to the task kind.
///
/// Short answers are taken from after the last `the answer is` cue (falling
/// back to the last non-empty line), long-form answers are the whole trimmed
/// completion, and verdicts come from whichever yes/no keyword appears first.
/// Unparseable verdicts become [`Verdict::Unknown`] and score as incorrect.
pub fn extract_answer(completion: &str, kind: TaskKind) -> ExtractedAnswer {
    match kind {
        TaskKind::ShortAnswerQA => {
            let span = match find_after_last_cue(completion, ANSWER_CUE) {
                Some(rest) => strip_trailing_punct(rest.trim()),
                None => last_non_empty_line(completion),
            };
            let canonical = split_multi_answer(&span);
            ExtractedAnswer {
                raw: completion.to_string(),
                canonical,
                verdict: None,
            }
        }
        TaskKind::LongFormQA => ExtractedAnswer {
            raw: completion.to_string(),
            canonical: vec![completion.trim().to_string()],
            verdict: None,
        },
        TaskKind::FactVerification => ExtractedAnswer {
            raw: completion.to_string(),
            canonical: Vec::new(),
            verdict: Some(extract_verdict(completion)),
        },
    }
}

// ASCII-case-insensitive search for the last cue occurrence. The cue is pure
// ASCII, so the byte position after a match is always a char boundary.
fn find_after_last_cue<'a>(text: &'a str, cue: &str) -> Option<&'a str> {
    let text_bytes = text.as_bytes();
    let cue_bytes = cue.as_bytes();
    if cue_bytes.is_empty() || text_bytes.len() < cue_bytes.len() {
        return None;
    }
    let mut found = None;
    for i in 0..=(text_bytes.len() - cue_bytes.len()) {
        if text_bytes[i..i + cue_bytes.len()].eq_ignore_ascii_case(cue_bytes) {
            found = Some(i);
        }
    }
    found.map(|i| &text[i + cue.len()..])
}

fn strip_trailing_punct(text: &str) -> String {
    text.trim_end_matches(['.', ',', '!', '?', ';', ':']).trim().to_string()
}

fn last_non_empty_line(text: &str) -> String {
    text.lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("")
        .to_string()
}

fn split_multi_answer(span: &str) -> Vec<String> {
    if span.contains('|') {
        span.split('|').map(normalize_answer).collect()
    } else {
        vec![normalize_answer(span)]
    }
}

const POSITIVE_WORDS: [&str; 3] = ["yes", "true", "supported"];
const NEGATIVE_WORDS: [&str; 3] = ["no", "false", "refuted"];

fn extract_verdict(completion: &str) -> Verdict {
    let lower = completion.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let first_pos = words.iter().position(|w| POSITIVE_WORDS.contains(w));
    let first_neg = words.iter().position(|w| NEGATIVE_WORDS.contains(w));
    match (first_pos, first_neg) {
        (Some(p), Some(n)) if p < n => Verdict::Supports,
        (Some(_), Some(_)) => Verdict::Refutes,
        (Some(_), None) => Verdict::Supports,
        (None, Some(_)) => Verdict::Refutes,
        (None, None) => Verdict::Unknown,
    }
}

/// Canonicalize an answer string for exact-match comparison: lowercase, trim,
/// collapse whitespace, strip wrapping quotes and edge periods/commas, drop
/// thousands separators, and strip leading articles. Runs to a fixed point so
/// the whole thing is idempotent.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.to_lowercase();
    loop {
        let next = normalize_pass(&s);
        if next == s {
            return s;
        }
        s = next;
    }
}

fn normalize_pass(text: &str) -> String {
    let s = text.trim();
    let s = s.trim_matches(|c: char| matches!(c, '"' | '\'' | '.' | ','));
    let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    let s = remove_thousands_separators(&s);
    strip_leading_article(&s)
}

fn remove_thousands_separators(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    for (i, &c) in chars.iter().enumerate() {
        let between_digits = c == ','
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if !between_digits {
            out.push(c);
        }
    }
    out
}

fn strip_leading_article(text: &str) -> String {
    for article in ["a ", "an ", "the "] {
        if let Some(rest) = text.strip_prefix(article) {
            return rest.trim_start().to_string();
        }
    }
    text.to_string()
}

/// Outcome of a majority vote over sampled answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    pub winner: String,
    pub tally: BTreeMap<String, usize>,
    pub total: usize,
}

/// Majority vote over already-normalized answer strings. Ties go to the
/// answer that appeared earliest in the input.
pub fn majority_vote(answers: &[String], n: usize) -> Result<VoteResult> {
    if answers.is_empty() {
        return Err(Error::EmptyInput("majority_vote over zero answers".into()));
    }
    debug_assert_eq!(answers.len(), n);
    let mut tally = BTreeMap::new();
    for a in answers {
        *tally.entry(a.clone()).or_insert(0usize) += 1;
    }
    let best = tally.values().copied().max().unwrap_or(0);
    let winner = answers
        .iter()
        .find(|a| tally[*a] == best)
        .cloned()
        .unwrap_or_default();
    Ok(VoteResult {
        winner,
        tally,
        total: answers.len(),
    })
}

/// Exact match between a prediction and gold answer(s), both normalized.
/// Single gold compares strings; multiple golds compare as sets.
pub fn exact_match(pred: &[String], gold: &[String]) -> bool {
    let norm_pred: Vec<String> = pred.iter().map(|p| normalize_answer(p)).collect();
    let norm_gold: Vec<String> = gold.iter().map(|g| normalize_answer(g)).collect();
    if norm_gold.len() == 1 && norm_pred.len() == 1 {
        return norm_pred[0] == norm_gold[0];
    }
    let pred_set: std::collections::BTreeSet<&String> = norm_pred.iter().collect();
    let gold_set: std::collections::BTreeSet<&String> = norm_gold.iter().collect();
    pred_set == gold_set
}

/// Which metric a summary reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "EM")]
    ExactMatch,
    Accuracy,
    #[serde(rename = "BLEU")]
    Bleu,
}

impl MetricKind {
    pub fn for_task(kind: TaskKind) -> MetricKind {
        match kind {
            TaskKind::ShortAnswerQA => MetricKind::ExactMatch,
            TaskKind::LongFormQA => MetricKind::Bleu,
            TaskKind::FactVerification => MetricKind::Accuracy,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::ExactMatch => "EM",
            MetricKind::Accuracy => "Accuracy",
            MetricKind::Bleu => "BLEU",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A metric value on the 0-100 scale together with how many items produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub metric: MetricKind,
    pub value: f64,
    pub count: usize,
}

/// Fraction of verdicts equal to the gold label, scaled to 0-100.
/// `UNKNOWN` never matches.
pub fn accuracy(records: &[(Verdict, &str)]) -> Result<ScoreSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("accuracy over zero records".into()));
    }
    let correct = records
        .iter()
        .filter(|(v, gold)| v.as_str() == *gold)
        .count();
    Ok(ScoreSummary {
        metric: MetricKind::Accuracy,
        value: 100.0 * correct as f64 / records.len() as f64,
        count: records.len(),
    })
}

/// Corpus-level BLEU-4 with a simplified 13a-style tokenizer (case kept,
/// punctuation split off, whitespace-delimited) and no smoothing: a zero
/// n-gram precision zeroes the score. Orders with no candidate n-grams
/// anywhere in the corpus drop out of the geometric mean, so identity on
/// very short corpora still scores 100. Scale 0-100.
pub fn corpus_bleu(hypotheses: &[String], references: &[String]) -> Result<ScoreSummary> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::EmptyInput(format!(
            "corpus_bleu needs equal non-empty lists, got {} hypotheses and {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut match_counts = [0usize; 4];
    let mut total_counts = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp_tokens = bleu_tokenize(hyp);
        let ref_tokens = bleu_tokenize(reference);
        hyp_len += hyp_tokens.len();
        ref_len += ref_tokens.len();
        for (n, (matches, total)) in match_counts.iter_mut().zip(&mut total_counts).enumerate() {
            let order = n + 1;
            let hyp_ngrams = count_ngrams(&hyp_tokens, order);
            let ref_ngrams = count_ngrams(&ref_tokens, order);
            for (gram, count) in &hyp_ngrams {
                let clipped = (*count).min(ref_ngrams.get(gram).copied().unwrap_or(0));
                *matches += clipped;
                *total += count;
            }
        }
    }

    let value = bleu_from_stats(&match_counts, &total_counts, hyp_len, ref_len);
    Ok(ScoreSummary {
        metric: MetricKind::Bleu,
        value,
        count: hypotheses.len(),
    })
}

fn bleu_from_stats(
    match_counts: &[usize; 4],
    total_counts: &[usize; 4],
    hyp_len: usize,
    ref_len: usize,
) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..4 {
        if total_counts[n] == 0 {
            continue;
        }
        if match_counts[n] == 0 {
            return 0.0;
        }
        log_sum += (match_counts[n] as f64 / total_counts[n] as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0);
    100.0 * bp * (log_sum / orders as f64).exp()
}

/// Split text into BLEU tokens: runs of alphanumerics (plus non-ASCII) stay
/// together, every other visible character becomes its own token.
pub fn bleu_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn count_ngrams(tokens: &[String], order: usize) -> BTreeMap<Vec<String>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() < order {
        return counts;
    }
    for window in tokens.windows(order) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    counts
}
