//! Dataset ingestion: a canonical JSONL schema plus per-dataset adapters.
//!
//! Four upstream formats feed one pipeline, so every adapter converts to
//! [`CanonicalRecord`] and all downstream code only ever sees
//! [`TaskInstance`]s. Ragged rows are repaired here (right-padded with `""`
//! or truncated to header width) and cell text is cleaned of control
//! characters, so everything a loader yields passes table validation.
//!
//! Input formats accepted by each adapter are documented in
//! `docs/datasets.md` at the repository root.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{validate_table, Table, TaskInstance, TaskKind};

/// One line of the canonical JSONL interchange format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    pub id: String,
    pub dataset: String,
    pub kind: TaskKind,
    pub table: Table,
    pub query: String,
    pub gold: Vec<String>,
}

impl CanonicalRecord {
    /// Repair and validate into a [`TaskInstance`]. Ragged rows are padded or
    /// truncated to header width; cell text is cleaned of control characters.
    pub fn into_instance(self) -> Result<TaskInstance> {
        let (table, repaired) = repair_table(self.table);
        if repaired {
            log::warn!("record {}: repaired ragged or dirty table", self.id);
        }
        let report = validate_table(&table);
        if !report.is_empty() {
            return Err(Error::InvalidTable(report));
        }
        if self.gold.is_empty() {
            return Err(Error::Schema(format!("record {}: empty gold", self.id)));
        }
        if self.kind == TaskKind::FactVerification
            && (self.gold.len() != 1 || !matches!(self.gold[0].as_str(), "SUPPORTS" | "REFUTES"))
        {
            return Err(Error::Schema(format!(
                "record {}: fact-verification gold must be exactly SUPPORTS or REFUTES",
                self.id
            )));
        }
        Ok(TaskInstance {
            id: self.id,
            dataset: self.dataset,
            kind: self.kind,
            table,
            query: clean_text(&self.query),
            gold: self.gold,
        })
    }
}

impl From<TaskInstance> for CanonicalRecord {
    fn from(instance: TaskInstance) -> Self {
        CanonicalRecord {
            id: instance.id,
            dataset: instance.dataset,
            kind: instance.kind,
            table: instance.table,
            query: instance.query,
            gold: instance.gold,
        }
    }
}

/// Replace tabs/newlines with single spaces and drop other control
/// characters, keeping the pipe/newline linearization unambiguous.
pub fn clean_text(text: &str) -> String {
    text.chars()
        .filter_map(|c| {
            if matches!(c, '\t' | '\n' | '\r') {
                Some(' ')
            } else if c.is_control() {
                None
            } else {
                Some(c)
            }
        })
        .collect()
}

fn repair_table(table: Table) -> (Table, bool) {
    let width = table.header.len();
    let mut repaired = false;
    let title = table.title.map(|t| {
        let cleaned = clean_text(&t);
        repaired |= cleaned != t;
        cleaned
    });
    let header: Vec<String> = table
        .header
        .into_iter()
        .map(|c| {
            let cleaned = clean_text(&c);
            repaired |= cleaned != c;
            cleaned
        })
        .collect();
    let rows: Vec<Vec<String>> = table
        .rows
        .into_iter()
        .map(|mut row| {
            if row.len() != width {
                repaired = true;
                row.resize(width, String::new());
            }
            row.into_iter()
                .map(|c| {
                    let cleaned = clean_text(&c);
                    repaired |= cleaned != c;
                    cleaned
                })
                .collect()
        })
        .collect();
    (
        Table {
            title,
            header,
            rows,
        },
        repaired,
    )
}

/// Streaming reader over canonical JSONL; yields one instance per line.
pub struct CanonicalReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl CanonicalReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(CanonicalReader {
            path,
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for CanonicalReader {
    type Item = Result<TaskInstance>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: CanonicalRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        path: self.path.clone(),
                        line: self.line_no,
                        message: e.to_string(),
                    }))
                }
            };
            return Some(record.into_instance().map_err(|e| match e {
                Error::Schema(msg) => Error::Parse {
                    path: self.path.clone(),
                    line: self.line_no,
                    message: msg,
                },
                other => other,
            }));
        }
    }
}

/// Load every instance from a canonical JSONL file, in file order.
pub fn load_canonical(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    CanonicalReader::open(path)?.collect()
}

/// Write records as canonical JSONL, one object per line.
pub fn write_canonical(records: &[CanonicalRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Schema(format!("encode record {}: {e}", record.id)))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Upstream source formats this crate can adapt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    WikitqTsv,
    FetaqaJsonl,
    TabfactJson,
    FeverousJsonl,
}

impl SourceFormat {
    pub fn id(&self) -> &'static str {
        match self {
            SourceFormat::WikitqTsv => "wikitq-tsv",
            SourceFormat::FetaqaJsonl => "fetaqa-jsonl",
            SourceFormat::TabfactJson => "tabfact-json",
            SourceFormat::FeverousJsonl => "feverous-jsonl",
        }
    }
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wikitq-tsv" => Ok(SourceFormat::WikitqTsv),
            "fetaqa-jsonl" => Ok(SourceFormat::FetaqaJsonl),
            "tabfact-json" => Ok(SourceFormat::TabfactJson),
            "feverous-jsonl" => Ok(SourceFormat::FeverousJsonl),
            other => Err(Error::Config(format!("unknown source format: {other}"))),
        }
    }
}

/// Convert an upstream dataset file into canonical records.
pub fn adapt_source(path: impl AsRef<Path>, format: SourceFormat) -> Result<Vec<CanonicalRecord>> {
    let path = path.as_ref();
    match format {
        SourceFormat::WikitqTsv => adapt_wikitq(path),
        SourceFormat::FetaqaJsonl => adapt_fetaqa(path),
        SourceFormat::TabfactJson => adapt_tabfact(path),
        SourceFormat::FeverousJsonl => adapt_feverous(path),
    }
}

// ---------------------------------------------------------------------------
// WikiTableQuestions

fn adapt_wikitq(path: &Path) -> Result<Vec<CanonicalRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .clone();
    let expect = ["id", "utterance", "context", "targetValue"];
    for (i, name) in expect.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(Error::Schema(format!(
                "{}: expected column {i} to be `{name}`, found `{}`",
                path.display(),
                headers.get(i).unwrap_or("<missing>")
            )));
        }
    }
    let mut records = Vec::new();
    for (row_no, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let field = |i: usize, name: &str| -> Result<String> {
            row.get(i).map(|s| s.to_string()).ok_or_else(|| {
                Error::Schema(format!(
                    "{} row {}: missing field `{name}`",
                    path.display(),
                    row_no + 1
                ))
            })
        };
        let id = field(0, "id")?;
        let question = field(1, "utterance")?;
        let context = field(2, "context")?;
        let target = field(3, "targetValue")?;
        let table = load_wikitq_table(path, &context)?;
        records.push(make_record(
            id,
            "wikitq",
            TaskKind::ShortAnswerQA,
            table,
            question,
            target.split('|').map(|s| s.trim().to_string()).collect(),
        ));
    }
    Ok(records)
}

// Table paths in the examples file are relative to the dataset root. The
// examples file itself usually lives in a `data/` subdirectory, so try the
// file's own directory first and fall back to its parent.
fn load_wikitq_table(examples_path: &Path, context: &str) -> Result<Table> {
    let parent = examples_path.parent().unwrap_or(Path::new("."));
    let mut candidates = vec![parent.join(context)];
    if let Some(grandparent) = parent.parent() {
        candidates.push(grandparent.join(context));
    }
    let table_path = candidates
        .iter()
        .find(|p| p.exists())
        .cloned()
        .ok_or_else(|| {
            Error::Schema(format!(
                "table file `{context}` not found near {}",
                examples_path.display()
            ))
        })?;
    read_delimited_table(&table_path, b',')
}

fn read_delimited_table(path: &Path, delimiter: u8) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        rows.push(row.iter().map(clean_text).collect());
    }
    if rows.is_empty() {
        return Err(Error::Schema(format!("{}: empty table file", path.display())));
    }
    let header = rows.remove(0);
    let (table, _) = repair_table(Table::new(header, rows));
    Ok(table)
}

// ---------------------------------------------------------------------------
// FetaQA

#[derive(Deserialize)]
struct FetaqaLine {
    feta_id: serde_json::Value,
    #[serde(default)]
    table_page_title: Option<String>,
    #[serde(default)]
    table_section_title: Option<String>,
    table_array: Vec<Vec<String>>,
    question: String,
    answer: String,
}

fn adapt_fetaqa(path: &Path) -> Result<Vec<CanonicalRecord>> {
    let mut records = Vec::new();
    for (line_no, line) in read_lines(path)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FetaqaLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message: first_offending_field(&e),
        })?;
        if parsed.table_array.is_empty() {
            return Err(Error::Schema(format!(
                "{} line {}: empty table_array",
                path.display(),
                line_no + 1
            )));
        }
        let mut rows = parsed.table_array;
        let header: Vec<String> = rows.remove(0).iter().map(|c| clean_text(c)).collect();
        let rows: Vec<Vec<String>> = rows
            .into_iter()
            .map(|r| r.iter().map(|c| clean_text(c)).collect())
            .collect();
        let title = match (parsed.table_page_title, parsed.table_section_title) {
            (Some(p), Some(s)) if !p.is_empty() && !s.is_empty() => Some(format!("{p} - {s}")),
            (Some(p), _) if !p.is_empty() => Some(p),
            (_, Some(s)) if !s.is_empty() => Some(s),
            _ => None,
        };
        let mut table = Table::new(header, rows);
        table.title = title.map(|t| clean_text(&t));
        records.push(make_record(
            json_id(&parsed.feta_id),
            "fetaqa",
            TaskKind::LongFormQA,
            table,
            parsed.question,
            vec![parsed.answer],
        ));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// TabFact

type TabfactEntry = (Vec<String>, Vec<u8>, String);

fn adapt_tabfact(path: &Path) -> Result<Vec<CanonicalRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    // serde_json objects deserialize into a sorted map, so iteration order
    // (and therefore record order) is deterministic.
    let entries: std::collections::BTreeMap<String, TabfactEntry> =
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Schema(format!("{}: {}", path.display(), first_offending_field(&e))))?;
    let parent = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (table_id, (statements, labels, caption)) in entries {
        if statements.len() != labels.len() {
            return Err(Error::Schema(format!(
                "{table_id}: {} statements but {} labels",
                statements.len(),
                labels.len()
            )));
        }
        let table_path = [parent.join("all_csv").join(&table_id), parent.join(&table_id)]
            .into_iter()
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::Schema(format!("table file `{table_id}` not found under {}", parent.display()))
            })?;
        let mut table = read_delimited_table(&table_path, b'#')?;
        if !caption.is_empty() {
            table.title = Some(clean_text(&caption));
        }
        for (i, (statement, label)) in statements.iter().zip(&labels).enumerate() {
            let gold = match label {
                1 => "SUPPORTS",
                0 => "REFUTES",
                other => {
                    return Err(Error::Schema(format!(
                        "{table_id} statement {i}: label must be 0 or 1, found {other}"
                    )))
                }
            };
            records.push(make_record(
                format!("{table_id}-{i}"),
                "tabfact",
                TaskKind::FactVerification,
                table.clone(),
                statement.clone(),
                vec![gold.to_string()],
            ));
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// FEVEROUS

/// A FEVEROUS claim before table-evidence filtering, with its evidence
/// element ids preserved so the filter can classify them.
#[derive(Debug, Clone, Deserialize)]
pub struct FeverousClaim {
    pub id: serde_json::Value,
    pub claim: String,
    pub label: String,
    pub evidence: Vec<String>,
    pub tables: Vec<Table>,
}

/// Default evidence classifier: FEVEROUS element ids embed their type, and
/// table-cell elements carry a `_cell_` segment (plain and header cells).
pub fn is_table_cell_element(element_id: &str) -> bool {
    element_id.contains("_cell_")
}

/// Keep exactly the claims whose evidence consists entirely of elements the
/// predicate accepts. A claim without evidence metadata is an error.
pub fn filter_table_supported<P>(claims: Vec<FeverousClaim>, predicate: P) -> Result<Vec<FeverousClaim>>
where
    P: Fn(&str) -> bool,
{
    let mut kept = Vec::new();
    for claim in claims {
        if claim.evidence.is_empty() {
            return Err(Error::Schema(format!(
                "claim {}: missing evidence metadata",
                json_id(&claim.id)
            )));
        }
        if claim.evidence.iter().all(|e| predicate(e)) {
            kept.push(claim);
        }
    }
    Ok(kept)
}

/// Parse a FEVEROUS JSONL file without filtering; `NOT ENOUGH INFO` claims
/// are dropped here (with a logged count) because the task is binary.
pub fn parse_feverous(path: &Path) -> Result<Vec<FeverousClaim>> {
    let mut claims = Vec::new();
    let mut skipped_nei = 0usize;
    for (line_no, line) in read_lines(path)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let claim: FeverousClaim = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message: first_offending_field(&e),
        })?;
        match claim.label.as_str() {
            "SUPPORTS" | "REFUTES" => claims.push(claim),
            "NOT ENOUGH INFO" => skipped_nei += 1,
            other => {
                return Err(Error::Schema(format!(
                    "{} line {}: unknown label `{other}`",
                    path.display(),
                    line_no + 1
                )))
            }
        }
    }
    if skipped_nei > 0 {
        log::info!("feverous: skipped {skipped_nei} NOT ENOUGH INFO claims");
    }
    Ok(claims)
}

fn adapt_feverous(path: &Path) -> Result<Vec<CanonicalRecord>> {
    let claims = parse_feverous(path)?;
    let table_supported = filter_table_supported(claims, is_table_cell_element)?;
    let mut records = Vec::new();
    for claim in table_supported {
        if claim.tables.is_empty() {
            return Err(Error::Schema(format!(
                "claim {}: table-supported claim carries no tables",
                json_id(&claim.id)
            )));
        }
        let table = flatten_evidence_tables(&claim.tables);
        records.push(make_record(
            json_id(&claim.id),
            "feverous",
            TaskKind::FactVerification,
            table,
            claim.claim,
            vec![claim.label],
        ));
    }
    Ok(records)
}

/// Concatenate evidence tables vertically under the first table's header.
/// Tables are separated by a row of `---` cells; later tables' headers become
/// ordinary rows. Everything is padded or cut to the first header's width.
pub fn flatten_evidence_tables(tables: &[Table]) -> Table {
    let first = &tables[0];
    let width = first.header.len().max(1);
    let header = if first.header.is_empty() {
        vec![String::new()]
    } else {
        first.header.clone()
    };
    let fit = |row: &[String]| -> Vec<String> {
        let mut row: Vec<String> = row.to_vec();
        row.resize(width, String::new());
        row
    };
    let mut rows: Vec<Vec<String>> = first.rows.iter().map(|r| fit(r)).collect();
    for table in &tables[1..] {
        rows.push(vec!["---".to_string(); width]);
        rows.push(fit(&table.header));
        rows.extend(table.rows.iter().map(|r| fit(r)));
    }
    Table {
        title: first.title.clone(),
        header,
        rows,
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// How many instances to keep and under which seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub n: usize,
    pub seed: u64,
}

/// Uniform sample without replacement, deterministic for a fixed seed.
/// The output preserves the original relative order.
pub fn sample_subset(instances: &[TaskInstance], spec: &SamplingSpec) -> Result<Vec<TaskInstance>> {
    if spec.n > instances.len() {
        return Err(Error::Sampling(format!(
            "requested {} of {} instances",
            spec.n,
            instances.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices: Vec<usize> = (0..instances.len()).collect();
    // Partial Fisher-Yates: the first n slots end up uniformly chosen.
    for i in 0..spec.n {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..spec.n].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| instances[i].clone()).collect())
}

// ---------------------------------------------------------------------------

fn make_record(
    id: String,
    dataset: &str,
    kind: TaskKind,
    table: Table,
    query: String,
    gold: Vec<String>,
) -> CanonicalRecord {
    let (table, _) = repair_table(table);
    CanonicalRecord {
        id,
        dataset: dataset.to_string(),
        kind,
        table,
        query: clean_text(&query),
        gold,
    }
}

fn json_id(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

// serde_json errors lead with the offending field for missing/unknown keys;
// keep that first clause so schema errors name the field.
fn first_offending_field(err: &serde_json::Error) -> String {
    err.to_string()
}
