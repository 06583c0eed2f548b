//! Core table, QA and auxiliary-dataset types, with validating loaders.
//!
//! Every loader trims keys and values, unwraps list values that arrive as
//! bracketed strings (`"['a | b']"`), and rejects records that break an
//! invariant with an error naming the invariant and the offending record.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::TaxonomyLabel;

/// Delimiter placed between the values of a multi-valued cell.
pub const VALUE_DELIMITER: &str = " | ";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path} (line {line}, column {column}): {message}")]
    Format {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invariant violated ({invariant}) in record {record}")]
    Invariant { invariant: String, record: String },
    #[error("example {example} references unknown table {table_id}")]
    DanglingReference { example: String, table_id: String },
}

impl LoadError {
    pub(crate) fn invariant(invariant: impl Into<String>, record: impl Into<String>) -> Self {
        LoadError::Invariant {
            invariant: invariant.into(),
            record: record.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub key: String,
    pub values: Vec<String>,
}

impl Row {
    pub fn new(key: impl Into<String>, values: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Row {
            key: key.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    /// Values joined with the cell delimiter, unescaped.
    pub fn joined(&self) -> String {
        self.values.join(VALUE_DELIMITER)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub header: Option<String>,
    pub rows: Vec<Row>,
}

/// A titled, sectioned key/value table; the unit of context for every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoboxTable {
    pub source_id: String,
    pub title: String,
    pub sections: Vec<Section>,
}

impl InfoboxTable {
    pub fn row_count(&self) -> usize {
        self.sections.iter().map(|s| s.rows.len()).sum()
    }

    /// All rows with their `(section_index, row_index)` coordinates.
    pub fn rows(&self) -> impl Iterator<Item = ((usize, usize), &Row)> {
        self.sections
            .iter()
            .enumerate()
            .flat_map(|(s, sec)| sec.rows.iter().enumerate().map(move |(r, row)| ((s, r), row)))
    }

    /// True when some row key equals `key`, ignoring case and surrounding whitespace.
    pub fn has_key(&self, key: &str) -> bool {
        self.rows().any(|(_, row)| keys_match(&row.key, key))
    }

    /// Checks every structural invariant, returning the first violation.
    pub fn validate(&self) -> Result<(), LoadError> {
        let record = &self.source_id;
        if self.title.trim().is_empty() {
            return Err(LoadError::invariant("title non-empty", record));
        }
        if has_control(&self.title) {
            return Err(LoadError::invariant("title has no tab or newline", record));
        }
        if self.row_count() == 0 {
            return Err(LoadError::invariant("at least one row", record));
        }
        for (i, section) in self.sections.iter().enumerate() {
            if section.rows.is_empty() {
                return Err(LoadError::invariant(
                    format!("section {i} rows non-empty"),
                    record,
                ));
            }
            if let Some(header) = &section.header {
                if header.trim().is_empty() || has_control(header) {
                    return Err(LoadError::invariant(
                        format!("section {i} header is a non-empty single line"),
                        record,
                    ));
                }
            }
            for row in &section.rows {
                if row.key.trim().is_empty() {
                    return Err(LoadError::invariant("row key non-empty", record));
                }
                if has_control(&row.key) {
                    return Err(LoadError::invariant("row key has no tab or newline", record));
                }
                if row.values.is_empty() {
                    return Err(LoadError::invariant(
                        format!("row {:?} values non-empty", row.key),
                        record,
                    ));
                }
                for v in &row.values {
                    if v.trim().is_empty() {
                        return Err(LoadError::invariant(
                            format!("row {:?} has no empty value", row.key),
                            record,
                        ));
                    }
                    if has_control(v) {
                        return Err(LoadError::invariant(
                            format!("row {:?} value has no tab or newline", row.key),
                            record,
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn has_control(s: &str) -> bool {
    s.contains(['\t', '\n', '\r'])
}

/// Case-insensitive, whitespace-trimmed key comparison.
pub fn keys_match(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub table_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub evidence_keys: Vec<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<TaxonomyLabel>,
}

/// Tables addressable by `source_id`, preserving file order.
#[derive(Debug, Clone, Default)]
pub struct TableIndex {
    tables: Vec<InfoboxTable>,
    by_id: HashMap<String, usize>,
}

impl TableIndex {
    pub fn new(tables: Vec<InfoboxTable>) -> Self {
        let by_id = tables
            .iter()
            .enumerate()
            .map(|(i, t)| (t.source_id.clone(), i))
            .collect();
        TableIndex { tables, by_id }
    }

    pub fn get(&self, id: &str) -> Option<&InfoboxTable> {
        self.by_id.get(id).map(|&i| &self.tables[i])
    }

    pub fn tables(&self) -> &[InfoboxTable] {
        &self.tables
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

impl From<Vec<InfoboxTable>> for TableIndex {
    fn from(tables: Vec<InfoboxTable>) -> Self {
        TableIndex::new(tables)
    }
}

/// The ten TRAM task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TramTask {
    Ordering,
    Frequency,
    Duration,
    #[serde(alias = "Typical Time", alias = "typical_time")]
    TypicalTime,
    #[serde(alias = "Ambiguity Resolution", alias = "ambiguity_resolution")]
    AmbiguityResolution,
    Arithmetic,
    #[serde(alias = "Temporal Relation")]
    Relation,
    #[serde(alias = "Temporal NLI", alias = "NLI")]
    TemporalNLI,
    #[serde(alias = "Temporal Causality")]
    Causality,
    #[serde(alias = "Temporal Storytelling")]
    Storytelling,
}

impl TramTask {
    pub const ALL: [TramTask; 10] = [
        TramTask::Ordering,
        TramTask::Frequency,
        TramTask::Duration,
        TramTask::TypicalTime,
        TramTask::AmbiguityResolution,
        TramTask::Arithmetic,
        TramTask::Relation,
        TramTask::TemporalNLI,
        TramTask::Causality,
        TramTask::Storytelling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TramTask::Ordering => "Ordering",
            TramTask::Frequency => "Frequency",
            TramTask::Duration => "Duration",
            TramTask::TypicalTime => "TypicalTime",
            TramTask::AmbiguityResolution => "AmbiguityResolution",
            TramTask::Arithmetic => "Arithmetic",
            TramTask::Relation => "Relation",
            TramTask::TemporalNLI => "TemporalNLI",
            TramTask::Causality => "Causality",
            TramTask::Storytelling => "Storytelling",
        }
    }

    /// Number of answer options every item of this task carries.
    pub fn arity(self) -> usize {
        match self {
            TramTask::Arithmetic => 4,
            TramTask::Causality | TramTask::Storytelling => 2,
            _ => 3,
        }
    }
}

impl fmt::Display for TramTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TramExample {
    pub task: TramTask,
    #[serde(default)]
    pub problem_type: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl TramExample {
    pub fn validate(&self, record: &str) -> Result<(), LoadError> {
        let n = self.options.len();
        if !(2..=4).contains(&n) {
            return Err(LoadError::invariant(
                format!("options length {n} outside 2..=4"),
                record,
            ));
        }
        if n != self.task.arity() {
            return Err(LoadError::invariant(
                format!(
                    "{} expects {} options, found {n}",
                    self.task,
                    self.task.arity()
                ),
                record,
            ));
        }
        if self.answer_index >= n {
            return Err(LoadError::invariant(
                format!("answer_index {} < options length {n}", self.answer_index),
                record,
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuxDatasetKind {
    #[serde(rename = "DATE")]
    Date,
    TemporalSequences,
    #[serde(rename = "TRAM")]
    Tram,
}

/// A generic multiple-choice item used by the fine-tuning preparation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub task: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl From<&TramExample> for McqItem {
    fn from(t: &TramExample) -> Self {
        McqItem {
            task: t.task.name().to_string(),
            question: t.question.clone(),
            options: t.options.clone(),
            answer_index: t.answer_index,
            rationale: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Deserialize)]
struct RawTable {
    source_id: String,
    title: String,
    sections: Vec<RawSection>,
}

#[derive(Deserialize)]
struct RawSection {
    header: Option<String>,
    rows: Vec<RawRow>,
}

#[derive(Deserialize)]
struct RawRow {
    key: String,
    values: Vec<String>,
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_array<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>, LoadError> {
    serde_json::from_str(text).map_err(|e| LoadError::Format {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Collapses tabs and newlines (and their runs) into single spaces, then trims.
fn clean(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_ctrl = false;
    for c in s.chars() {
        if matches!(c, '\t' | '\n' | '\r') {
            if !in_ctrl {
                out.push(' ');
            }
            in_ctrl = true;
        } else {
            out.push(c);
            in_ctrl = false;
        }
    }
    out.trim().to_string()
}

/// Unwraps a value stringified as a Python list (`"['a | b']"`) into its parts.
///
/// Returns `None` when the value is not bracket-wrapped. Empty fragments left
/// over from list stringification (`"| ( | x"`) are dropped.
pub fn unwrap_list_value(value: &str) -> Option<Vec<String>> {
    let v = value.trim();
    let inner = v
        .strip_prefix("['")
        .and_then(|s| s.strip_suffix("']"))
        .or_else(|| v.strip_prefix("[\"").and_then(|s| s.strip_suffix("\"]")))?;
    Some(
        inner
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
    )
}

fn canonical_values(raw: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for v in raw {
        let v = clean(v);
        match unwrap_list_value(&v) {
            Some(parts) => out.extend(parts),
            None => out.push(v),
        }
    }
    out
}

fn canonical_table(raw: RawTable) -> InfoboxTable {
    InfoboxTable {
        source_id: raw.source_id.trim().to_string(),
        title: clean(&raw.title),
        sections: raw
            .sections
            .into_iter()
            .map(|s| Section {
                header: s.header.map(|h| clean(&h)).filter(|h| !h.is_empty()),
                rows: s
                    .rows
                    .into_iter()
                    .map(|r| Row {
                        key: clean(&r.key),
                        values: canonical_values(&r.values),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Parses the tables JSON format from a string. `origin` labels errors.
pub fn parse_tables(origin: &Path, text: &str) -> Result<Vec<InfoboxTable>, LoadError> {
    let raw: Vec<RawTable> = parse_array(origin, text)?;
    raw.into_iter()
        .map(|r| {
            let t = canonical_table(r);
            t.validate()?;
            Ok(t)
        })
        .collect()
}

pub fn load_tables(path: impl AsRef<Path>) -> Result<Vec<InfoboxTable>, LoadError> {
    let path = path.as_ref();
    parse_tables(path, &read(path)?)
}

/// Serializes tables back to the canonical JSON table format.
pub fn tables_to_json(tables: &[InfoboxTable]) -> String {
    serde_json::to_string_pretty(tables).expect("tables serialize")
}

#[derive(Deserialize)]
struct RawQa {
    id: String,
    table_id: String,
    question: String,
    gold_answers: Vec<String>,
    #[serde(default)]
    evidence_keys: Vec<String>,
    split: Split,
}

pub fn parse_qa(origin: &Path, text: &str, tables: &TableIndex) -> Result<Vec<QaExample>, LoadError> {
    let raw: Vec<RawQa> = parse_array(origin, text)?;
    raw.into_iter()
        .map(|r| {
            let ex = QaExample {
                id: r.id.trim().to_string(),
                table_id: r.table_id.trim().to_string(),
                question: clean(&r.question),
                gold_answers: r.gold_answers.iter().map(|g| clean(g)).collect(),
                evidence_keys: r.evidence_keys.iter().map(|k| clean(k)).collect(),
                split: r.split,
                labels: None,
            };
            validate_example(&ex, tables)?;
            Ok(ex)
        })
        .collect()
}

/// Checks the cross-reference and evidence-key invariants of one example.
pub fn validate_example(ex: &QaExample, tables: &TableIndex) -> Result<(), LoadError> {
    let table = tables.get(&ex.table_id).ok_or_else(|| LoadError::DanglingReference {
        example: ex.id.clone(),
        table_id: ex.table_id.clone(),
    })?;
    if ex.gold_answers.is_empty() {
        return Err(LoadError::invariant("gold_answers non-empty", &ex.id));
    }
    if ex.gold_answers.iter().any(|g| g.trim().is_empty()) {
        return Err(LoadError::invariant("gold answer non-empty after trimming", &ex.id));
    }
    for key in &ex.evidence_keys {
        if !table.has_key(key) {
            return Err(LoadError::invariant(
                format!("evidence key {key:?} not found in table {}", table.source_id),
                &ex.id,
            ));
        }
    }
    Ok(())
}

pub fn load_qa(path: impl AsRef<Path>, tables: &TableIndex) -> Result<Vec<QaExample>, LoadError> {
    let path = path.as_ref();
    parse_qa(path, &read(path)?, tables)
}

pub fn parse_tram(origin: &Path, text: &str) -> Result<Vec<TramExample>, LoadError> {
    let raw: Vec<TramExample> = parse_array(origin, text)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, mut t)| {
            t.question = clean(&t.question);
            t.problem_type = clean(&t.problem_type);
            t.options = t.options.iter().map(|o| clean(o)).collect();
            t.validate(&format!("#{i}"))?;
            Ok(t)
        })
        .collect()
}

pub fn load_tram(path: impl AsRef<Path>) -> Result<Vec<TramExample>, LoadError> {
    let path = path.as_ref();
    parse_tram(path, &read(path)?)
}

#[derive(Deserialize)]
struct BigBenchFile {
    examples: Vec<BigBenchExample>,
}

#[derive(Deserialize)]
struct BigBenchExample {
    input: String,
    target_scores: serde_json::Map<String, serde_json::Value>,
}

/// Loads a BIG-bench style multiple-choice task file (used by DATE and
/// Temporal Sequences): `{"examples": [{"input", "target_scores": {opt: 0|1}}]}`.
pub fn load_bigbench_mc(path: impl AsRef<Path>, task: &str) -> Result<Vec<McqItem>, LoadError> {
    let path = path.as_ref();
    let text = read(path)?;
    let file: BigBenchFile = serde_json::from_str(&text).map_err(|e| LoadError::Format {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.examples
        .into_iter()
        .enumerate()
        .map(|(i, ex)| {
            let options: Vec<String> = ex.target_scores.keys().map(|k| clean(k)).collect();
            let correct: Vec<usize> = ex
                .target_scores
                .values()
                .enumerate()
                .filter(|(_, v)| v.as_f64().unwrap_or(0.0) > 0.0)
                .map(|(j, _)| j)
                .collect();
            if options.len() < 2 || options.len() > 26 {
                return Err(LoadError::invariant("options length in 2..=26", format!("#{i}")));
            }
            let [answer_index] = correct[..] else {
                return Err(LoadError::invariant("exactly one correct option", format!("#{i}")));
            };
            Ok(McqItem {
                task: task.to_string(),
                question: clean(&ex.input),
                options,
                answer_index,
                rationale: None,
            })
        })
        .collect()
}
