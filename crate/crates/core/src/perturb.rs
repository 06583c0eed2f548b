//! The five evaluation conditions, each built from a `(table, example)` pair
//! with a record of what changed.

use std::fmt;
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{keys_match, InfoboxTable, QaExample, Row, Section};

const DEFAULT_POOL: &str = include_str!("../data/alias_pool.txt");

/// Minimum length of a title's final token for surname-only mentions to be renamed.
pub const SURNAME_MIN_CHARS: usize = 4;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("example {0} has no evidence keys")]
    NoEvidence(String),
    #[error("deleting the evidence rows of example {0} would empty the table")]
    EmptiedTable(String),
    #[error("no alias in the pool (size {pool}) avoids colliding with table {table}")]
    AliasCollision { table: String, pool: usize },
    #[error("alias pool is empty")]
    EmptyPool,
    #[error("cannot read alias pool {path}: {source}")]
    PoolIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("deletion record does not fit the table: {0}")]
    BadCoordinates(String),
    #[error("restore requires a row-deletion instance, got {0}")]
    NotRowDeletion(TaskKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    OriginalTable,
    WithoutTable,
    AlteredEntity,
    MissingRelevantRows,
    InformationAbsenceDetection,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::OriginalTable,
        TaskKind::WithoutTable,
        TaskKind::AlteredEntity,
        TaskKind::MissingRelevantRows,
        TaskKind::InformationAbsenceDetection,
    ];

    pub fn is_row_deletion(self) -> bool {
        matches!(
            self,
            TaskKind::MissingRelevantRows | TaskKind::InformationAbsenceDetection
        )
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TaskKind::OriginalTable => "Original Table",
            TaskKind::WithoutTable => "Without Table",
            TaskKind::AlteredEntity => "Altered Entity Name",
            TaskKind::MissingRelevantRows => "Missing Relevant Rows",
            TaskKind::InformationAbsenceDetection => "Information Absence Detection",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletedRow {
    pub section_index: usize,
    pub row_index: usize,
    pub row: Row,
}

/// A section removed because all of its rows were deleted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSection {
    pub index: usize,
    pub header: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedInstance {
    pub task: TaskKind,
    pub table: Option<InfoboxTable>,
    pub question: String,
    pub alias: Option<String>,
    /// Coordinates refer to the original table.
    pub deleted: Vec<DeletedRow>,
    #[serde(default)]
    pub dropped_sections: Vec<DroppedSection>,
    pub source_example_id: String,
    pub seed: u64,
    /// Absence-detection control item: the table is intact.
    #[serde(default)]
    pub control: bool,
}

impl PerturbedInstance {
    fn base(task: TaskKind, table: &InfoboxTable, example: &QaExample) -> Self {
        PerturbedInstance {
            task,
            table: Some(table.clone()),
            question: example.question.clone(),
            alias: None,
            deleted: Vec::new(),
            dropped_sections: Vec::new(),
            source_example_id: example.id.clone(),
            seed: 0,
            control: false,
        }
    }

    /// Stable identifier for logs and bundles.
    pub fn reference(&self) -> String {
        let suffix = if self.control { "/control" } else { "" };
        format!("{}/{}{}", self.source_example_id, self.task, suffix)
    }
}

pub fn make_original(table: &InfoboxTable, example: &QaExample) -> PerturbedInstance {
    PerturbedInstance::base(TaskKind::OriginalTable, table, example)
}

pub fn remove_table(table: &InfoboxTable, example: &QaExample) -> PerturbedInstance {
    PerturbedInstance {
        table: None,
        ..PerturbedInstance::base(TaskKind::WithoutTable, table, example)
    }
}

/// An absence-detection item whose table keeps its evidence rows.
pub fn make_absence_control(table: &InfoboxTable, example: &QaExample) -> PerturbedInstance {
    PerturbedInstance {
        control: true,
        ..PerturbedInstance::base(TaskKind::InformationAbsenceDetection, table, example)
    }
}

// ---------------------------------------------------------------------------
// Row deletion

fn delete_rows(
    task: TaskKind,
    table: &InfoboxTable,
    example: &QaExample,
) -> Result<PerturbedInstance, PerturbError> {
    if example.evidence_keys.is_empty() {
        return Err(PerturbError::NoEvidence(example.id.clone()));
    }
    let is_evidence = |row: &Row| example.evidence_keys.iter().any(|k| keys_match(&row.key, k));
    let mut deleted = Vec::new();
    let mut dropped_sections = Vec::new();
    let mut sections = Vec::new();
    for (s, section) in table.sections.iter().enumerate() {
        let mut rows = Vec::new();
        for (r, row) in section.rows.iter().enumerate() {
            if is_evidence(row) {
                deleted.push(DeletedRow {
                    section_index: s,
                    row_index: r,
                    row: row.clone(),
                });
            } else {
                rows.push(row.clone());
            }
        }
        if rows.is_empty() {
            dropped_sections.push(DroppedSection {
                index: s,
                header: section.header.clone(),
            });
        } else {
            sections.push(Section {
                header: section.header.clone(),
                rows,
            });
        }
    }
    if sections.is_empty() {
        return Err(PerturbError::EmptiedTable(example.id.clone()));
    }
    Ok(PerturbedInstance {
        table: Some(InfoboxTable {
            sections,
            ..table.clone()
        }),
        deleted,
        dropped_sections,
        ..PerturbedInstance::base(task, table, example)
    })
}

/// Removes every row whose key matches an evidence key, in every section.
pub fn delete_evidence_rows(
    table: &InfoboxTable,
    example: &QaExample,
) -> Result<PerturbedInstance, PerturbError> {
    delete_rows(TaskKind::MissingRelevantRows, table, example)
}

/// Same table transform as [`delete_evidence_rows`], tagged for absence detection.
pub fn detect_absence(
    table: &InfoboxTable,
    example: &QaExample,
) -> Result<PerturbedInstance, PerturbError> {
    delete_rows(TaskKind::InformationAbsenceDetection, table, example)
}

/// Reinserts deleted rows (and dropped sections) at their recorded coordinates.
pub fn restore(instance: &PerturbedInstance) -> Result<InfoboxTable, PerturbError> {
    if !instance.task.is_row_deletion() {
        return Err(PerturbError::NotRowDeletion(instance.task));
    }
    let table = instance
        .table
        .as_ref()
        .ok_or_else(|| PerturbError::BadCoordinates("instance has no table".into()))?;
    let mut sections = table.sections.clone();
    let mut dropped = instance.dropped_sections.clone();
    dropped.sort_by_key(|d| d.index);
    for d in dropped {
        if d.index > sections.len() {
            return Err(PerturbError::BadCoordinates(format!(
                "section {} beyond {} sections",
                d.index,
                sections.len()
            )));
        }
        sections.insert(
            d.index,
            Section {
                header: d.header,
                rows: Vec::new(),
            },
        );
    }
    let mut deleted = instance.deleted.clone();
    deleted.sort_by_key(|d| (d.section_index, d.row_index));
    for d in deleted {
        let section = sections.get_mut(d.section_index).ok_or_else(|| {
            PerturbError::BadCoordinates(format!("section {} out of range", d.section_index))
        })?;
        if d.row_index > section.rows.len() {
            return Err(PerturbError::BadCoordinates(format!(
                "row {} beyond {} rows in section {}",
                d.row_index,
                section.rows.len(),
                d.section_index
            )));
        }
        section.rows.insert(d.row_index, d.row);
    }
    if let Some(i) = sections.iter().position(|s| s.rows.is_empty()) {
        return Err(PerturbError::BadCoordinates(format!(
            "section {i} left empty after restore"
        )));
    }
    Ok(InfoboxTable {
        sections,
        ..table.clone()
    })
}

// ---------------------------------------------------------------------------
// Entity renaming

/// Pseudonyms used for the altered-entity task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasPool {
    names: Vec<String>,
}

impl AliasPool {
    /// One alias per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, PerturbError> {
        let names: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        if names.is_empty() {
            return Err(PerturbError::EmptyPool);
        }
        Ok(AliasPool { names })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PerturbError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PerturbError::PoolIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for AliasPool {
    fn default() -> Self {
        AliasPool::parse(DEFAULT_POOL).expect("shipped alias pool is non-empty")
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Pool index for `(seed, title)`: FNV-1a over the seed's little-endian bytes
/// followed by the UTF-8 title, modulo the pool size.
pub fn alias_index(seed: u64, title: &str, pool_len: usize) -> usize {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(title.as_bytes());
    (fnv1a64(&bytes) % pool_len as u64) as usize
}

fn final_token(name: &str) -> Option<&str> {
    let mut tokens = name.split_whitespace();
    let last = tokens.next_back()?;
    tokens.next()?;
    Some(last)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Finds mentions of an entity name: the full name anywhere (case-insensitive,
/// on word boundaries) and, when enabled, its final token on its own.
#[derive(Debug, Clone)]
pub struct NameMatcher {
    re: Regex,
}

/// One located mention. `full` distinguishes whole-name from surname matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub full: bool,
}

impl NameMatcher {
    pub fn new(name: &str, surname: bool) -> Self {
        let full = regex::escape(name.trim());
        let pattern = match final_token(name).filter(|_| surname) {
            Some(last) => format!("(?i)({full})|({})", regex::escape(last)),
            None => format!("(?i)({full})"),
        };
        NameMatcher {
            re: Regex::new(&pattern).expect("escaped pattern compiles"),
        }
    }

    /// Whether surname-only mentions of `title` should be matched.
    pub fn surname_rule_applies(title: &str) -> bool {
        final_token(title).is_some_and(|t| t.chars().count() >= SURNAME_MIN_CHARS)
    }

    pub fn for_title(title: &str) -> Self {
        NameMatcher::new(title, Self::surname_rule_applies(title))
    }

    pub fn mentions(&self, text: &str) -> Vec<Mention> {
        let mut found = Vec::new();
        let mut pos = 0;
        while pos <= text.len() {
            let Some(caps) = self.re.captures_at(text, pos) else { break };
            let m = caps.get(0).expect("group 0");
            let before_ok = text[..m.start()].chars().next_back().is_none_or(|c| !is_word_char(c));
            let after_ok = text[m.end()..].chars().next().is_none_or(|c| !is_word_char(c));
            if before_ok && after_ok && !m.as_str().is_empty() {
                found.push(Mention {
                    start: m.start(),
                    end: m.end(),
                    full: caps.get(1).is_some(),
                });
                pos = m.end();
            } else {
                let step = text[m.start()..].chars().next().map_or(1, char::len_utf8);
                pos = m.start() + step;
            }
        }
        found
    }

    pub fn count(&self, text: &str) -> usize {
        self.mentions(text).len()
    }

    /// Replaces full mentions with `full` and surname mentions with `surname`.
    pub fn replace(&self, text: &str, full: &str, surname: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for m in self.mentions(text) {
            out.push_str(&text[last..m.start]);
            out.push_str(if m.full { full } else { surname });
            last = m.end;
        }
        out.push_str(&text[last..]);
        out
    }
}

/// Every text field of a table, in a fixed order.
pub fn table_texts(table: &InfoboxTable) -> Vec<&str> {
    let mut texts = vec![table.title.as_str()];
    for section in &table.sections {
        if let Some(h) = &section.header {
            texts.push(h);
        }
        for row in &section.rows {
            texts.push(&row.key);
            texts.extend(row.values.iter().map(String::as_str));
        }
    }
    texts
}

fn map_table_text(table: &InfoboxTable, f: impl Fn(&str) -> String) -> InfoboxTable {
    InfoboxTable {
        source_id: table.source_id.clone(),
        title: f(&table.title),
        sections: table
            .sections
            .iter()
            .map(|s| Section {
                header: s.header.as_deref().map(&f),
                rows: s
                    .rows
                    .iter()
                    .map(|r| Row {
                        key: f(&r.key),
                        values: r.values.iter().map(|v| f(v)).collect(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Replaces the entity name throughout the table and question with an alias
/// drawn deterministically from the pool.
///
/// Candidates are tried starting at [`alias_index`] and moving forward through
/// the pool; a candidate is rejected when it already occurs in the table or
/// question, or when the substitution would leave a mention of the original.
pub fn rename_entity(
    table: &InfoboxTable,
    example: &QaExample,
    seed: u64,
    pool: &AliasPool,
) -> Result<PerturbedInstance, PerturbError> {
    if pool.is_empty() {
        return Err(PerturbError::EmptyPool);
    }
    let surname = NameMatcher::surname_rule_applies(&table.title);
    let original = NameMatcher::new(&table.title, surname);
    let mut texts = table_texts(table);
    texts.push(&example.question);
    let original_count: usize = texts.iter().map(|t| original.count(t)).sum();

    let start = alias_index(seed, &table.title, pool.len());
    for offset in 0..pool.len() {
        let alias = &pool.names[(start + offset) % pool.len()];
        let alias_matcher = NameMatcher::new(alias, surname);
        if texts.iter().any(|t| alias_matcher.count(t) > 0) {
            continue;
        }
        let alias_last = final_token(alias).unwrap_or(alias);
        let replace = |s: &str| original.replace(s, alias, alias_last);
        let renamed = map_table_text(table, replace);
        let question = replace(&example.question);

        let mut new_texts = table_texts(&renamed);
        new_texts.push(&question);
        let leftover: usize = new_texts.iter().map(|t| original.count(t)).sum();
        let alias_count: usize = new_texts.iter().map(|t| alias_matcher.count(t)).sum();
        if leftover != 0 || alias_count != original_count {
            continue;
        }
        return Ok(PerturbedInstance {
            table: Some(renamed),
            question,
            alias: Some(alias.clone()),
            seed,
            ..PerturbedInstance::base(TaskKind::AlteredEntity, table, example)
        });
    }
    Err(PerturbError::AliasCollision {
        table: table.source_id.clone(),
        pool: pool.len(),
    })
}

/// Builds the instance for `task`. `seed` only affects [`TaskKind::AlteredEntity`].
pub fn perturb(
    task: TaskKind,
    table: &InfoboxTable,
    example: &QaExample,
    seed: u64,
    pool: &AliasPool,
) -> Result<PerturbedInstance, PerturbError> {
    let mut inst = match task {
        TaskKind::OriginalTable => make_original(table, example),
        TaskKind::WithoutTable => remove_table(table, example),
        TaskKind::AlteredEntity => rename_entity(table, example, seed, pool)?,
        TaskKind::MissingRelevantRows => delete_evidence_rows(table, example)?,
        TaskKind::InformationAbsenceDetection => detect_absence(table, example)?,
    };
    inst.seed = seed;
    Ok(inst)
}
