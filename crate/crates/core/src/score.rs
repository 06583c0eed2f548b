//! Answer normalization, exact match and grouped accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::FidelityReport;
use crate::perturb::TaskKind;
use crate::prompt::{PromptVariant, Technique};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no items in group {0}")]
    EmptyGroup(String),
    #[error("gold answer list is empty for {0}")]
    NoGold(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// Lowercase, no punctuation, no leading article, single spaces, and
    /// numeric comparison when both sides are numbers.
    #[default]
    Squad,
    /// Whitespace collapsed and trimmed, nothing else.
    Strict,
}

impl FromStr for Normalizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "squad" => Ok(Normalizer::Squad),
            "strict" => Ok(Normalizer::Strict),
            _ => Err(format!("unknown normalizer {s:?}")),
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered.chars().filter(|&c| !is_punct(c)).collect();
    let mut tokens: Vec<&str> = stripped.split_whitespace().collect();
    if tokens.len() > 1 && matches!(tokens[0], "a" | "an" | "the") {
        tokens.remove(0);
    }
    tokens.join(" ")
}

fn normalize_strict(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn as_number(s: &str) -> Option<f64> {
    let t = s.trim().trim_end_matches('.').replace(',', "");
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

impl Normalizer {
    pub fn normalize(self, s: &str) -> String {
        match self {
            Normalizer::Squad => normalize_answer(s),
            Normalizer::Strict => normalize_strict(s),
        }
    }

    pub fn matches(self, prediction: &str, gold: &str) -> bool {
        if self == Normalizer::Squad {
            if let (Some(p), Some(g)) = (as_number(prediction), as_number(gold)) {
                return p == g;
            }
        }
        self.normalize(prediction) == self.normalize(gold)
    }
}

/// 1 when the prediction matches any gold answer under the SQuAD normalizer.
pub fn exact_match(prediction: &str, gold_answers: &[String]) -> u8 {
    exact_match_with(prediction, gold_answers, Normalizer::Squad)
}

pub fn exact_match_with(prediction: &str, gold_answers: &[String], normalizer: Normalizer) -> u8 {
    u8::from(gold_answers.iter().any(|g| normalizer.matches(prediction, g)))
}

/// Absence detection is correct when the model abstains exactly on the items
/// whose evidence was deleted.
pub fn score_absence(abstained: bool, rows_were_deleted: bool) -> u8 {
    u8::from(abstained == rows_were_deleted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricDirection {
    HigherBetter,
    LowerBetter,
}

impl MetricDirection {
    pub fn of(task: TaskKind) -> Self {
        match task {
            TaskKind::OriginalTable
            | TaskKind::AlteredEntity
            | TaskKind::InformationAbsenceDetection => MetricDirection::HigherBetter,
            TaskKind::WithoutTable | TaskKind::MissingRelevantRows => MetricDirection::LowerBetter,
        }
    }

    pub fn arrow(self) -> &'static str {
        match self {
            MetricDirection::HigherBetter => "↑",
            MetricDirection::LowerBetter => "↓",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub rows_total: usize,
    pub rows_matched: usize,
}

impl From<&FidelityReport> for FidelitySummary {
    fn from(r: &FidelityReport) -> Self {
        FidelitySummary {
            rows_total: r.rows_total,
            rows_matched: r.rows_matched,
        }
    }
}

pub const NO_FINETUNE: &str = "No FT";

fn default_finetune_tag() -> String {
    NO_FINETUNE.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub example_id: String,
    pub task: TaskKind,
    pub technique: Technique,
    pub variant: PromptVariant,
    pub model_id: String,
    #[serde(default = "default_finetune_tag")]
    pub finetune_tag: String,
    #[serde(default)]
    pub control: bool,
    pub prediction: String,
    pub abstained: bool,
    pub em: u8,
    #[serde(default)]
    pub fidelity: Option<FidelitySummary>,
}

/// Identity of a scored item in the results log.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemKey {
    pub example_id: String,
    pub task: TaskKind,
    pub technique: Technique,
    pub variant: PromptVariant,
    pub model_id: String,
    pub finetune_tag: String,
    pub control: bool,
}

impl ScoredItem {
    pub fn key(&self) -> ItemKey {
        ItemKey {
            example_id: self.example_id.clone(),
            task: self.task,
            technique: self.technique,
            variant: self.variant,
            model_id: self.model_id.clone(),
            finetune_tag: self.finetune_tag.clone(),
            control: self.control,
        }
    }
}

/// Keeps the last item seen for each key, in first-seen key order.
pub fn dedupe_last_wins(items: impl IntoIterator<Item = ScoredItem>) -> Vec<ScoredItem> {
    let mut order: Vec<ItemKey> = Vec::new();
    let mut latest: BTreeMap<ItemKey, ScoredItem> = BTreeMap::new();
    for item in items {
        let key = item.key();
        if !latest.contains_key(&key) {
            order.push(key.clone());
        }
        latest.insert(key, item);
    }
    order.into_iter().filter_map(|k| latest.remove(&k)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Model,
    Technique,
    Task,
    Variant,
    FinetuneTag,
}

impl GroupBy {
    pub const ALL: [GroupBy; 5] = [
        GroupBy::Model,
        GroupBy::Technique,
        GroupBy::Task,
        GroupBy::Variant,
        GroupBy::FinetuneTag,
    ];
}

/// A group coordinate; axes not grouped on are `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub model_id: Option<String>,
    pub technique: Option<Technique>,
    pub task: Option<TaskKind>,
    pub variant: Option<PromptVariant>,
    pub finetune_tag: Option<String>,
}

impl GroupKey {
    pub fn of(item: &ScoredItem, grouping: &[GroupBy]) -> Self {
        let mut k = GroupKey::default();
        for g in grouping {
            match g {
                GroupBy::Model => k.model_id = Some(item.model_id.clone()),
                GroupBy::Technique => k.technique = Some(item.technique),
                GroupBy::Task => k.task = Some(item.task),
                GroupBy::Variant => k.variant = Some(item.variant),
                GroupBy::FinetuneTag => k.finetune_tag = Some(item.finetune_tag.clone()),
            }
        }
        k
    }

    fn columns(&self) -> [String; 5] {
        [
            self.model_id.clone().unwrap_or_default(),
            self.technique.map(|t| t.to_string()).unwrap_or_default(),
            self.task.map(|t| t.to_string()).unwrap_or_default(),
            self.variant.map(|v| v.to_string()).unwrap_or_default(),
            self.finetune_tag.clone().unwrap_or_default(),
        ]
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.columns().into_iter().filter(|c| !c.is_empty()).collect();
        write!(f, "({})", parts.join(", "))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCell {
    pub correct: u64,
    pub n: u64,
    pub fidelity_matched: u64,
    pub fidelity_total: u64,
    /// Items that carried a fidelity summary.
    pub traced: u64,
}

impl MetricCell {
    pub fn add(&mut self, item: &ScoredItem) {
        self.correct += u64::from(item.em);
        self.n += 1;
        if let Some(f) = item.fidelity {
            self.traced += 1;
            self.fidelity_matched += f.rows_matched as u64;
            self.fidelity_total += f.rows_total as u64;
        }
    }

    pub fn merge(&mut self, other: &MetricCell) {
        self.correct += other.correct;
        self.n += other.n;
        self.fidelity_matched += other.fidelity_matched;
        self.fidelity_total += other.fidelity_total;
        self.traced += other.traced;
    }

    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    /// Accuracy as a percentage with two decimals, rounded half up.
    pub fn display(&self) -> String {
        percent_from_counts(self.correct, self.n)
    }

    pub fn fidelity(&self) -> Option<f64> {
        (self.traced > 0).then(|| {
            if self.fidelity_total == 0 {
                1.0
            } else {
                self.fidelity_matched as f64 / self.fidelity_total as f64
            }
        })
    }
}

/// `correct / n` as `"xx.yy%"`, rounded half up in exact integer arithmetic.
pub fn percent_from_counts(correct: u64, n: u64) -> String {
    if n == 0 {
        return "0.00%".into();
    }
    let bp = (u128::from(correct) * 20_000 + u128::from(n)) / (2 * u128::from(n));
    format!("{}.{:02}%", bp / 100, bp % 100)
}

/// A fraction as `"xx.yy%"`, rounded half up.
pub fn format_percent(fraction: f64) -> String {
    let bp = (fraction * 10_000.0 + 0.5 + 1e-9).floor().max(0.0) as u64;
    format!("{}.{:02}%", bp / 100, bp % 100)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub grouping: Vec<GroupBy>,
    pub cells: BTreeMap<GroupKey, MetricCell>,
}

impl MetricTable {
    pub fn new(grouping: &[GroupBy]) -> Self {
        MetricTable {
            grouping: grouping.to_vec(),
            cells: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, item: &ScoredItem) {
        self.cells
            .entry(GroupKey::of(item, &self.grouping))
            .or_default()
            .add(item);
    }

    pub fn merge(&mut self, other: &MetricTable) {
        for (k, c) in &other.cells {
            self.cells.entry(k.clone()).or_default().merge(c);
        }
    }

    /// The cell for an explicitly requested group.
    pub fn cell(&self, key: &GroupKey) -> Result<&MetricCell, ScoreError> {
        self.cells
            .get(key)
            .filter(|c| c.n > 0)
            .ok_or_else(|| ScoreError::EmptyGroup(key.to_string()))
    }

    const HEADERS: [&'static str; 10] = [
        "model",
        "technique",
        "task",
        "variant",
        "finetune_tag",
        "correct",
        "n",
        "accuracy",
        "accuracy_pct",
        "fidelity",
    ];

    fn records(&self) -> impl Iterator<Item = Vec<String>> + '_ {
        self.cells.iter().map(|(k, c)| {
            let mut rec: Vec<String> = k.columns().into();
            rec.push(c.correct.to_string());
            rec.push(c.n.to_string());
            rec.push(format!("{:.6}", c.accuracy()));
            rec.push(c.display());
            rec.push(c.fidelity().map(format_percent).unwrap_or_default());
            rec
        })
    }

    pub fn to_csv(&self) -> Result<String, ScoreError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADERS)?;
        for rec in self.records() {
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| ScoreError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n", Self::HEADERS.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(Self::HEADERS.len())));
        for rec in self.records() {
            out.push_str(&format!("| {} |\n", rec.join(" | ")));
        }
        out
    }
}

pub fn aggregate<'a>(
    items: impl IntoIterator<Item = &'a ScoredItem>,
    grouping: &[GroupBy],
) -> MetricTable {
    let mut table = MetricTable::new(grouping);
    for item in items {
        table.add(item);
    }
    table
}
