//! Error taxonomy labels, their summary, and the enhanced evaluation set.
//!
//! Labels live in a sidecar file keyed by example id:
//! `[{"id", "verdict", "category", "note"}]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QaExample;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed label file {path}: {message}")]
    Format { path: String, message: String },
    #[error("label {id}: {message}")]
    InvalidLabel { id: String, message: String },
    #[error("label references unknown example id {0}")]
    UnknownExampleId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Correct,
    ModelError,
    DataIssue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelErrorKind {
    TabularDataIssue,
    TemporalCalculation,
    OtherModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataIssueKind {
    ExternalKnowledge,
    WrongAnnotationOrMultipleAnswers,
    AmbiguousOrIncomplete,
    OtherData,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyLabel {
    pub verdict: Verdict,
    pub model_error: Option<ModelErrorKind>,
    pub data_issue: Option<DataIssueKind>,
    #[serde(default)]
    pub note: String,
}

impl TaxonomyLabel {
    pub fn correct() -> Self {
        TaxonomyLabel {
            verdict: Verdict::Correct,
            model_error: None,
            data_issue: None,
            note: String::new(),
        }
    }

    pub fn model_error(kind: ModelErrorKind) -> Self {
        TaxonomyLabel {
            verdict: Verdict::ModelError,
            model_error: Some(kind),
            data_issue: None,
            note: String::new(),
        }
    }

    pub fn data_issue(kind: DataIssueKind) -> Self {
        TaxonomyLabel {
            verdict: Verdict::DataIssue,
            model_error: None,
            data_issue: Some(kind),
            note: String::new(),
        }
    }

    /// Exactly one sub-category, matching the verdict; none for `Correct`.
    pub fn is_consistent(&self) -> bool {
        match self.verdict {
            Verdict::Correct => self.model_error.is_none() && self.data_issue.is_none(),
            Verdict::ModelError => self.model_error.is_some() && self.data_issue.is_none(),
            Verdict::DataIssue => self.data_issue.is_some() && self.model_error.is_none(),
        }
    }

    pub fn category_name(&self) -> Option<String> {
        self.model_error
            .map(|k| format!("{k:?}"))
            .or_else(|| self.data_issue.map(|k| format!("{k:?}")))
    }
}

/// A label bound to the example it annotates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub id: String,
    pub label: TaxonomyLabel,
}

#[derive(Deserialize, Serialize)]
struct RawLabel {
    id: String,
    verdict: Verdict,
    category: Option<String>,
    #[serde(default)]
    note: String,
}

fn label_from_raw(raw: RawLabel) -> Result<LabelRecord, TaxonomyError> {
    let invalid = |message: String| TaxonomyError::InvalidLabel {
        id: raw.id.clone(),
        message,
    };
    let category = raw.category.as_deref().map(str::trim).filter(|c| !c.is_empty());
    let label = match (raw.verdict, category) {
        (Verdict::Correct, None) => TaxonomyLabel::correct(),
        (Verdict::Correct, Some(c)) => {
            return Err(invalid(format!("Correct verdict carries category {c:?}")))
        }
        (Verdict::ModelError, Some(c)) => {
            let kind: ModelErrorKind = serde_json::from_value(serde_json::Value::from(c))
                .map_err(|_| invalid(format!("unknown model-error category {c:?}")))?;
            TaxonomyLabel::model_error(kind)
        }
        (Verdict::DataIssue, Some(c)) => {
            let kind: DataIssueKind = serde_json::from_value(serde_json::Value::from(c))
                .map_err(|_| invalid(format!("unknown data-issue category {c:?}")))?;
            TaxonomyLabel::data_issue(kind)
        }
        (v, None) => return Err(invalid(format!("{v:?} verdict requires a category"))),
    };
    Ok(LabelRecord {
        id: raw.id,
        label: TaxonomyLabel {
            note: raw.note,
            ..label
        },
    })
}

pub fn parse_labels(text: &str, origin: &str) -> Result<Vec<LabelRecord>, TaxonomyError> {
    let raw: Vec<RawLabel> = serde_json::from_str(text).map_err(|e| TaxonomyError::Format {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    raw.into_iter().map(label_from_raw).collect()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>, TaxonomyError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_labels(&text, &path.display().to_string())
}

pub fn labels_to_json(labels: &[LabelRecord]) -> String {
    let raw: Vec<RawLabel> = labels
        .iter()
        .map(|r| RawLabel {
            id: r.id.clone(),
            verdict: r.label.verdict,
            category: r.label.category_name(),
            note: r.label.note.clone(),
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("labels serialize")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TaxonomySummary {
    pub total: usize,
    pub incorrect: usize,
    pub correct: usize,
    pub model_errors: usize,
    pub data_issues: usize,
    pub by_model_error: BTreeMap<ModelErrorKind, usize>,
    pub by_data_issue: BTreeMap<DataIssueKind, usize>,
}

pub fn summarize<'a>(labels: impl IntoIterator<Item = &'a TaxonomyLabel>) -> TaxonomySummary {
    let mut s = TaxonomySummary::default();
    for label in labels {
        s.total += 1;
        match label.verdict {
            Verdict::Correct => s.correct += 1,
            Verdict::ModelError => {
                s.model_errors += 1;
                if let Some(k) = label.model_error {
                    *s.by_model_error.entry(k).or_default() += 1;
                }
            }
            Verdict::DataIssue => {
                s.data_issues += 1;
                if let Some(k) = label.data_issue {
                    *s.by_data_issue.entry(k).or_default() += 1;
                }
            }
        }
    }
    s.incorrect = s.model_errors + s.data_issues;
    s
}

impl TaxonomySummary {
    pub fn model_error_count(&self, kind: ModelErrorKind) -> usize {
        self.by_model_error.get(&kind).copied().unwrap_or(0)
    }

    pub fn data_issue_count(&self, kind: DataIssueKind) -> usize {
        self.by_data_issue.get(&kind).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RemovedExample {
    pub id: String,
    pub category: DataIssueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnhancedSetManifest {
    pub input: usize,
    pub retained: usize,
    pub removed: Vec<RemovedExample>,
}

/// Drops every example labelled as a data issue; model errors and correct
/// answers stay. Retained examples carry their label.
pub fn build_enhanced_set(
    examples: &[QaExample],
    labels: &[LabelRecord],
) -> Result<(Vec<QaExample>, EnhancedSetManifest), TaxonomyError> {
    let known: HashSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
    let mut by_id: HashMap<&str, &TaxonomyLabel> = HashMap::new();
    for rec in labels {
        if !known.contains(rec.id.as_str()) {
            return Err(TaxonomyError::UnknownExampleId(rec.id.clone()));
        }
        if !rec.label.is_consistent() {
            return Err(TaxonomyError::InvalidLabel {
                id: rec.id.clone(),
                message: "sub-category does not match verdict".into(),
            });
        }
        by_id.insert(rec.id.as_str(), &rec.label);
    }
    let mut retained = Vec::new();
    let mut removed = Vec::new();
    for ex in examples {
        let label = by_id.get(ex.id.as_str()).copied().or(ex.labels.as_ref());
        match label {
            Some(l) if l.verdict == Verdict::DataIssue => removed.push(RemovedExample {
                id: ex.id.clone(),
                category: l.data_issue.expect("consistent label"),
            }),
            _ => {
                let mut kept = ex.clone();
                if let Some(l) = label {
                    kept.labels = Some(l.clone());
                }
                retained.push(kept);
            }
        }
    }
    let manifest = EnhancedSetManifest {
        input: examples.len(),
        retained: retained.len(),
        removed,
    };
    Ok((retained, manifest))
}
