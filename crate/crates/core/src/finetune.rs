//! Fine-tuning data preparation: even per-task sampling and chat-format
//! training files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{AuxDatasetKind, InfoboxTable, McqItem, QaExample, TramTask};
use crate::digest::sha256_hex;
use crate::linearize::linearize;
use crate::perturb::fnv1a64;
use crate::prompt::Message;

pub const MCQ_SYSTEM: &str =
    "Answer the multiple-choice question. Reply with the letter of the correct option followed by its text.";
pub const TABLE_SYSTEM: &str =
    "Answer the question using the entity-centric table. Give the answer as concisely as possible.";

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("sample size must be at least 1")]
    ZeroSample,
    #[error("task {task} has {available} examples but its quota is {quota}")]
    InsufficientExamples {
        task: String,
        available: usize,
        quota: usize,
    },
    #[error("item {0} has no rationale")]
    MissingRationale(String),
    #[error("item {index}: answer index {answer} out of range for {options} options")]
    BadAnswer {
        index: usize,
        answer: usize,
        options: usize,
    },
    #[error("example {0} has no gold answer")]
    NoGold(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleSource {
    Aux(AuxDatasetKind),
    TempTabQA,
}

impl SampleSource {
    pub fn name(self) -> &'static str {
        match self {
            SampleSource::Aux(AuxDatasetKind::Tram) => "TRAM",
            SampleSource::Aux(AuxDatasetKind::Date) => "DATE",
            SampleSource::Aux(AuxDatasetKind::TemporalSequences) => "TemporalSequences",
            SampleSource::TempTabQA => "TempTabQA",
        }
    }

    /// Task names in quota order.
    pub fn tasks(self) -> Vec<String> {
        match self {
            SampleSource::Aux(AuxDatasetKind::Tram) => {
                let mut names: Vec<String> = TramTask::ALL.iter().map(|t| t.name().to_string()).collect();
                names.sort();
                names
            }
            other => vec![other.name().to_string()],
        }
    }
}

impl fmt::Display for SampleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SampleSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        match key.as_str() {
            "tram" => Ok(SampleSource::Aux(AuxDatasetKind::Tram)),
            "date" => Ok(SampleSource::Aux(AuxDatasetKind::Date)),
            "temporalsequences" => Ok(SampleSource::Aux(AuxDatasetKind::TemporalSequences)),
            "temptabqa" => Ok(SampleSource::TempTabQA),
            _ => Err(format!("unknown source {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub source: SampleSource,
    pub n: usize,
    pub seed: u64,
    pub per_task_quota: BTreeMap<String, usize>,
}

/// Splits `n` evenly across the source's tasks; the remainder goes one each
/// to the alphabetically first tasks.
pub fn plan_even_sample(source: SampleSource, n: usize, seed: u64) -> Result<SamplingPlan, FinetuneError> {
    if n == 0 {
        return Err(FinetuneError::ZeroSample);
    }
    let tasks = source.tasks();
    let base = n / tasks.len();
    let extra = n % tasks.len();
    let per_task_quota = tasks
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, base + usize::from(i < extra)))
        .collect();
    Ok(SamplingPlan {
        source,
        n,
        seed,
        per_task_quota,
    })
}

/// Seeded shuffle then prefix-take within each task. Output is grouped by
/// task in quota order, then draw order. `task_of` is ignored for
/// single-task sources.
pub fn draw<T: Clone>(
    plan: &SamplingPlan,
    items: &[T],
    task_of: impl Fn(&T) -> String,
) -> Result<Vec<T>, FinetuneError> {
    let single = plan.per_task_quota.len() == 1;
    let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        let task = if single { None } else { Some(task_of(item)) };
        let key = match &task {
            None => plan.per_task_quota.keys().next().expect("one task").as_str(),
            Some(t) => match plan.per_task_quota.get_key_value(t) {
                Some((k, _)) => k.as_str(),
                None => continue,
            },
        };
        by_task.entry(key).or_default().push(i);
    }
    let mut out = Vec::with_capacity(plan.n);
    for (task, &quota) in &plan.per_task_quota {
        let mut pool = by_task.remove(task.as_str()).unwrap_or_default();
        if pool.len() < quota {
            return Err(FinetuneError::InsufficientExamples {
                task: task.clone(),
                available: pool.len(),
                quota,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ fnv1a64(task.as_bytes()));
        pool.shuffle(&mut rng);
        out.extend(pool.into_iter().take(quota).map(|i| items[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStyle {
    #[default]
    Answer,
    AnswerWithRationale,
}

impl FromStr for TargetStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "answer" => Ok(TargetStyle::Answer),
            "answer_with_rationale" => Ok(TargetStyle::AnswerWithRationale),
            _ => Err(format!("unknown target {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub messages: Vec<Message>,
}

/// `A`, `B`, ..., `Z`, then `AA`, `AB`, ...
pub fn option_letter(index: usize) -> String {
    let mut n = index;
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ASCII letters")
}

pub fn mcq_record(item: &McqItem, index: usize, target: TargetStyle) -> Result<TrainRecord, FinetuneError> {
    let gold = item.options.get(item.answer_index).ok_or(FinetuneError::BadAnswer {
        index,
        answer: item.answer_index,
        options: item.options.len(),
    })?;
    let mut user = item.question.trim().to_string();
    user.push('\n');
    for (i, o) in item.options.iter().enumerate() {
        user.push_str(&format!("\n{}. {}", option_letter(i), o.trim()));
    }
    let mut answer = format!("{}. {}", option_letter(item.answer_index), gold.trim());
    if target == TargetStyle::AnswerWithRationale {
        let r = item
            .rationale
            .as_deref()
            .filter(|r| !r.trim().is_empty())
            .ok_or_else(|| FinetuneError::MissingRationale(format!("#{index} ({})", item.task)))?;
        answer.push_str(&format!("\n\nRationale: {}", r.trim()));
    }
    Ok(TrainRecord {
        messages: vec![Message::system(MCQ_SYSTEM), Message::user(user), Message::assistant(answer)],
    })
}

pub fn table_record(table: &InfoboxTable, example: &QaExample) -> Result<TrainRecord, FinetuneError> {
    let gold = example
        .gold_answers
        .first()
        .ok_or_else(|| FinetuneError::NoGold(example.id.clone()))?;
    let user = format!("Table:\n{}\n\nQuestion: {}", linearize(table).text, example.question);
    Ok(TrainRecord {
        messages: vec![
            Message::system(TABLE_SYSTEM),
            Message::user(user),
            Message::assistant(gold.clone()),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainFileSummary {
    pub path: PathBuf,
    pub count: usize,
    /// SHA-256 of the file bytes.
    pub digest: String,
}

/// Writes one `{"messages": [...]}` object per line.
pub fn emit_train_file(records: &[TrainRecord], path: impl AsRef<Path>) -> Result<TrainFileSummary, FinetuneError> {
    let path = path.as_ref();
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| FinetuneError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, &body).map_err(|source| FinetuneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(TrainFileSummary {
        path: path.to_path_buf(),
        count: records.len(),
        digest: sha256_hex(body.as_bytes()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAM: SampleSource = SampleSource::Aux(AuxDatasetKind::Tram);

    fn fixture(per_task: usize) -> Vec<McqItem> {
        TramTask::ALL
            .iter()
            .flat_map(|t| {
                (0..per_task).map(move |i| McqItem {
                    task: t.name().into(),
                    question: format!("{} q{i}", t.name()),
                    options: (0..t.arity()).map(|o| format!("o{o}")).collect(),
                    answer_index: 0,
                    rationale: None,
                })
            })
            .collect()
    }

    #[test]
    fn quota_examples() {
        let p = plan_even_sample(TRAM, 100, 0).unwrap();
        assert!(p.per_task_quota.values().all(|&q| q == 10));
        let p = plan_even_sample(TRAM, 10, 0).unwrap();
        assert!(p.per_task_quota.values().all(|&q| q == 1));
        let p = plan_even_sample(TRAM, 1003, 42).unwrap();
        let big: Vec<&str> = p
            .per_task_quota
            .iter()
            .filter(|(_, &q)| q == 101)
            .map(|(t, _)| t.as_str())
            .collect();
        assert_eq!(big, vec!["AmbiguityResolution", "Arithmetic", "Causality"]);
        assert_eq!(p.per_task_quota.values().filter(|&&q| q == 100).count(), 7);
        assert!(plan_even_sample(TRAM, 0, 0).is_err());
    }

    #[test]
    fn single_task_sources() {
        let p = plan_even_sample(SampleSource::TempTabQA, 7, 1).unwrap();
        assert_eq!(p.per_task_quota.len(), 1);
        let items: Vec<u32> = (0..20).collect();
        let d = draw(&p, &items, |_| "ignored".into()).unwrap();
        assert_eq!(d.len(), 7);
        assert_eq!("temporal_sequences".parse::<SampleSource>().unwrap().name(), "TemporalSequences");
    }

    #[test]
    fn draw_is_seeded_and_quota_exact() {
        let items = fixture(20);
        let p = plan_even_sample(TRAM, 100, 7).unwrap();
        let a = draw(&p, &items, |i| i.task.clone()).unwrap();
        let b = draw(&p, &items, |i| i.task.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        for t in TramTask::ALL {
            assert_eq!(a.iter().filter(|i| i.task == t.name()).count(), 10);
        }
        let c = draw(&plan_even_sample(TRAM, 100, 8).unwrap(), &items, |i| i.task.clone()).unwrap();
        assert_ne!(a, c);
        let p = plan_even_sample(TRAM, 300, 7).unwrap();
        assert!(matches!(
            draw(&p, &items, |i| i.task.clone()),
            Err(FinetuneError::InsufficientExamples { quota: 30, available: 20, .. })
        ));
    }

    #[test]
    fn causality_record() {
        let item = McqItem {
            task: "Causality".into(),
            question: "The seasons changed from summer to autumn. What's the more plausible RESULT?".into(),
            options: vec!["People evacuated their homes.".into(), "Leaves fell from the trees.".into()],
            answer_index: 1,
            rationale: None,
        };
        let r = mcq_record(&item, 0, TargetStyle::Answer).unwrap();
        assert_eq!(r.messages[2].content, "B. Leaves fell from the trees.");
        assert!(r.messages[1].content.ends_with("\nA. People evacuated their homes.\nB. Leaves fell from the trees."));
        assert!(matches!(
            mcq_record(&item, 0, TargetStyle::AnswerWithRationale),
            Err(FinetuneError::MissingRationale(_))
        ));
    }

    #[test]
    fn letters() {
        assert_eq!(option_letter(0), "A");
        assert_eq!(option_letter(3), "D");
        assert_eq!(option_letter(25), "Z");
        assert_eq!(option_letter(26), "AA");
    }

    #[test]
    fn emission_is_deterministic() {
        let items = fixture(10);
        let recs: Vec<TrainRecord> = items
            .iter()
            .enumerate()
            .map(|(i, it)| mcq_record(it, i, TargetStyle::Answer).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let a = emit_train_file(&recs, dir.path().join("a.jsonl")).unwrap();
        let b = emit_train_file(&recs, dir.path().join("b.jsonl")).unwrap();
        assert_eq!(a.count, 100);
        assert_eq!(a.digest, b.digest);
        let text = fs::read_to_string(&a.path).unwrap();
        assert_eq!(text.lines().count(), 100);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["messages"][0]["role"], "system");
        assert_eq!(first["messages"][2]["role"], "assistant");
    }
}
