//! Experiment matrix planning and resumable execution.
//!
//! A run is the cross product models × techniques × tasks × variants ×
//! examples (plus absence-detection controls). Every item moves from pending
//! to done or failed; the manifest is rewritten after each item and scored
//! items are appended to `results.jsonl`.

mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{
    classify_abstention_with, extract_final_answer, parse_clear_trace, verify_row_fidelity,
    AbstentionLexicon, ClearTrace, FidelityReport,
};
use crate::dataset::{load_qa, load_tables, LoadError, QaExample, TableIndex};
use crate::digest::json_digest;
use crate::gateway::{ChatRequest, Gateway};
use crate::linearize::linearize;
use crate::perturb::{fnv1a64, make_absence_control, perturb, AliasPool, PerturbedInstance, TaskKind};
use crate::prompt::{load_exemplars, register_exemplars, ExemplarStore, PromptFactory, Technique, Templates};
use crate::score::{exact_match_with, score_absence, FidelitySummary, ItemKey, Normalizer, ScoredItem};

pub use config::{DatasetPaths, ModelSpec, Overrides, RunConfig, REPLAY_PROFILE};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACES_FILE: &str = "traces.jsonl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] LoadError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Corrupt(String),
}

impl HarnessError {
    /// Process exit status: 1 for configuration problems, 3 for fatal IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Dataset(_) => 1,
            HarnessError::Io { .. } | HarnessError::Corrupt(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub key: ItemKey,
    pub status: ItemStatus,
    #[serde(default)]
    pub request_digest: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub elapsed_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub total: usize,
    pub pending: usize,
    pub done: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timings {
    pub planned_at: String,
    #[serde(default)]
    pub started_at: Option<String>,
    #[serde(default)]
    pub finished_at: Option<String>,
    #[serde(default)]
    pub elapsed_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub counts: StatusCounts,
    pub timings: Timings,
    pub items: Vec<ManifestItem>,
}

impl RunManifest {
    pub fn recount(&mut self) {
        let mut c = StatusCounts {
            total: self.items.len(),
            ..Default::default()
        };
        for i in &self.items {
            match i.status {
                ItemStatus::Pending => c.pending += 1,
                ItemStatus::Done => c.done += 1,
                ItemStatus::Failed => c.failed += 1,
            }
        }
        self.counts = c;
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Corrupt(format!("{}: {e}", path.display())))
    }
}

/// Everything needed to run and score one item.
#[derive(Debug, Clone)]
pub struct WorkItem {
    pub key: ItemKey,
    pub profile: String,
    pub instance: Option<PerturbedInstance>,
    pub request: Option<ChatRequest>,
    pub gold_answers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub manifest: RunManifest,
    pub work: Vec<WorkItem>,
}

/// Examples chosen as absence-detection controls: `round(ratio * n)` of
/// them (capped at `n`), ranked by a seeded hash of the example id.
pub fn select_controls(examples: &[QaExample], ratio: f64, seed: u64) -> HashSet<String> {
    let k = ((ratio * examples.len() as f64).round() as usize).min(examples.len());
    let mut ranked: Vec<(u64, &str)> = examples
        .iter()
        .map(|e| {
            let mut bytes = seed.to_le_bytes().to_vec();
            bytes.extend_from_slice(e.id.as_bytes());
            (fnv1a64(&bytes), e.id.as_str())
        })
        .collect();
    ranked.sort();
    ranked.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

fn build_factory(cfg: &RunConfig, tables: &TableIndex) -> Result<PromptFactory, HarnessError> {
    let templates = match &cfg.templates_dir {
        Some(dir) => Templates::load_dir(dir).map_err(|e| HarnessError::Config(e.to_string()))?,
        None => Templates::builtin(),
    };
    let mut store = ExemplarStore::default();
    if let Some(path) = &cfg.dataset.exemplars {
        let all = load_exemplars(path, tables, Technique::FsCot).map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut by_technique: BTreeMap<Technique, Vec<_>> = BTreeMap::new();
        for ex in all {
            by_technique.entry(ex.technique).or_default().push(ex);
        }
        for (t, exs) in by_technique {
            register_exemplars(&mut store, t, exs).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
    }
    for t in &cfg.techniques {
        if t.is_few_shot() && store.get(*t).is_empty() {
            return Err(HarnessError::Config(format!("{t} needs exemplars (dataset.exemplars)")));
        }
    }
    Ok(PromptFactory {
        templates,
        exemplars: store,
        k: cfg.few_shot_k,
        fcot_style: cfg.fcot_style,
    })
}

/// Enumerates the run deterministically, renders every request and marks
/// items whose response is already cached as done.
pub fn plan_run(cfg: &RunConfig, gateway: &Gateway) -> Result<PlannedRun, HarnessError> {
    cfg.validate()?;
    let tables = TableIndex::new(load_tables(&cfg.dataset.tables)?);
    let examples: Vec<QaExample> = load_qa(&cfg.dataset.qa, &tables)?
        .into_iter()
        .filter(|e| cfg.splits.is_empty() || cfg.splits.contains(&e.split))
        .collect();
    let pool = match &cfg.dataset.alias_pool {
        Some(p) => AliasPool::load(p).map_err(|e| HarnessError::Config(e.to_string()))?,
        None => AliasPool::default(),
    };
    let factory = build_factory(cfg, &tables)?;
    let controls = select_controls(&examples, cfg.absence_control_ratio, cfg.seed);

    let mut instances: HashMap<(TaskKind, bool, usize), Result<PerturbedInstance, String>> = HashMap::new();
    let mut instance = |task: TaskKind, control: bool, i: usize| {
        instances
            .entry((task, control, i))
            .or_insert_with(|| {
                let ex = &examples[i];
                let table = tables.get(&ex.table_id).expect("validated reference");
                if control {
                    let mut inst = make_absence_control(table, ex);
                    inst.seed = cfg.seed;
                    Ok(inst)
                } else {
                    perturb(task, table, ex, cfg.seed, &pool).map_err(|e| e.to_string())
                }
            })
            .clone()
    };

    let mut work = Vec::new();
    let mut items = Vec::new();
    for model in &cfg.models {
        for &technique in &cfg.techniques {
            for &task in &cfg.tasks {
                for &variant in &cfg.variants {
                    if variant == crate::prompt::PromptVariant::Updated && !task.is_row_deletion() {
                        continue;
                    }
                    for (i, ex) in examples.iter().enumerate() {
                        let mut flags = vec![false];
                        if task == TaskKind::InformationAbsenceDetection && controls.contains(&ex.id) {
                            flags.push(true);
                        }
                        for control in flags {
                            let key = ItemKey {
                                example_id: ex.id.clone(),
                                task,
                                technique,
                                variant,
                                model_id: model.model_id.clone(),
                                finetune_tag: model.finetune_tag.clone(),
                                control,
                            };
                            let inst = instance(task, control, i);
                            let rendered = inst.clone().and_then(|inst| {
                                factory.build(&inst, technique, variant).map_err(|e| e.to_string())
                            });
                            let (request, status, error) = match rendered {
                                Ok(bundle) => {
                                    let req = ChatRequest::from_bundle(
                                        &model.model_id,
                                        &bundle,
                                        cfg.temperature,
                                        cfg.max_tokens,
                                    );
                                    let status = if gateway.cache().contains(&req.digest()) {
                                        ItemStatus::Done
                                    } else {
                                        ItemStatus::Pending
                                    };
                                    (Some(req), status, None)
                                }
                                Err(e) => (None, ItemStatus::Failed, Some(e)),
                            };
                            items.push(ManifestItem {
                                key: key.clone(),
                                status,
                                request_digest: request.as_ref().map(ChatRequest::digest),
                                error,
                                elapsed_ms: None,
                            });
                            work.push(WorkItem {
                                key,
                                profile: model.profile.clone(),
                                instance: inst.ok(),
                                request,
                                gold_answers: ex.gold_answers.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    let mut manifest = RunManifest {
        config_digest: json_digest(cfg),
        counts: StatusCounts::default(),
        timings: Timings {
            planned_at: chrono::Utc::now().to_rfc3339(),
            ..Default::default()
        },
        items,
    };
    manifest.recount();
    Ok(PlannedRun { manifest, work })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub key: ItemKey,
    pub trace: ClearTrace,
    pub fidelity: Option<FidelityReport>,
}

/// Scores one response. Absence detection is scored on abstention; every
/// other task on exact match against the gold answers.
pub fn score_response(
    item: &WorkItem,
    text: &str,
    normalizer: Normalizer,
    lexicon: &AbstentionLexicon,
) -> (ScoredItem, Option<TraceRecord>) {
    let prediction = extract_final_answer(text).unwrap_or_default();
    let abstained = classify_abstention_with(text, lexicon);
    let em = if item.key.task == TaskKind::InformationAbsenceDetection {
        score_absence(abstained, !item.key.control)
    } else {
        exact_match_with(&prediction, &item.gold_answers, normalizer)
    };
    let mut trace_record = None;
    let mut fidelity = None;
    if item.key.technique == Technique::Clear {
        if let Ok(trace) = parse_clear_trace(text) {
            let report = item
                .instance
                .as_ref()
                .and_then(|i| i.table.as_ref())
                .map(|t| verify_row_fidelity(&trace, &linearize(t)));
            fidelity = report.as_ref().map(FidelitySummary::from);
            trace_record = Some(TraceRecord {
                key: item.key.clone(),
                trace,
                fidelity: report,
            });
        }
    }
    let k = &item.key;
    let scored = ScoredItem {
        example_id: k.example_id.clone(),
        task: k.task,
        technique: k.technique,
        variant: k.variant,
        model_id: k.model_id.clone(),
        finetune_tag: k.finetune_tag.clone(),
        control: k.control,
        prediction,
        abstained,
        em,
        fidelity,
    };
    (scored, trace_record)
}

/// Reads a results log. A missing file is empty; a malformed line is an error.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ScoredItem>, HarnessError> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::Corrupt(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub done: usize,
    pub failed: usize,
    /// Items answered from the response cache.
    pub cache_hits: usize,
    /// Wire calls made during this execution.
    pub network_calls: usize,
    /// Lines appended to the results log.
    pub appended: usize,
    pub results_path: PathBuf,
    pub manifest_path: PathBuf,
}

struct Sink {
    results: std::fs::File,
    results_path: PathBuf,
    traces: std::fs::File,
    traces_path: PathBuf,
    manifest_path: PathBuf,
    logged: HashSet<ItemKey>,
}

impl Sink {
    fn open(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let results_path = dir.join(RESULTS_FILE);
        let logged = read_results(&results_path)?.iter().map(ScoredItem::key).collect();
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(io_err(p))
        };
        let traces_path = dir.join(TRACES_FILE);
        Ok(Sink {
            results: open(&results_path)?,
            traces: open(&traces_path)?,
            results_path,
            traces_path,
            manifest_path: dir.join(MANIFEST_FILE),
            logged,
        })
    }

    fn append(&mut self, scored: &ScoredItem, trace: Option<&TraceRecord>) -> Result<(), HarnessError> {
        let line = serde_json::to_string(scored).expect("scored item serializes");
        writeln!(self.results, "{line}").map_err(io_err(&self.results_path))?;
        if let Some(t) = trace {
            let line = serde_json::to_string(t).expect("trace serializes");
            writeln!(self.traces, "{line}").map_err(io_err(&self.traces_path))?;
        }
        self.logged.insert(scored.key());
        Ok(())
    }
}

/// Runs every pending item, re-reads done items from the cache so that each
/// one appears in the results log, and checkpoints after every item.
/// Item failures are recorded in the manifest, never returned.
pub fn execute(run: &mut PlannedRun, cfg: &RunConfig, gateway: &Gateway) -> Result<RunSummary, HarnessError> {
    let started = Instant::now();
    let calls_before = gateway.network_calls();
    let mut sink = Sink::open(&cfg.output_dir)?;
    let mut lexicon = AbstentionLexicon::default();
    lexicon.extend(cfg.abstention_terms.iter().cloned());
    run.manifest.timings.started_at = Some(chrono::Utc::now().to_rfc3339());
    run.manifest.recount();
    run.manifest.write(&sink.manifest_path)?;

    let mut summary = RunSummary {
        results_path: sink.results_path.clone(),
        manifest_path: sink.manifest_path.clone(),
        ..Default::default()
    };

    let finish = |run: &mut PlannedRun,
                      sink: &mut Sink,
                      summary: &mut RunSummary,
                      idx: usize,
                      outcome: Result<(String, bool), String>,
                      elapsed_ms: u64|
     -> Result<(), HarnessError> {
        let item = &run.work[idx];
        let entry = &mut run.manifest.items[idx];
        entry.elapsed_ms = Some(elapsed_ms);
        match outcome {
            Ok((text, cached)) => {
                if cached {
                    summary.cache_hits += 1;
                }
                if !sink.logged.contains(&item.key) {
                    let (scored, trace) = score_response(item, &text, cfg.normalizer, &lexicon);
                    sink.append(&scored, trace.as_ref())?;
                    summary.appended += 1;
                }
                entry.status = ItemStatus::Done;
                entry.error = None;
            }
            Err(e) => {
                entry.status = ItemStatus::Failed;
                entry.error = Some(e);
            }
        }
        run.manifest.recount();
        run.manifest.write(&sink.manifest_path)
    };

    for idx in 0..run.work.len() {
        if run.manifest.items[idx].status != ItemStatus::Done {
            continue;
        }
        let t0 = Instant::now();
        let digest = run.manifest.items[idx].request_digest.clone().unwrap_or_default();
        let outcome = match gateway.cache().get(&digest) {
            Ok(Some(entry)) => Ok((entry.response.text, true)),
            Ok(None) => Err(format!("cache entry {digest} disappeared")),
            Err(e) => Err(e.to_string()),
        };
        finish(run, &mut sink, &mut summary, idx, outcome, t0.elapsed().as_millis() as u64)?;
    }

    let mut pending_by_profile: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (idx, w) in run.work.iter().enumerate() {
        if run.manifest.items[idx].status == ItemStatus::Pending {
            pending_by_profile.entry(w.profile.clone()).or_default().push(idx);
        }
    }
    let chunk = cfg.max_in_flight.max(1);
    for (profile_name, indices) in pending_by_profile {
        let profile = cfg
            .profile(&profile_name)
            .ok_or_else(|| HarnessError::Config(format!("unknown profile {profile_name}")))?
            .clone();
        for batch in indices.chunks(chunk) {
            let requests: Vec<ChatRequest> = batch
                .iter()
                .map(|&i| run.work[i].request.clone().expect("pending items have requests"))
                .collect();
            let t0 = Instant::now();
            let results = gateway.run_batch(&profile, &requests, cfg.max_in_flight);
            let elapsed = t0.elapsed().as_millis() as u64;
            for (&idx, (_, result)) in batch.iter().zip(results) {
                let outcome = result
                    .map(|r| (r.text, r.cached))
                    .map_err(|e| e.to_string());
                finish(run, &mut sink, &mut summary, idx, outcome, elapsed)?;
            }
        }
    }

    run.manifest.timings.finished_at = Some(chrono::Utc::now().to_rfc3339());
    run.manifest.timings.elapsed_ms = Some(started.elapsed().as_millis() as u64);
    run.manifest.recount();
    run.manifest.write(&sink.manifest_path)?;
    summary.total = run.manifest.counts.total;
    summary.done = run.manifest.counts.done;
    summary.failed = run.manifest.counts.failed;
    summary.network_calls = gateway.network_calls() - calls_before;
    Ok(summary)
}

/// Scores every cached item of a planned run again, for instance under a
/// different normalizer. Never touches the network.
pub fn rescore(run: &PlannedRun, cfg: &RunConfig, gateway: &Gateway) -> Result<Vec<ScoredItem>, HarnessError> {
    let mut lexicon = AbstentionLexicon::default();
    lexicon.extend(cfg.abstention_terms.iter().cloned());
    let mut out = Vec::new();
    for (item, entry) in run.work.iter().zip(&run.manifest.items) {
        let Some(digest) = &entry.request_digest else { continue };
        let cached = gateway
            .cache()
            .get(digest)
            .map_err(|e| HarnessError::Corrupt(e.to_string()))?;
        if let Some(c) = cached {
            out.push(score_response(item, &c.response.text, cfg.normalizer, &lexicon).0);
        }
    }
    Ok(out)
}
