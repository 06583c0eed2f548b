//! Acceptance checks. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use tabqa_core::analyze::{parse_clear_trace, verify_row_fidelity};
use tabqa_core::dataset::{load_tram, AuxDatasetKind, McqItem, QaExample, Split};
use tabqa_core::finetune::{draw, plan_even_sample, SampleSource};
use tabqa_core::harness::{execute, plan_run, read_results};
use tabqa_core::linearize::linearize;
use tabqa_core::perturb::{make_original, AliasPool};
use tabqa_core::prompt::{PromptFactory, PromptVariant};
use tabqa_core::report::{render_report, ReportOptions, ReportShape};
use tabqa_core::score::{aggregate, format_percent, GroupBy, GroupKey};
use tabqa_core::taxonomy::{build_enhanced_set, load_labels, summarize, DataIssueKind};

const TRANSCRIPT_LIMIT: Duration = Duration::from_secs(1);
const PERTURBATION_LIMIT: Duration = Duration::from_secs(30);
const REPLAY_LIMIT: Duration = Duration::from_secs(10);
const RANDOM_TABLES: usize = 1000;
/// Exact equality is required against the hand-tallied oracle.
const ORACLE_TOLERANCE: u64 = 0;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn transcripts() -> Outcome {
    let started = Instant::now();
    let mut summary = Vec::new();
    for (id, file, answer) in [
        ("head-bette-davis-1", "example1.txt", "6"),
        ("tail-dwight-bernard-1", "example2.txt", "1981"),
    ] {
        let text = fs::read_to_string(fixture(&format!("responses/{file}"))).map_err(|e| e.to_string())?;
        let trace = parse_clear_trace(&text).map_err(|e| e.to_string())?;
        ensure(trace.final_answer == answer, || format!("{file}: final answer {:?}", trace.final_answer))?;
        ensure(trace.sub_questions.len() == 2, || {
            format!("{file}: {} sub-questions", trace.sub_questions.len())
        })?;
        let (table, _) = appendix_pair(id);
        let fidelity = verify_row_fidelity(&trace, &linearize(&table));
        ensure(fidelity.rows_total > 0 && fidelity.faithful(), || {
            format!("{file}: unmatched rows {:?}", fidelity.unmatched)
        })?;
        summary.push(format!(
            "{file}: answer {answer}, 2 sub-questions, rows {}/{}",
            fidelity.rows_matched, fidelity.rows_total
        ));
    }
    let elapsed = started.elapsed();
    ensure(elapsed < TRANSCRIPT_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!("{}; {elapsed:.2?}", summary.join("; ")))
}

fn goldens() -> Outcome {
    let factory = PromptFactory::default();
    let mut sizes = Vec::new();
    for (id, file) in [
        ("head-bette-davis-1", "clear_bette_davis.txt"),
        ("tail-dwight-bernard-1", "clear_dwight_bernard.txt"),
    ] {
        let (table, ex) = appendix_pair(id);
        let bundle = factory
            .build_clear_prompt(&make_original(&table, &ex), PromptVariant::Original)
            .map_err(|e| e.to_string())?;
        let expected = fs::read(golden(file)).map_err(|e| e.to_string())?;
        let got = bundle.user_content().as_bytes();
        if got != expected.as_slice() {
            let at = got.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(got.len().min(expected.len()));
            return Err(format!("{file}: first difference at byte {at}"));
        }
        let text = String::from_utf8_lossy(&expected);
        for needle in [
            "between 2 and 4 smaller, more manageable sub-questions",
            "assume the current date is December, 2022",
        ] {
            ensure(text.contains(needle), || format!("{file}: missing {needle:?}"))?;
        }
        sizes.push(format!("{file} {} bytes", expected.len()));
    }
    Ok(format!("zero-byte diff ({})", sizes.join(", ")))
}

fn perturbation() -> Outcome {
    let started = Instant::now();
    let pool = AliasPool::default();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut ok = 0;
    let mut first_failure = None;
    for i in 0..RANDOM_TABLES {
        let (table, ex) = random_pair(&mut rng, i);
        match check_perturbations(&table, &ex, i as u64, &pool) {
            Ok(()) => ok += 1,
            Err(e) => {
                first_failure.get_or_insert(e);
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(ok == RANDOM_TABLES, || {
        format!("{ok}/{RANDOM_TABLES}; first failure: {}", first_failure.unwrap_or_default())
    })?;
    ensure(elapsed < PERTURBATION_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{ok}/{RANDOM_TABLES} restore identity, clean renames, table-free prompts; {elapsed:.2?}"
    ))
}

fn sampling() -> Outcome {
    let tram = SampleSource::Aux(AuxDatasetKind::Tram);
    let items: Vec<McqItem> = load_tram(fixture("tram_10_tasks.json"))
        .map_err(|e| e.to_string())?
        .iter()
        .map(McqItem::from)
        .collect();
    for n in 1..200 {
        let plan = plan_even_sample(tram, n, 17).map_err(|e| e.to_string())?;
        let q: Vec<usize> = plan.per_task_quota.values().copied().collect();
        let spread = q.iter().max().unwrap() - q.iter().min().unwrap();
        ensure(q.len() == 10 && q.iter().sum::<usize>() == n && spread <= 1, || {
            format!("n={n}: quotas {q:?}")
        })?;
        let a = draw(&plan, &items, |i| i.task.clone()).map_err(|e| e.to_string())?;
        let b = draw(&plan, &items, |i| i.task.clone()).map_err(|e| e.to_string())?;
        ensure(a == b && a.len() == n, || format!("n={n}: draw not reproducible"))?;
    }
    let plan = plan_even_sample(tram, 100, 17).map_err(|e| e.to_string())?;
    let drawn = draw(&plan, &items, |i| i.task.clone()).map_err(|e| e.to_string())?;
    let mut per_task: BTreeMap<&str, usize> = BTreeMap::new();
    for d in &drawn {
        *per_task.entry(d.task.as_str()).or_default() += 1;
    }
    ensure(per_task.len() == 10 && per_task.values().all(|&c| c == 10), || {
        format!("n=100 drew {per_task:?}")
    })?;
    Ok("n in 1..200 even within 1, n=100 gives 10 per task, draws reproducible".into())
}

fn taxonomy() -> Outcome {
    let labels = load_labels(fixture("taxonomy_labels.json")).map_err(|e| e.to_string())?;
    let s = summarize(labels.iter().map(|r| &r.label));
    let subs = [
        DataIssueKind::ExternalKnowledge,
        DataIssueKind::WrongAnnotationOrMultipleAnswers,
        DataIssueKind::AmbiguousOrIncomplete,
        DataIssueKind::OtherData,
    ]
    .map(|k| s.data_issue_count(k));
    ensure((s.total, s.incorrect, s.data_issues) == (1038, 339, 159), || {
        format!("total {} incorrect {} data issues {}", s.total, s.incorrect, s.data_issues)
    })?;
    ensure(subs == [75, 42, 14, 28], || format!("data-issue subcounts {subs:?}"))?;
    let examples: Vec<QaExample> = labels
        .iter()
        .map(|l| QaExample {
            id: l.id.clone(),
            table_id: "t".into(),
            question: "q".into(),
            gold_answers: vec!["a".into()],
            evidence_keys: vec![],
            split: Split::Head,
            labels: None,
        })
        .collect();
    let (kept, _) = build_enhanced_set(&examples, &labels).map_err(|e| e.to_string())?;
    ensure(kept.len() == 879, || format!("retained {}", kept.len()))?;
    Ok("1038 total / 339 incorrect / 159 data issues (75, 42, 14, 28); 879 retained".into())
}

fn replay() -> Outcome {
    let rig = synthetic_rig();
    let started = Instant::now();
    let (gw, transport) = offline_gateway(&rig.cache_dir());
    let mut run = plan_run(&rig.cfg, &gw).map_err(|e| e.to_string())?;
    let first = execute(&mut run, &rig.cfg, &gw).map_err(|e| e.to_string())?;
    ensure(first.done == 120 && first.failed == 0, || {
        format!("first run done {} failed {}", first.done, first.failed)
    })?;
    let results = read_results(&first.results_path).map_err(|e| e.to_string())?;
    let table = aggregate(&results, &[GroupBy::Technique, GroupBy::Task]);
    ensure(table.cells.len() == ORACLE.len(), || format!("{} cells", table.cells.len()))?;
    for (technique, task, correct) in ORACLE {
        let key = GroupKey {
            technique: Some(technique),
            task: Some(task),
            ..GroupKey::default()
        };
        let cell = table.cell(&key).map_err(|e| e.to_string())?;
        ensure(cell.correct.abs_diff(correct) <= ORACLE_TOLERANCE && cell.n == 20, || {
            format!("{technique} {task}: {}/{} vs oracle {correct}/20", cell.correct, cell.n)
        })?;
    }

    let (gw2, transport2) = offline_gateway(&rig.cache_dir());
    let mut rerun = plan_run(&rig.cfg, &gw2).map_err(|e| e.to_string())?;
    let second = execute(&mut rerun, &rig.cfg, &gw2).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(second.cache_hits == 120, || format!("rerun cache hits {}/120", second.cache_hits))?;
    let wire = transport.calls() + transport2.calls() + gw.network_calls() + gw2.network_calls();
    ensure(wire == 0, || format!("{wire} network operations"))?;
    ensure(elapsed < REPLAY_LIMIT, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "120 items match the oracle exactly; rerun 120/120 cache hits; 0 network operations; {elapsed:.2?}"
    ))
}

fn report() -> Outcome {
    ensure(format_percent(0.7799) == "77.99%", || format!("0.7799 -> {}", format_percent(0.7799)))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t1 = dir.path().join("finetune.jsonl");
    write_log(&t1, &finetune_table_cells());
    let items = read_results(&t1).map_err(|e| e.to_string())?;
    let r1 = render_report(&items, ReportShape::PromptsByFinetune, &ReportOptions::default())
        .map_err(|e| e.to_string())?;
    ensure(r1.markdown == FINETUNE_TABLE_MD, || format!("prompts-by-finetune:\n{}", r1.markdown))?;
    let t2 = dir.path().join("tasks.jsonl");
    write_log(&t2, &task_table_cells());
    let items = read_results(&t2).map_err(|e| e.to_string())?;
    let r2 = render_report(&items, ReportShape::TasksByPrompt, &ReportOptions::default())
        .map_err(|e| e.to_string())?;
    ensure(r2.markdown == TASK_TABLE_MD, || format!("tasks-by-prompt:\n{}", r2.markdown))?;
    ensure(r2.markdown.contains("Missing Relevant Rows (↓)"), || "no ↓ on Missing Relevant Rows".into())?;
    Ok("both shapes match; 0.7799 renders as 77.99%; Missing Relevant Rows carries ↓".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("transcript fixtures", transcripts),
        ("golden prompts", goldens),
        ("perturbation suite", perturbation),
        ("sampling suite", sampling),
        ("taxonomy fixture", taxonomy),
        ("end-to-end replay", replay),
        ("report formatting", report),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
