mod common;

use common::*;
use tabqa_core::harness::read_results;
use tabqa_core::report::{render_report, task_label, write_report, ReportError, ReportOptions, ReportShape};
use tabqa_core::perturb::TaskKind;
use tabqa_core::score::{format_percent, percent_from_counts};

#[test]
fn percent_formatting() {
    assert_eq!(format_percent(0.7799), "77.99%");
    assert_eq!(percent_from_counts(7799, 10_000), "77.99%");
    assert_eq!(percent_from_counts(1, 3), "33.33%");
    assert_eq!(percent_from_counts(2, 3), "66.67%");
    assert_eq!(percent_from_counts(1, 8), "12.50%");
}

#[test]
fn arrows_follow_metric_direction() {
    assert_eq!(task_label(TaskKind::MissingRelevantRows), "Missing Relevant Rows (↓)");
    assert_eq!(task_label(TaskKind::WithoutTable), "Without Table (↓)");
    assert_eq!(task_label(TaskKind::OriginalTable), "Original Table (↑)");
    assert_eq!(task_label(TaskKind::InformationAbsenceDetection), "Information Absence Detection (↑)");
}

#[test]
fn prompts_by_finetune_shape() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("results.jsonl");
    write_log(&log, &finetune_table_cells());
    let items = read_results(&log).unwrap();
    let report = render_report(&items, ReportShape::PromptsByFinetune, &ReportOptions::default()).unwrap();
    assert_eq!(report.markdown, FINETUNE_TABLE_MD);
    assert!(report.csv.starts_with("Model,Prompt,No FT,TRAM 100,"));
    assert!(report.csv.contains("GPT-3.5 turbo,C.L.E.A.R,77.99%,77.92%,,,"));
}

#[test]
fn tasks_by_prompt_shape() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("results.jsonl");
    write_log(&log, &task_table_cells());
    let items = read_results(&log).unwrap();
    let report = render_report(&items, ReportShape::TasksByPrompt, &ReportOptions::default()).unwrap();
    assert_eq!(report.markdown, TASK_TABLE_MD);
}

#[test]
fn rendering_is_pure() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("results.jsonl");
    write_log(&log, &task_table_cells());
    let items = read_results(&log).unwrap();
    let a = render_report(&items, ReportShape::TasksByPrompt, &ReportOptions::default()).unwrap();
    let (md, csv) = write_report(&a, dir.path().join("r1")).unwrap();
    let b = render_report(&read_results(&log).unwrap(), ReportShape::TasksByPrompt, &ReportOptions::default()).unwrap();
    let (md2, csv2) = write_report(&b, dir.path().join("r2")).unwrap();
    assert_eq!(std::fs::read(md).unwrap(), std::fs::read(md2).unwrap());
    assert_eq!(std::fs::read(csv).unwrap(), std::fs::read(csv2).unwrap());
}

#[test]
fn duplicate_lines_resolve_last_wins() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("results.jsonl");
    write_log(&log, &task_table_cells());
    let mut items = read_results(&log).unwrap();
    let mut flipped = items[0].clone();
    flipped.em = 1 - flipped.em;
    items.push(flipped);
    let report = render_report(&items, ReportShape::TasksByPrompt, &ReportOptions::default()).unwrap();
    assert!(report.markdown.contains("| 65.55% |"));
}

#[test]
fn empty_log_is_rejected() {
    assert!(matches!(
        render_report(&[], ReportShape::PromptsByFinetune, &ReportOptions::default()),
        Err(ReportError::EmptyResults)
    ));
}
