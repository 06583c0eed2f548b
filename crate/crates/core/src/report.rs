//! Markdown and CSV reports over a results log.
//!
//! Two shapes are supported:
//!
//! * `prompts-by-finetune`: one block per model, one row per technique, one
//!   column per fine-tuning tag. The best cell in each column of a block is
//!   bolded.
//! * `tasks-by-prompt`: one row per model and task (with its ↑/↓ direction),
//!   one column per technique inside an Original and an Updated block. The
//!   best cell per row and block is bolded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::perturb::TaskKind;
use crate::prompt::{PromptVariant, Technique};
use crate::score::{dedupe_last_wins, percent_from_counts, MetricCell, MetricDirection, ScoredItem, NO_FINETUNE};

/// Fine-tuning columns always shown, in this order, by `prompts-by-finetune`.
pub const FINETUNE_COLUMNS: [&str; 5] = [NO_FINETUNE, "TRAM 100", "TRAM 1000", "TempTabQA 100", "TempTabQA 1000"];

/// Row order of `prompts-by-finetune`.
pub const TECHNIQUE_ROWS: [Technique; 7] = Technique::ALL;

/// Column order of `tasks-by-prompt`.
pub const TECHNIQUE_COLUMNS: [Technique; 7] = [
    Technique::ZsCot,
    Technique::FsCot,
    Technique::ZsFcot,
    Technique::FsFcot,
    Technique::ZsPot,
    Technique::FsPot,
    Technique::Clear,
];

const MISSING: &str = "-";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no results to report")]
    EmptyResults,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportShape {
    PromptsByFinetune,
    TasksByPrompt,
}

impl ReportShape {
    pub fn name(self) -> &'static str {
        match self {
            ReportShape::PromptsByFinetune => "prompts-by-finetune",
            ReportShape::TasksByPrompt => "tasks-by-prompt",
        }
    }
}

impl fmt::Display for ReportShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReportShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prompts-by-finetune" => Ok(ReportShape::PromptsByFinetune),
            "tasks-by-prompt" => Ok(ReportShape::TasksByPrompt),
            _ => Err(format!("unknown report shape {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOptions {
    /// Task shown by `prompts-by-finetune`.
    pub task: TaskKind,
    /// Variant shown by `prompts-by-finetune`.
    pub variant: PromptVariant,
    /// Fine-tuning tag shown by `tasks-by-prompt`.
    pub finetune_tag: String,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            task: TaskKind::OriginalTable,
            variant: PromptVariant::Original,
            finetune_tag: NO_FINETUNE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub shape: ReportShape,
    pub markdown: String,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Grid {
    header: Vec<String>,
    /// Model block headers interleaved with data rows.
    rows: Vec<GridRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum GridRow {
    Block(String),
    Data { labels: Vec<String>, cells: Vec<Option<MetricCell>>, bold: Vec<bool> },
}

/// Orders cells by accuracy using exact cross-multiplication.
fn cmp_cells(a: &MetricCell, b: &MetricCell) -> std::cmp::Ordering {
    (u128::from(a.correct) * u128::from(b.n)).cmp(&(u128::from(b.correct) * u128::from(a.n)))
}

/// Marks the best cells among `idx` (all ties).
fn mark_best(cells: &[Option<MetricCell>], idx: &[usize], dir: MetricDirection, bold: &mut [bool]) {
    let mut best: Option<MetricCell> = None;
    for &i in idx {
        if let Some(c) = cells[i] {
            let better = match best {
                None => true,
                Some(b) => match dir {
                    MetricDirection::HigherBetter => cmp_cells(&c, &b).is_gt(),
                    MetricDirection::LowerBetter => cmp_cells(&c, &b).is_lt(),
                },
            };
            if better {
                best = Some(c);
            }
        }
    }
    if let Some(b) = best {
        for &i in idx {
            if cells[i].is_some_and(|c| cmp_cells(&c, &b).is_eq()) {
                bold[i] = true;
            }
        }
    }
}

fn tally<'a>(items: impl Iterator<Item = &'a ScoredItem>, key: impl Fn(&ScoredItem) -> (String, String, String)) -> BTreeMap<(String, String, String), MetricCell> {
    let mut m: BTreeMap<_, MetricCell> = BTreeMap::new();
    for i in items {
        m.entry(key(i)).or_default().add(i);
    }
    m
}

fn model_order(items: &[ScoredItem]) -> Vec<String> {
    let mut seen = Vec::new();
    for i in items {
        if !seen.contains(&i.model_id) {
            seen.push(i.model_id.clone());
        }
    }
    seen
}

fn prompts_by_finetune(items: &[ScoredItem], opts: &ReportOptions) -> Grid {
    let selected: Vec<&ScoredItem> = items
        .iter()
        .filter(|i| i.task == opts.task && i.variant == opts.variant)
        .collect();
    let cells = tally(selected.iter().copied(), |i| {
        (i.model_id.clone(), i.technique.code().to_string(), i.finetune_tag.clone())
    });
    let extra: BTreeSet<&str> = selected
        .iter()
        .map(|i| i.finetune_tag.as_str())
        .filter(|t| !FINETUNE_COLUMNS.contains(t))
        .collect();
    let columns: Vec<String> = FINETUNE_COLUMNS
        .iter()
        .copied()
        .chain(extra)
        .map(String::from)
        .collect();
    let techniques: Vec<Technique> = TECHNIQUE_ROWS
        .into_iter()
        .filter(|t| selected.iter().any(|i| i.technique == *t))
        .collect();
    let dir = MetricDirection::of(opts.task);

    let mut header = vec!["Prompt".to_string()];
    header.extend(columns.iter().cloned());
    let mut rows = Vec::new();
    let owned: Vec<ScoredItem> = selected.into_iter().cloned().collect();
    for model in model_order(&owned) {
        rows.push(GridRow::Block(model.clone()));
        let block: Vec<Vec<Option<MetricCell>>> = techniques
            .iter()
            .map(|t| {
                columns
                    .iter()
                    .map(|c| cells.get(&(model.clone(), t.code().to_string(), c.clone())).copied())
                    .collect()
            })
            .collect();
        let mut bold = vec![vec![false; columns.len()]; techniques.len()];
        for c in 0..columns.len() {
            let column: Vec<Option<MetricCell>> = block.iter().map(|r| r[c]).collect();
            let mut marks = vec![false; column.len()];
            let idx: Vec<usize> = (0..column.len()).collect();
            mark_best(&column, &idx, dir, &mut marks);
            for (r, m) in marks.into_iter().enumerate() {
                bold[r][c] = m;
            }
        }
        for ((t, cells), bold) in techniques.iter().zip(block).zip(bold) {
            rows.push(GridRow::Data {
                labels: vec![t.display_name().to_string()],
                cells,
                bold,
            });
        }
    }
    Grid { header, rows }
}

fn short_name(t: Technique) -> String {
    t.display_name().replacen("S. ", "S ", 1)
}

pub fn task_label(task: TaskKind) -> String {
    format!("{} ({})", task.display_name(), MetricDirection::of(task).arrow())
}

fn tasks_by_prompt(items: &[ScoredItem], opts: &ReportOptions) -> Grid {
    let selected: Vec<ScoredItem> = items
        .iter()
        .filter(|i| i.finetune_tag == opts.finetune_tag)
        .cloned()
        .collect();
    let cells = tally(selected.iter(), |i| {
        (
            format!("{}\u{0}{:?}", i.model_id, i.task),
            i.variant.to_string(),
            i.technique.code().to_string(),
        )
    });
    let techniques: Vec<Technique> = TECHNIQUE_COLUMNS
        .into_iter()
        .filter(|t| selected.iter().any(|i| i.technique == *t))
        .collect();
    let variants: Vec<PromptVariant> = [PromptVariant::Original, PromptVariant::Updated]
        .into_iter()
        .filter(|v| selected.iter().any(|i| i.variant == *v))
        .collect();
    let tasks: Vec<TaskKind> = TaskKind::ALL
        .into_iter()
        .filter(|t| selected.iter().any(|i| i.task == *t))
        .collect();

    let mut header = vec!["Model".to_string(), "Task".to_string()];
    for v in &variants {
        for t in &techniques {
            header.push(format!("{v}: {}", short_name(*t)));
        }
    }
    let mut rows = Vec::new();
    for model in model_order(&selected) {
        for &task in &tasks {
            let row_key = format!("{model}\u{0}{task:?}");
            let mut row_cells = Vec::new();
            let mut blocks = Vec::new();
            for v in &variants {
                let start = row_cells.len();
                for t in &techniques {
                    row_cells.push(cells.get(&(row_key.clone(), v.to_string(), t.code().to_string())).copied());
                }
                blocks.push((start..row_cells.len()).collect::<Vec<_>>());
            }
            if row_cells.iter().all(Option::is_none) {
                continue;
            }
            let mut bold = vec![false; row_cells.len()];
            for idx in &blocks {
                mark_best(&row_cells, idx, MetricDirection::of(task), &mut bold);
            }
            rows.push(GridRow::Data {
                labels: vec![model.clone(), task_label(task)],
                cells: row_cells,
                bold,
            });
        }
    }
    Grid { header, rows }
}

fn md_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

impl Grid {
    fn markdown(&self) -> String {
        let mut out = md_row(&self.header);
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for row in &self.rows {
            match row {
                GridRow::Block(name) => {
                    let mut cells = vec![String::new(); self.header.len()];
                    cells[0] = format!("**{name}**");
                    out.push_str(&md_row(&cells));
                }
                GridRow::Data { labels, cells, bold } => {
                    let mut out_cells = labels.clone();
                    for (c, b) in cells.iter().zip(bold) {
                        out_cells.push(match c {
                            None => MISSING.to_string(),
                            Some(c) if *b => format!("**{}**", c.display()),
                            Some(c) => c.display(),
                        });
                    }
                    out.push_str(&md_row(&out_cells));
                }
            }
        }
        out
    }

    fn csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.header.clone();
        let has_blocks = self.rows.iter().any(|r| matches!(r, GridRow::Block(_)));
        if has_blocks {
            header.insert(0, "Model".into());
        }
        w.write_record(&header)?;
        let mut block = String::new();
        for row in &self.rows {
            match row {
                GridRow::Block(name) => block = name.clone(),
                GridRow::Data { labels, cells, .. } => {
                    let mut rec = Vec::new();
                    if has_blocks {
                        rec.push(block.clone());
                    }
                    rec.extend(labels.iter().cloned());
                    rec.extend(cells.iter().map(|c| match c {
                        None => String::new(),
                        Some(c) => percent_from_counts(c.correct, c.n),
                    }));
                    w.write_record(&rec)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Renders one report shape. Duplicate result keys resolve to the last line.
pub fn render_report(results: &[ScoredItem], shape: ReportShape, opts: &ReportOptions) -> Result<RenderedReport, ReportError> {
    if results.is_empty() {
        return Err(ReportError::EmptyResults);
    }
    let items = dedupe_last_wins(results.iter().cloned());
    let grid = match shape {
        ReportShape::PromptsByFinetune => prompts_by_finetune(&items, opts),
        ReportShape::TasksByPrompt => tasks_by_prompt(&items, opts),
    };
    Ok(RenderedReport {
        shape,
        markdown: grid.markdown(),
        csv: grid.csv()?,
    })
}

/// Writes `{shape}.md` and `{shape}.csv` into `dir`.
pub fn write_report(report: &RenderedReport, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), ReportError> {
    let dir = dir.as_ref();
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| ReportError::Io { path: p, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let md = dir.join(format!("{}.md", report.shape));
    let csv = dir.join(format!("{}.csv", report.shape));
    fs::write(&md, &report.markdown).map_err(io(&md))?;
    fs::write(&csv, &report.csv).map_err(io(&csv))?;
    Ok((md, csv))
}
