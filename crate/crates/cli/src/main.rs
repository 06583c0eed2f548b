use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tabqa_core::dataset::{load_bigbench_mc, load_qa, load_tables, load_tram, tables_to_json, McqItem, TableIndex};
use tabqa_core::finetune::{
    draw, emit_train_file, mcq_record, plan_even_sample, table_record, SampleSource, TargetStyle,
};
use tabqa_core::gateway::{Gateway, ResponseCache};
use tabqa_core::harness::{execute, plan_run, read_results, rescore, HarnessError, Overrides, RunConfig};
use tabqa_core::perturb::{perturb, AliasPool, TaskKind};
use tabqa_core::report::{render_report, write_report, ReportOptions, ReportShape};
use tabqa_core::score::{aggregate, dedupe_last_wins, GroupBy, Normalizer};
use tabqa_core::taxonomy::{build_enhanced_set, load_labels, summarize};

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "tabqa", version, about = "Temporal table QA evaluation harness")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    /// Serve every model from replay fixtures in this directory.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    #[arg(long, global = true)]
    alias_pool: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate tables and questions and write the normalized tables.
    Ingest {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write perturbed instances for one task as JSON lines.
    Perturb {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan and execute the configured matrix.
    Run {
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        normalizer: Option<Normalizer>,
    },
    /// Aggregate accuracy from a results log, or rescore cached responses.
    Score {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        normalizer: Option<Normalizer>,
        /// Comma-separated axes: model, technique, task, variant, finetune_tag.
        #[arg(long, default_value = "model,technique,task,variant,finetune_tag")]
        group_by: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render report tables from a results log.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        shape: ReportShape,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "OriginalTable")]
        task: String,
        #[arg(long, default_value = "No FT")]
        finetune_tag: String,
    },
    /// Build a fine-tuning file with even per-task sampling.
    FinetunePrep {
        #[arg(long)]
        source: SampleSource,
        #[arg(long)]
        input: PathBuf,
        /// Table file, for TempTabQA sources.
        #[arg(long)]
        tables: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "answer")]
        target: TargetStyle,
    },
    /// Error-taxonomy utilities.
    Taxonomy {
        #[command(subcommand)]
        action: TaxonomyAction,
    },
}

#[derive(Subcommand)]
enum TaxonomyAction {
    /// Count labels per category.
    Summarize {
        #[arg(long)]
        labels: PathBuf,
    },
    /// Drop data-issue examples and write the enhanced set.
    Filter {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn io(e: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_IO,
            message: e.to_string(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<u8, Failure>;

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn load_config(g: &Global, output_dir: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let path = g.config.as_ref().ok_or_else(|| Failure::config("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&Overrides {
        cache_dir: g.cache_dir.clone(),
        output_dir,
        seed: g.seed,
        max_in_flight: g.max_in_flight,
        replay: g.replay.clone(),
    });
    if let Some(p) = &g.alias_pool {
        cfg.dataset.alias_pool = Some(p.clone());
    }
    Ok(cfg)
}

fn gateway(cache_dir: &Path) -> Result<Gateway, Failure> {
    Gateway::with_http(ResponseCache::new(cache_dir)).map_err(Failure::config)
}

fn parse_task(s: &str) -> Result<TaskKind, Failure> {
    TaskKind::ALL
        .into_iter()
        .find(|t| t.to_string().eq_ignore_ascii_case(s) || t.display_name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Failure::config(format!("unknown task {s:?}")))
}

fn parse_grouping(s: &str) -> Result<Vec<GroupBy>, Failure> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            serde_json::from_value(serde_json::Value::String(p.trim().to_string()))
                .map_err(|_| Failure::config(format!("unknown grouping axis {p:?}")))
        })
        .collect()
}

fn cmd_ingest(tables: &Path, qa: &Path, out: Option<&Path>) -> CmdResult {
    let index = TableIndex::new(load_tables(tables).map_err(Failure::config)?);
    let examples = load_qa(qa, &index).map_err(Failure::config)?;
    println!("{} tables, {} questions", index.len(), examples.len());
    if let Some(out) = out {
        write_file(out, &tables_to_json(index.tables()))?;
    }
    Ok(0)
}

fn cmd_perturb(g: &Global, tables: &Path, qa: &Path, task: &str, out: &Path) -> CmdResult {
    let task = parse_task(task)?;
    let index = TableIndex::new(load_tables(tables).map_err(Failure::config)?);
    let examples = load_qa(qa, &index).map_err(Failure::config)?;
    let pool = match &g.alias_pool {
        Some(p) => AliasPool::load(p).map_err(Failure::config)?,
        None => AliasPool::default(),
    };
    let seed = g.seed.unwrap_or(0);
    let mut lines = Vec::new();
    let mut failed = 0;
    for ex in &examples {
        let table = index.get(&ex.table_id).expect("validated reference");
        match perturb(task, table, ex, seed, &pool) {
            Ok(inst) => lines.push(serde_json::to_string(&inst).expect("instance serializes")),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", ex.id);
            }
        }
    }
    let mut body = lines.join("\n");
    body.push('\n');
    write_file(out, &body)?;
    println!("{} instances written, {failed} skipped", lines.len());
    Ok(if failed > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_run(g: &Global, output_dir: Option<PathBuf>, normalizer: Option<Normalizer>) -> CmdResult {
    let mut cfg = load_config(g, output_dir)?;
    if let Some(n) = normalizer {
        cfg.normalizer = n;
    }
    let gw = gateway(&cfg.cache_dir)?;
    let mut run = plan_run(&cfg, &gw)?;
    let c = &run.manifest.counts;
    println!("planned {} items: {} cached, {} pending, {} failed", c.total, c.done, c.pending, c.failed);
    let s = execute(&mut run, &cfg, &gw)?;
    println!(
        "done {} / failed {} / cache hits {} / network calls {}",
        s.done, s.failed, s.cache_hits, s.network_calls
    );
    println!("results: {}", s.results_path.display());
    Ok(if s.failed > 0 { EXIT_PARTIAL } else { 0 })
}

fn cmd_score(g: &Global, results: Option<&Path>, normalizer: Option<Normalizer>, group_by: &str, out: &Path) -> CmdResult {
    let grouping = parse_grouping(group_by)?;
    let items = match (results, &g.config) {
        (Some(r), _) => {
            if normalizer.is_some() {
                return Err(Failure::config("--normalizer needs --config to rescore cached responses"));
            }
            read_results(r)?
        }
        (None, Some(_)) => {
            let mut cfg = load_config(g, None)?;
            if let Some(n) = normalizer {
                cfg.normalizer = n;
            }
            let gw = gateway(&cfg.cache_dir)?;
            let run = plan_run(&cfg, &gw)?;
            rescore(&run, &cfg, &gw)?
        }
        (None, None) => return Err(Failure::config("pass --results or --config")),
    };
    let items = dedupe_last_wins(items);
    if items.is_empty() {
        return Err(Failure::config("no scored items"));
    }
    let table = aggregate(&items, &grouping);
    write_file(&out.join("metrics.csv"), &table.to_csv().map_err(Failure::io)?)?;
    write_file(&out.join("metrics.md"), &table.to_markdown())?;
    print!("{}", table.to_markdown());
    Ok(0)
}

fn cmd_report(results: &Path, shape: ReportShape, out: &Path, task: &str, finetune_tag: &str) -> CmdResult {
    let items = read_results(results)?;
    let opts = ReportOptions {
        task: parse_task(task)?,
        finetune_tag: finetune_tag.to_string(),
        ..ReportOptions::default()
    };
    let report = render_report(&items, shape, &opts).map_err(Failure::config)?;
    let (md, csv) = write_report(&report, out).map_err(Failure::io)?;
    println!("{}\n{}", md.display(), csv.display());
    Ok(0)
}

fn cmd_finetune(
    g: &Global,
    source: SampleSource,
    input: &Path,
    tables: Option<&Path>,
    n: usize,
    out: &Path,
    target: TargetStyle,
) -> CmdResult {
    let seed = g.seed.unwrap_or(0);
    let plan = plan_even_sample(source, n, seed).map_err(Failure::config)?;
    let records = match source {
        SampleSource::TempTabQA => {
            let tables = tables.ok_or_else(|| Failure::config("--tables is required for TempTabQA"))?;
            let index = TableIndex::new(load_tables(tables).map_err(Failure::config)?);
            let examples = load_qa(input, &index).map_err(Failure::config)?;
            let picked = draw(&plan, &examples, |_| String::new()).map_err(Failure::config)?;
            picked
                .iter()
                .map(|ex| table_record(index.get(&ex.table_id).expect("validated reference"), ex))
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::config)?
        }
        SampleSource::Aux(kind) => {
            let items: Vec<McqItem> = match kind {
                tabqa_core::dataset::AuxDatasetKind::Tram => load_tram(input)
                    .map_err(Failure::config)?
                    .iter()
                    .map(McqItem::from)
                    .collect(),
                _ => load_bigbench_mc(input, source.name()).map_err(Failure::config)?,
            };
            let picked = draw(&plan, &items, |i| i.task.clone()).map_err(Failure::config)?;
            picked
                .iter()
                .enumerate()
                .map(|(i, it)| mcq_record(it, i, target))
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::config)?
        }
    };
    let summary = emit_train_file(&records, out).map_err(Failure::io)?;
    println!("{} records, sha256 {}", summary.count, summary.digest);
    Ok(0)
}

fn cmd_taxonomy(action: &TaxonomyAction) -> CmdResult {
    match action {
        TaxonomyAction::Summarize { labels } => {
            let labels = load_labels(labels).map_err(Failure::config)?;
            let s = summarize(labels.iter().map(|r| &r.label));
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            Ok(0)
        }
        TaxonomyAction::Filter { labels, tables, qa, out } => {
            let labels = load_labels(labels).map_err(Failure::config)?;
            let index = TableIndex::new(load_tables(tables).map_err(Failure::config)?);
            let examples = load_qa(qa, &index).map_err(Failure::config)?;
            let (kept, manifest) = build_enhanced_set(&examples, &labels).map_err(Failure::config)?;
            write_file(&out.join("enhanced_qa.json"), &serde_json::to_string_pretty(&kept).expect("examples serialize"))?;
            write_file(
                &out.join("enhanced_manifest.json"),
                &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            )?;
            println!("retained {} of {}", manifest.retained, manifest.input);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Ingest { tables, qa, out } => cmd_ingest(tables, qa, out.as_deref()),
        Command::Perturb { tables, qa, task, out } => cmd_perturb(g, tables, qa, task, out),
        Command::Run { output_dir, normalizer } => cmd_run(g, output_dir.clone(), *normalizer),
        Command::Score {
            results,
            normalizer,
            group_by,
            out,
        } => cmd_score(g, results.as_deref(), *normalizer, group_by, out),
        Command::Report {
            results,
            shape,
            out,
            task,
            finetune_tag,
        } => cmd_report(results, *shape, out, task, finetune_tag),
        Command::FinetunePrep {
            source,
            input,
            tables,
            n,
            out,
            target,
        } => cmd_finetune(g, *source, input, tables.as_deref(), *n, out, *target),
        Command::Taxonomy { action } => cmd_taxonomy(action),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
