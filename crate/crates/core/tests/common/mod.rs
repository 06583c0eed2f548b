#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;
use tempfile::TempDir;

use tabqa_core::dataset::{load_qa, load_tables, InfoboxTable, QaExample, TableIndex};
use tabqa_core::gateway::{FailingTransport, Gateway, ResponseCache};
use tabqa_core::harness::{plan_run, Overrides, RunConfig};
use tabqa_core::perturb::TaskKind;
use tabqa_core::prompt::Technique;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn appendix() -> (TableIndex, Vec<QaExample>) {
    let index = TableIndex::new(load_tables(fixture("appendix_tables.json")).unwrap());
    let examples = load_qa(fixture("appendix_qa.json"), &index).unwrap();
    (index, examples)
}

pub fn appendix_pair(id: &str) -> (InfoboxTable, QaExample) {
    let (index, examples) = appendix();
    let ex = examples.into_iter().find(|e| e.id == id).unwrap();
    (index.get(&ex.table_id).unwrap().clone(), ex)
}

pub fn offline_gateway(cache_dir: &Path) -> (Gateway, Arc<FailingTransport>) {
    let transport = Arc::new(FailingTransport::default());
    (Gateway::new(ResponseCache::new(cache_dir), transport.clone()), transport)
}

pub const SYNTHETIC_EXAMPLES: usize = 20;

/// Response script per example: `C` gold answer, `V` gold answer in a
/// decorated form that still matches after normalization, `W` wrong answer,
/// `A` abstention.
pub const SCRIPTS: [(Technique, TaskKind, &str); 6] = [
    (Technique::ZsCot, TaskKind::OriginalTable, "CCCCCCCCCCCCVVWWWWAA"),
    (Technique::ZsCot, TaskKind::WithoutTable, "CCCCCWWWWWWWWWAAAAAA"),
    (Technique::ZsCot, TaskKind::MissingRelevantRows, "CCCCCCCWWWWWAAAAAAAA"),
    (Technique::Clear, TaskKind::OriginalTable, "CCCCCCCCCCCCCCCCVVVW"),
    (Technique::Clear, TaskKind::WithoutTable, "CCCWWWWWWWWWWWAAAAAA"),
    (Technique::Clear, TaskKind::MissingRelevantRows, "CCCCWWAAAAAAAAAAAAAA"),
];

pub fn synthetic_gold(i: usize) -> String {
    (1950 + i).to_string()
}

pub fn scripted_response(code: char, gold: &str) -> String {
    match code {
        'C' => format!("The start year is listed in the table.\nFinal Answer: {gold}"),
        'V' => format!("Reading the range gives the start.\n**Final Answer:** The {gold}."),
        'W' => "The earliest year mentioned is 1899.\nFinal Answer: 1899".to_string(),
        'A' => "The information is not available in the table.\nFinal Answer: cannot be determined".to_string(),
        other => panic!("unknown script code {other}"),
    }
}

pub struct ReplayRig {
    pub dir: TempDir,
    pub cfg: RunConfig,
}

impl ReplayRig {
    pub fn cache_dir(&self) -> PathBuf {
        self.cfg.cache_dir.clone()
    }
}

fn write_synthetic_dataset(root: &Path) {
    let surnames = [
        "Hartwell", "Okafor", "Lindqvist", "Moreau", "Tanaka", "Castellano", "Whitfield", "Novak",
        "Adeyemi", "Kowalski", "Brennan", "Sandoval", "Forsberg", "Mahlangu", "Petrakis", "Duchesne",
        "Ramsey", "Ibarra", "Holloway", "Vasquez",
    ];
    let mut tables = Vec::new();
    let mut qa = Vec::new();
    for (i, surname) in surnames.iter().enumerate() {
        let title = format!("Jordan {surname}");
        let start = 1950 + i;
        tables.push(json!({
            "source_id": format!("t{i:02}"),
            "title": title,
            "sections": [
                {"header": null, "rows": [
                    {"key": "Born", "values": [format!("March {}, {}", i + 1, start - 22)]},
                    {"key": "Occupation", "values": ["Painter"]}
                ]},
                {"header": "Career", "rows": [
                    {"key": "Years active", "values": [format!("{start}-{}", start + 30)]},
                    {"key": "Movement", "values": ["Modernism"]}
                ]}
            ]
        }));
        qa.push(json!({
            "id": format!("ex-{i:02}"),
            "table_id": format!("t{i:02}"),
            "question": format!("In what year did {title} begin their career?"),
            "gold_answers": [synthetic_gold(i)],
            "evidence_keys": ["Years active"],
            "split": if i % 2 == 0 { "head" } else { "tail" }
        }));
    }
    fs::write(root.join("tables.json"), serde_json::to_string_pretty(&tables).unwrap()).unwrap();
    fs::write(root.join("qa.json"), serde_json::to_string_pretty(&qa).unwrap()).unwrap();
}

/// A 20-example dataset with replay fixtures scripted for every item of the
/// 2 technique × 3 task matrix.
pub fn synthetic_rig() -> ReplayRig {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_synthetic_dataset(root);
    let config = r#"
dataset = { tables = "tables.json", qa = "qa.json" }
models = [{ model_id = "replay-model", profile = "replay" }]
techniques = ["ZS_CoT", "CLEAR"]
tasks = ["OriginalTable", "WithoutTable", "MissingRelevantRows"]
seed = 11
max_in_flight = 4
cache_dir = "cache"
output_dir = "out"
"#;
    let path = root.join("run.toml");
    fs::write(&path, config).unwrap();
    let fixtures = root.join("fixtures");
    fs::create_dir_all(&fixtures).unwrap();
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.apply(&Overrides {
        replay: Some(fixtures.clone()),
        ..Overrides::default()
    });

    let (planner, _) = offline_gateway(&root.join("scratch-cache"));
    let run = plan_run(&cfg, &planner).unwrap();
    for item in &run.work {
        let i: usize = item.key.example_id["ex-".len()..].parse().unwrap();
        let script = SCRIPTS
            .iter()
            .find(|(t, k, _)| *t == item.key.technique && *k == item.key.task)
            .map(|(_, _, s)| s)
            .unwrap();
        let code = script.chars().nth(i).unwrap();
        let req = item.request.as_ref().unwrap();
        fs::write(
            fixtures.join(format!("{}.txt", req.digest())),
            scripted_response(code, &synthetic_gold(i)),
        )
        .unwrap();
    }
    ReplayRig { dir, cfg }
}

/// Hand-tallied correct counts per (technique, task); every cell has n = 20.
pub const ORACLE: [(Technique, TaskKind, u64); 6] = [
    (Technique::ZsCot, TaskKind::OriginalTable, 14),
    (Technique::ZsCot, TaskKind::WithoutTable, 5),
    (Technique::ZsCot, TaskKind::MissingRelevantRows, 7),
    (Technique::Clear, TaskKind::OriginalTable, 19),
    (Technique::Clear, TaskKind::WithoutTable, 3),
    (Technique::Clear, TaskKind::MissingRelevantRows, 4),
];

const FIRST: [&str; 12] = [
    "Marguerite", "Tobias", "Ines", "Kwame", "Sigrid", "Dmitri", "Ayesha", "Rowan", "Beatriz", "Lars",
    "Nkechi", "Emil",
];
const LAST: [&str; 12] = [
    "Halvorsen", "Achterberg", "Quintero", "Mbeki", "Oyelaran", "Szabo", "Fairbanks", "Lemaire",
    "Yilmaz", "Ng", "Castellanos", "Rourke",
];
const KEYS: [&str; 14] = [
    "Born", "Died", "Occupation", "Years active", "Spouse(s)", "Children", "Teams", "Awards",
    "Education", "Residence", "Genres", "Labels", "Notable work", "Political party",
];
const WORDS: [&str; 16] = [
    "1987", "Paris", "née Ortiz", "Grammy Award", "c:\\path", "a|b", "Zürich", "(aged 81)", "1929-1989",
    "St. Louis", "B. D. Hyman", "4.14", "Mount Vernon", "über", "Academy", "Ω-band",
];

/// A random table with 2 to 4 sections, unique row keys, and an example
/// whose evidence is one or two of those keys and whose question names the
/// entity.
pub fn random_pair(rng: &mut impl rand::Rng, i: usize) -> (InfoboxTable, QaExample) {
    use rand::seq::SliceRandom;
    use tabqa_core::dataset::{Row, Section, Split};

    let first = FIRST.choose(rng).unwrap();
    let last = LAST.choose(rng).unwrap();
    let title = format!("{first} {last}");
    let mut keys: Vec<&str> = KEYS.to_vec();
    keys.shuffle(rng);
    let n_sections = rng.gen_range(2..=4);
    let mut sections = Vec::new();
    let mut used = 0;
    for s in 0..n_sections {
        let n_rows = rng.gen_range(1..=3);
        let rows = (0..n_rows)
            .map(|_| {
                let key = keys[used];
                used += 1;
                let n_values = rng.gen_range(1..=3);
                let values: Vec<String> = (0..n_values)
                    .map(|_| match rng.gen_range(0..6) {
                        0 => format!("{last} family"),
                        1 => format!("portrait of {title}"),
                        _ => WORDS.choose(rng).unwrap().to_string(),
                    })
                    .collect();
                Row::new(key, values)
            })
            .collect();
        let header = (s > 0 && rng.gen_bool(0.6)).then(|| format!("Section {s}"));
        sections.push(Section { header, rows });
    }
    let table = InfoboxTable {
        source_id: format!("rand-{i}"),
        title: title.clone(),
        sections,
    };
    let mut all_keys: Vec<String> = table.rows().map(|(_, r)| r.key.clone()).collect();
    all_keys.shuffle(rng);
    let n_evidence = rng.gen_range(1..=2).min(all_keys.len() - 1);
    let example = QaExample {
        id: format!("rand-ex-{i}"),
        table_id: table.source_id.clone(),
        question: format!("In what year did {title} receive the first award, and where was {last} living?"),
        gold_answers: vec!["1987".into()],
        evidence_keys: all_keys[..n_evidence].to_vec(),
        split: Split::Head,
        labels: None,
    };
    (table, example)
}

/// Text fields of a table in a fixed order, followed by the question.
fn texts_of(table: &InfoboxTable, question: &str) -> Vec<String> {
    let mut out: Vec<String> = tabqa_core::perturb::table_texts(table).into_iter().map(str::to_string).collect();
    out.push(question.to_string());
    out
}

/// Pieces of `text` left after cutting out every match of `matcher`.
fn outside(matcher: &tabqa_core::perturb::NameMatcher, text: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut last = 0;
    for m in matcher.mentions(text) {
        pieces.push(text[last..m.start].to_string());
        last = m.end;
    }
    pieces.push(text[last..].to_string());
    pieces
}

/// Checks delete/restore identity, rename hygiene and the absence of table
/// text in table-free prompts for one pair.
pub fn check_perturbations(
    table: &InfoboxTable,
    example: &QaExample,
    seed: u64,
    pool: &tabqa_core::perturb::AliasPool,
) -> Result<(), String> {
    use tabqa_core::linearize::linearize;
    use tabqa_core::perturb::{perturb, restore, NameMatcher};
    use tabqa_core::prompt::{PromptFactory, PromptVariant};

    let deleted = perturb(TaskKind::MissingRelevantRows, table, example, seed, pool).map_err(|e| e.to_string())?;
    let restored = restore(&deleted).map_err(|e| e.to_string())?;
    if &restored != table {
        return Err(format!("{}: restore differs", table.source_id));
    }

    let renamed = perturb(TaskKind::AlteredEntity, table, example, seed, pool).map_err(|e| e.to_string())?;
    let alias = renamed.alias.clone().ok_or("no alias")?;
    let new_table = renamed.table.as_ref().ok_or("renamed instance has no table")?;
    let original = NameMatcher::for_title(&table.title);
    let before = texts_of(table, &example.question);
    let after = texts_of(new_table, &renamed.question);
    let leftover: usize = after.iter().map(|t| original.count(t)).sum();
    if leftover != 0 {
        return Err(format!("{}: {leftover} original mentions remain", table.source_id));
    }
    let alias_matcher = NameMatcher::new(&alias, NameMatcher::surname_rule_applies(&table.title));
    for (b, a) in before.iter().zip(&after) {
        if outside(&original, b) != outside(&alias_matcher, a) {
            return Err(format!("{}: bytes outside mentions changed: {b:?} -> {a:?}", table.source_id));
        }
    }

    let bare = perturb(TaskKind::WithoutTable, table, example, seed, pool).map_err(|e| e.to_string())?;
    let factory = PromptFactory::default();
    let linear = linearize(table);
    for technique in [Technique::ZsCot, Technique::ZsFcot, Technique::ZsPot, Technique::Clear] {
        let bundle = factory.build(&bare, technique, PromptVariant::Original).map_err(|e| e.to_string())?;
        let content = bundle.user_content();
        for line in linear.lines().filter(|l| l.contains('\t')) {
            if content.contains(line) {
                return Err(format!("{}: {technique} prompt contains {line:?}", table.source_id));
            }
        }
        for (_, row) in table.rows() {
            for v in &row.values {
                if !example.question.contains(v.as_str()) && content.contains(v.as_str()) && v.len() > 4 {
                    return Err(format!("{}: {technique} prompt contains value {v:?}", table.source_id));
                }
            }
        }
    }
    Ok(())
}

/// One aggregated cell of a synthetic results log.
pub struct LogCell {
    pub model: &'static str,
    pub technique: Technique,
    pub task: TaskKind,
    pub variant: tabqa_core::prompt::PromptVariant,
    pub tag: &'static str,
    pub correct: usize,
    pub n: usize,
}

/// Writes a JSON-lines results log expanding every cell into `n` items.
pub fn write_log(path: &Path, cells: &[LogCell]) {
    use std::io::Write;
    use tabqa_core::score::ScoredItem;

    let mut out = std::io::BufWriter::new(fs::File::create(path).unwrap());
    for c in cells {
        for i in 0..c.n {
            let item = ScoredItem {
                example_id: format!("q{i:05}"),
                task: c.task,
                technique: c.technique,
                variant: c.variant,
                model_id: c.model.into(),
                finetune_tag: c.tag.into(),
                control: false,
                prediction: String::new(),
                abstained: false,
                em: u8::from(i < c.correct),
                fidelity: None,
            };
            writeln!(out, "{}", serde_json::to_string(&item).unwrap()).unwrap();
        }
    }
}

fn cell(technique: Technique, task: TaskKind, variant: tabqa_core::prompt::PromptVariant, tag: &'static str, correct: usize) -> LogCell {
    LogCell {
        model: "GPT-3.5 turbo",
        technique,
        task,
        variant,
        tag,
        correct,
        n: 10_000,
    }
}

/// Display-format fixture: a slice of the GPT-3.5 block of the fine-tuning table.
pub fn finetune_table_cells() -> Vec<LogCell> {
    use tabqa_core::prompt::PromptVariant::Original;
    use TaskKind::OriginalTable as T;
    vec![
        cell(Technique::Clear, T, Original, "No FT", 7799),
        cell(Technique::Clear, T, Original, "TRAM 100", 7792),
        cell(Technique::FsCot, T, Original, "No FT", 7349),
        cell(Technique::FsCot, T, Original, "TRAM 100", 7553),
        cell(Technique::ZsCot, T, Original, "No FT", 6584),
        cell(Technique::ZsCot, T, Original, "TRAM 100", 6864),
    ]
}

pub const FINETUNE_TABLE_MD: &str = "\
| Prompt | No FT | TRAM 100 | TRAM 1000 | TempTabQA 100 | TempTabQA 1000 |
|---|---|---|---|---|---|
| **GPT-3.5 turbo** |  |  |  |  |  |
| C.L.E.A.R | **77.99%** | **77.92%** | - | - | - |
| F.S. CoT | 73.49% | 75.53% | - | - | - |
| Z.S. CoT | 65.84% | 68.64% | - | - | - |
";

/// Display-format fixture: GPT-3.5 rows of the task tables.
pub fn task_table_cells() -> Vec<LogCell> {
    use tabqa_core::prompt::PromptVariant::{Original, Updated};
    use TaskKind::{MissingRelevantRows as M, OriginalTable as O};
    vec![
        cell(Technique::ZsCot, O, Original, "No FT", 6556),
        cell(Technique::FsCot, O, Original, "No FT", 7335),
        cell(Technique::Clear, O, Original, "No FT", 7805),
        cell(Technique::ZsCot, M, Original, "No FT", 6006),
        cell(Technique::FsCot, M, Original, "No FT", 5659),
        cell(Technique::Clear, M, Original, "No FT", 4946),
        cell(Technique::ZsCot, M, Updated, "No FT", 1160),
        cell(Technique::FsCot, M, Updated, "No FT", 1305),
        cell(Technique::Clear, M, Updated, "No FT", 1139),
    ]
}

pub const TASK_TABLE_MD: &str = "\
| Model | Task | Original: Z.S CoT | Original: F.S CoT | Original: C.L.E.A.R | Updated: Z.S CoT | Updated: F.S CoT | Updated: C.L.E.A.R |
|---|---|---|---|---|---|---|---|
| GPT-3.5 turbo | Original Table (↑) | 65.56% | 73.35% | **78.05%** | - | - | - |
| GPT-3.5 turbo | Missing Relevant Rows (↓) | 60.06% | 56.59% | **49.46%** | 11.60% | 13.05% | **11.39%** |
";
