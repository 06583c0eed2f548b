//! Prompt rendering for every technique and prompt variant.
//!
//! All instruction text comes from the files under `templates/`, compiled in
//! by default and overridable from a directory holding files of the same
//! names. Each bundle is a single user message.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LoadError, TableIndex};
use crate::digest::json_digest;
use crate::linearize::linearize;
use crate::perturb::PerturbedInstance;

pub const CLEAR_TEMPLATE_FILE: &str = "clear_v1.txt";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt variant Updated only applies to row-deletion tasks, not {0}")]
    VariantMismatch(String),
    #[error("{0} needs at least one registered exemplar")]
    MissingExemplars(Technique),
    #[error("exemplar already registered for {0}")]
    DuplicateExemplar(Technique),
    #[error("invalid exemplar: {0}")]
    InvalidExemplar(String),
    #[error("cannot read template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Load(#[from] LoadError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Technique {
    #[serde(rename = "ZS_CoT")]
    ZsCot,
    #[serde(rename = "FS_CoT")]
    FsCot,
    #[serde(rename = "ZS_FCoT")]
    ZsFcot,
    #[serde(rename = "FS_FCoT")]
    FsFcot,
    #[serde(rename = "ZS_PoT")]
    ZsPot,
    #[serde(rename = "FS_PoT")]
    FsPot,
    #[serde(rename = "CLEAR")]
    Clear,
}

impl Technique {
    pub const ALL: [Technique; 7] = [
        Technique::Clear,
        Technique::FsCot,
        Technique::FsFcot,
        Technique::FsPot,
        Technique::ZsCot,
        Technique::ZsFcot,
        Technique::ZsPot,
    ];

    pub fn is_few_shot(self) -> bool {
        matches!(self, Technique::FsCot | Technique::FsFcot | Technique::FsPot)
    }

    pub fn code(self) -> &'static str {
        match self {
            Technique::ZsCot => "ZS_CoT",
            Technique::FsCot => "FS_CoT",
            Technique::ZsFcot => "ZS_FCoT",
            Technique::FsFcot => "FS_FCoT",
            Technique::ZsPot => "ZS_PoT",
            Technique::FsPot => "FS_PoT",
            Technique::Clear => "CLEAR",
        }
    }

    /// Label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Technique::ZsCot => "Z.S. CoT",
            Technique::FsCot => "F.S. CoT",
            Technique::ZsFcot => "Z.S. F-CoT",
            Technique::FsFcot => "F.S. F-CoT",
            Technique::ZsPot => "Z.S. PoT",
            Technique::FsPot => "F.S. PoT",
            Technique::Clear => "C.L.E.A.R",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Technique {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Technique::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown technique {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptVariant {
    Original,
    Updated,
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// How the F-CoT suffix asks for its plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcotStyle {
    /// Symbolic plan first, then the answer derived from that plan.
    #[default]
    TwoStage,
    /// Single pass citing rows at each step.
    Inline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<Message>,
    pub technique: Technique,
    pub variant: PromptVariant,
    pub instance_ref: String,
    pub content_digest: String,
}

impl PromptBundle {
    fn new(content: String, technique: Technique, variant: PromptVariant, instance_ref: String) -> Self {
        let messages = vec![Message::user(content)];
        let content_digest = json_digest(&messages);
        PromptBundle {
            messages,
            technique,
            variant,
            instance_ref,
            content_digest,
        }
    }

    pub fn user_content(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Instruction text, one field per template file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub clear: String,
    pub availability: String,
    pub baseline_instruction: String,
    pub baseline_instruction_no_table: String,
    pub cot_suffix: String,
    pub pot_suffix: String,
    pub fcot_two_stage_suffix: String,
    pub fcot_inline_suffix: String,
}

fn tidy(s: &str) -> String {
    s.trim_end_matches(['\n', '\r']).to_string()
}

impl Templates {
    pub fn builtin() -> Self {
        Templates {
            clear: tidy(include_str!("../templates/clear_v1.txt")),
            availability: tidy(include_str!("../templates/availability.txt")),
            baseline_instruction: tidy(include_str!("../templates/baseline_instruction.txt")),
            baseline_instruction_no_table: tidy(include_str!(
                "../templates/baseline_instruction_no_table.txt"
            )),
            cot_suffix: tidy(include_str!("../templates/cot_suffix.txt")),
            pot_suffix: tidy(include_str!("../templates/pot_suffix.txt")),
            fcot_two_stage_suffix: tidy(include_str!("../templates/fcot_two_stage_suffix.txt")),
            fcot_inline_suffix: tidy(include_str!("../templates/fcot_inline_suffix.txt")),
        }
    }

    /// Built-in templates, with any same-named file in `dir` taking precedence.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut t = Templates::builtin();
        let slots: [(&str, &mut String); 8] = [
            (CLEAR_TEMPLATE_FILE, &mut t.clear),
            ("availability.txt", &mut t.availability),
            ("baseline_instruction.txt", &mut t.baseline_instruction),
            ("baseline_instruction_no_table.txt", &mut t.baseline_instruction_no_table),
            ("cot_suffix.txt", &mut t.cot_suffix),
            ("pot_suffix.txt", &mut t.pot_suffix),
            ("fcot_two_stage_suffix.txt", &mut t.fcot_two_stage_suffix),
            ("fcot_inline_suffix.txt", &mut t.fcot_inline_suffix),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|source| PromptError::TemplateIo {
                    path: path.display().to_string(),
                    source,
                })?;
                *slot = tidy(&text);
            }
        }
        Ok(t)
    }
}

impl Default for Templates {
    fn default() -> Self {
        Templates::builtin()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub technique: Technique,
    pub linear_table: String,
    pub question: String,
    pub worked_response: String,
}

impl Exemplar {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.question.trim().is_empty() || self.worked_response.trim().is_empty() {
            return Err(PromptError::InvalidExemplar(
                "question and worked_response must be non-empty".into(),
            ));
        }
        if self.technique == Technique::Clear && !self.worked_response.contains("Final Answer:") {
            return Err(PromptError::InvalidExemplar(
                "C.L.E.A.R exemplar must contain \"Final Answer:\"".into(),
            ));
        }
        Ok(())
    }
}

/// Worked examples per technique, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ExemplarStore {
    by_technique: BTreeMap<Technique, Vec<Exemplar>>,
    digests: HashSet<String>,
}

impl ExemplarStore {
    pub fn get(&self, technique: Technique) -> &[Exemplar] {
        self.by_technique.get(&technique).map_or(&[], Vec::as_slice)
    }
}

/// Adds exemplars under `technique`. Either all are accepted or none.
pub fn register_exemplars(
    store: &mut ExemplarStore,
    technique: Technique,
    exemplars: Vec<Exemplar>,
) -> Result<(), PromptError> {
    let mut seen = HashSet::new();
    for ex in &exemplars {
        if ex.technique != technique {
            return Err(PromptError::InvalidExemplar(format!(
                "exemplar for {} registered under {technique}",
                ex.technique
            )));
        }
        ex.validate()?;
        let d = ex.digest();
        if store.digests.contains(&d) || !seen.insert(d) {
            return Err(PromptError::DuplicateExemplar(technique));
        }
    }
    store.digests.extend(seen);
    store.by_technique.entry(technique).or_default().extend(exemplars);
    Ok(())
}

#[derive(Deserialize)]
struct RawExemplar {
    table_id: String,
    question: String,
    worked_response: String,
    #[serde(default)]
    technique: Option<Technique>,
}

/// Reads an exemplar file: QA records plus a `worked_response` (and optional
/// `technique`, defaulting to `default_technique`).
pub fn load_exemplars(
    path: impl AsRef<Path>,
    tables: &TableIndex,
    default_technique: Technique,
) -> Result<Vec<Exemplar>, PromptError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let raw: Vec<RawExemplar> = serde_json::from_str(&text).map_err(|e| LoadError::Format {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    raw.into_iter()
        .map(|r| {
            let table = tables.get(&r.table_id).ok_or_else(|| LoadError::DanglingReference {
                example: r.question.clone(),
                table_id: r.table_id.clone(),
            })?;
            let ex = Exemplar {
                technique: r.technique.unwrap_or(default_technique),
                linear_table: linearize(table).text,
                question: r.question.trim().to_string(),
                worked_response: r.worked_response.trim().to_string(),
            };
            ex.validate()?;
            Ok(ex)
        })
        .collect()
}

fn check_variant(instance: &PerturbedInstance, variant: PromptVariant) -> Result<(), PromptError> {
    if variant == PromptVariant::Updated && !instance.task.is_row_deletion() {
        return Err(PromptError::VariantMismatch(instance.task.to_string()));
    }
    Ok(())
}

/// Renders prompts against a fixed template set and exemplar store.
#[derive(Debug, Clone)]
pub struct PromptFactory {
    pub templates: Templates,
    pub exemplars: ExemplarStore,
    /// Exemplars shown by few-shot techniques.
    pub k: usize,
    pub fcot_style: FcotStyle,
}

impl Default for PromptFactory {
    fn default() -> Self {
        PromptFactory {
            templates: Templates::builtin(),
            exemplars: ExemplarStore::default(),
            k: 2,
            fcot_style: FcotStyle::default(),
        }
    }
}

impl PromptFactory {
    pub fn new(templates: Templates, exemplars: ExemplarStore) -> Self {
        PromptFactory {
            templates,
            exemplars,
            ..Default::default()
        }
    }

    /// `[availability]\n\nTable:\n{linear}\n\nQuestion: {q}`, minus the parts
    /// that do not apply.
    fn query_block(&self, instance: &PerturbedInstance, variant: PromptVariant) -> String {
        let mut out = String::new();
        if variant == PromptVariant::Updated {
            out.push_str(&self.templates.availability);
            out.push_str("\n\n");
        }
        if let Some(table) = &instance.table {
            out.push_str("Table:\n");
            out.push_str(&linearize(table).text);
            out.push_str("\n\n");
        }
        out.push_str("Question: ");
        out.push_str(&instance.question);
        out
    }

    pub fn build_clear_prompt(
        &self,
        instance: &PerturbedInstance,
        variant: PromptVariant,
    ) -> Result<PromptBundle, PromptError> {
        check_variant(instance, variant)?;
        let content = format!(
            "{}\n\n{}",
            self.templates.clear,
            self.query_block(instance, variant)
        );
        Ok(PromptBundle::new(
            content,
            Technique::Clear,
            variant,
            instance.reference(),
        ))
    }

    fn suffix(&self, technique: Technique) -> &str {
        match technique {
            Technique::ZsCot | Technique::FsCot | Technique::Clear => &self.templates.cot_suffix,
            Technique::ZsPot | Technique::FsPot => &self.templates.pot_suffix,
            Technique::ZsFcot | Technique::FsFcot => match self.fcot_style {
                FcotStyle::TwoStage => &self.templates.fcot_two_stage_suffix,
                FcotStyle::Inline => &self.templates.fcot_inline_suffix,
            },
        }
    }

    /// CoT, F-CoT and PoT prompts (zero- or few-shot). C.L.E.A.R is delegated
    /// to [`PromptFactory::build_clear_prompt`].
    pub fn build_baseline_prompt(
        &self,
        instance: &PerturbedInstance,
        technique: Technique,
        variant: PromptVariant,
    ) -> Result<PromptBundle, PromptError> {
        if technique == Technique::Clear {
            return self.build_clear_prompt(instance, variant);
        }
        check_variant(instance, variant)?;
        let instruction = if instance.table.is_some() {
            &self.templates.baseline_instruction
        } else {
            &self.templates.baseline_instruction_no_table
        };
        let mut content = format!("{instruction}\n\n");
        if technique.is_few_shot() {
            let shots = self.exemplars.get(technique);
            if shots.is_empty() || self.k == 0 {
                return Err(PromptError::MissingExemplars(technique));
            }
            for (i, ex) in shots.iter().take(self.k).enumerate() {
                content.push_str(&format!(
                    "Example {}\nTable:\n{}\n\nQuestion: {}\n\nResponse:\n{}\n\n",
                    i + 1,
                    ex.linear_table,
                    ex.question,
                    ex.worked_response
                ));
            }
            content.push_str("Now answer the following.\n\n");
        }
        content.push_str(&self.query_block(instance, variant));
        content.push_str("\n\n");
        content.push_str(self.suffix(technique));
        Ok(PromptBundle::new(
            content,
            technique,
            variant,
            instance.reference(),
        ))
    }

    pub fn build(
        &self,
        instance: &PerturbedInstance,
        technique: Technique,
        variant: PromptVariant,
    ) -> Result<PromptBundle, PromptError> {
        self.build_baseline_prompt(instance, technique, variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{InfoboxTable, QaExample, Row, Section, Split};
    use crate::perturb::{delete_evidence_rows, make_original, remove_table};

    fn table() -> InfoboxTable {
        InfoboxTable {
            source_id: "t".into(),
            title: "Al McBean".into(),
            sections: vec![Section {
                header: None,
                rows: vec![
                    Row::new("Born", ["May 15, 1938"]),
                    Row::new("Teams", ["Pittsburgh Pirates (1961-1968, 1970)"]),
                ],
            }],
        }
    }

    fn example() -> QaExample {
        QaExample {
            id: "q1".into(),
            table_id: "t".into(),
            question: "How many MLB wins did Al McBean have before turning 20?".into(),
            gold_answers: vec!["0".into()],
            evidence_keys: vec!["Born".into()],
            split: Split::Head,
            labels: None,
        }
    }

    fn exemplar(technique: Technique, n: usize) -> Exemplar {
        Exemplar {
            technique,
            linear_table: format!("Title\tEx {n}\nK\tv{n}"),
            question: format!("question {n}?"),
            worked_response: format!("work {n}\nFinal Answer: {n}"),
        }
    }

    #[test]
    fn clear_prompt_layout() {
        let f = PromptFactory::default();
        let inst = make_original(&table(), &example());
        let b = f.build_clear_prompt(&inst, PromptVariant::Original).unwrap();
        assert_eq!(b.messages.len(), 1);
        let c = b.user_content();
        assert!(c.starts_with(&f.templates.clear));
        assert!(c.contains("between 2 and 4 smaller, more manageable sub-questions"));
        assert!(c.contains("assume the current date is December, 2022"));
        assert!(c.contains("using \"Final Answer:\""));
        assert!(c.contains(
            "columns separated by tabs, rows separated by newlines, and subsections separated by double newlines"
        ));
        assert!(c.ends_with(
            "========================\n\nTable:\nTitle\tAl McBean\nBorn\tMay 15, 1938\nTeams\tPittsburgh Pirates (1961-1968, 1970)\n\nQuestion: How many MLB wins did Al McBean have before turning 20?"
        ));
    }

    #[test]
    fn without_table_omits_table_block() {
        let f = PromptFactory::default();
        let inst = remove_table(&table(), &example());
        let c = f.build_clear_prompt(&inst, PromptVariant::Original).unwrap();
        assert!(!c.user_content().contains("Table:\n"));
        assert!(!c.user_content().contains("May 15, 1938"));
    }

    #[test]
    fn updated_variant_only_for_deletion_tasks() {
        let f = PromptFactory::default();
        let inst = make_original(&table(), &example());
        assert!(matches!(
            f.build_clear_prompt(&inst, PromptVariant::Updated),
            Err(PromptError::VariantMismatch(_))
        ));
        let del = delete_evidence_rows(&table(), &example()).unwrap();
        let b = f.build_clear_prompt(&del, PromptVariant::Updated).unwrap();
        assert!(b.user_content().contains(
            "may or may not be present in the table.\n\nTable:\n"
        ));
        let cot = f.build_baseline_prompt(&del, Technique::ZsCot, PromptVariant::Updated).unwrap();
        assert!(cot.user_content().contains("may or may not be present"));
    }

    #[test]
    fn zero_shot_suffixes() {
        let f = PromptFactory::default();
        let inst = make_original(&table(), &example());
        let cot = f.build_baseline_prompt(&inst, Technique::ZsCot, PromptVariant::Original).unwrap();
        assert!(cot.user_content().ends_with("Let's think step by step."));
        let pot = f.build_baseline_prompt(&inst, Technique::ZsPot, PromptVariant::Original).unwrap();
        assert!(pot
            .user_content()
            .ends_with("Write a program that computes the answer, then state Final Answer:"));
        let fcot = f.build_baseline_prompt(&inst, Technique::ZsFcot, PromptVariant::Original).unwrap();
        assert!(fcot.user_content().contains("reasoning plan"));
        let inline = PromptFactory {
            fcot_style: FcotStyle::Inline,
            ..PromptFactory::default()
        };
        let fcot2 = inline
            .build_baseline_prompt(&inst, Technique::ZsFcot, PromptVariant::Original)
            .unwrap();
        assert_ne!(fcot.content_digest, fcot2.content_digest);
    }

    #[test]
    fn few_shot_prepends_k_exemplars_in_order() {
        let mut store = ExemplarStore::default();
        register_exemplars(
            &mut store,
            Technique::FsCot,
            (1..=3).map(|n| exemplar(Technique::FsCot, n)).collect(),
        )
        .unwrap();
        let f = PromptFactory::new(Templates::builtin(), store);
        let inst = make_original(&table(), &example());
        let b = f.build_baseline_prompt(&inst, Technique::FsCot, PromptVariant::Original).unwrap();
        let c = b.user_content();
        assert_eq!(c.matches("\nResponse:\n").count(), 2);
        let first = c.find("question 1?").unwrap();
        let second = c.find("question 2?").unwrap();
        let query = c.find("Question: How many MLB wins").unwrap();
        assert!(first < second && second < query);
        assert!(!c.contains("question 3?"));
    }

    #[test]
    fn few_shot_without_exemplars_fails() {
        let f = PromptFactory::default();
        let inst = make_original(&table(), &example());
        assert!(matches!(
            f.build_baseline_prompt(&inst, Technique::FsPot, PromptVariant::Original),
            Err(PromptError::MissingExemplars(Technique::FsPot))
        ));
    }

    #[test]
    fn exemplar_registration_rules() {
        let mut store = ExemplarStore::default();
        let ex = exemplar(Technique::Clear, 1);
        register_exemplars(&mut store, Technique::Clear, vec![ex.clone()]).unwrap();
        assert!(matches!(
            register_exemplars(&mut store, Technique::Clear, vec![ex]),
            Err(PromptError::DuplicateExemplar(_))
        ));
        let mut bad = exemplar(Technique::Clear, 2);
        bad.worked_response = "no marker".into();
        assert!(matches!(
            register_exemplars(&mut store, Technique::Clear, vec![bad]),
            Err(PromptError::InvalidExemplar(_))
        ));
        assert_eq!(store.get(Technique::Clear).len(), 1);
    }

    #[test]
    fn rendering_is_deterministic() {
        let f = PromptFactory::default();
        let inst = make_original(&table(), &example());
        for t in [Technique::Clear, Technique::ZsCot, Technique::ZsPot] {
            let a = f.build(&inst, t, PromptVariant::Original).unwrap();
            let b = f.build(&inst, t, PromptVariant::Original).unwrap();
            assert_eq!(a.content_digest, b.content_digest);
        }
    }

    #[test]
    fn template_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cot_suffix.txt"), "Think carefully.\n").unwrap();
        let t = Templates::load_dir(dir.path()).unwrap();
        assert_eq!(t.cot_suffix, "Think carefully.");
        assert_eq!(t.clear, Templates::builtin().clear);
    }

    #[test]
    fn technique_codes_parse() {
        for t in Technique::ALL {
            assert_eq!(t.code().parse::<Technique>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.code()));
        }
    }
}
