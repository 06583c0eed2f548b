//! Response parsing: final answers, C.L.E.A.R traces, evidence fidelity and
//! abstention.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linearize::LinearTable;

const FINAL_MARKER: &str = "final answer:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyzeError {
    #[error("response is empty")]
    EmptyResponse,
    #[error("response has no final answer")]
    NoFinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analysis {
    pub label: String,
    /// Indices into [`ClearTrace::located_rows`].
    pub evidence_refs: Vec<usize>,
    pub depends_on: Vec<String>,
    pub reasoning: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub message: String,
}

impl Diagnostic {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClearTrace {
    pub comprehend_notes: String,
    pub located_rows: Vec<String>,
    pub sub_questions: Vec<SubQuestion>,
    pub analyses: Vec<Analysis>,
    pub resolve_text: String,
    pub final_answer: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl ClearTrace {
    /// Diagnostics as JSON lines.
    pub fn diagnostics_jsonl(&self) -> String {
        self.diagnostics
            .iter()
            .map(|d| serde_json::to_string(d).expect("diagnostic serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rows_total: usize,
    pub rows_matched: usize,
    pub unmatched: Vec<String>,
    pub matched_lines: Vec<usize>,
}

impl FidelityReport {
    pub fn faithful(&self) -> bool {
        self.rows_matched == self.rows_total
    }

    /// Matched fraction; 1.0 when nothing was quoted.
    pub fn ratio(&self) -> f64 {
        if self.rows_total == 0 {
            1.0
        } else {
            self.rows_matched as f64 / self.rows_total as f64
        }
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid pattern"))
}

fn strip_markup(line: &str) -> &str {
    line.trim().trim_start_matches(['*', '#', '>', ' ', '\t'])
}

fn clean_answer(s: &str) -> String {
    let mut s = s.trim().trim_matches('*').trim();
    loop {
        let before = s;
        for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”'), ('`', '`')] {
            if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
                s = s[open.len_utf8()..s.len() - close.len_utf8()].trim();
            }
        }
        if let Some(rest) = s.strip_suffix('.') {
            s = rest.trim_end();
        }
        if s == before {
            break;
        }
    }
    s.to_string()
}

fn marker_remainder(line: &str) -> Option<&str> {
    let l = strip_markup(line);
    let head = l.get(..FINAL_MARKER.len())?;
    head.eq_ignore_ascii_case(FINAL_MARKER)
        .then(|| &l[FINAL_MARKER.len()..])
}

/// Index of the last line carrying the final-answer marker, with the answer.
fn find_final(lines: &[&str]) -> Option<(usize, String)> {
    let idx = lines.iter().rposition(|l| marker_remainder(l).is_some())?;
    let rest = clean_answer(marker_remainder(lines[idx]).unwrap_or(""));
    if !rest.is_empty() {
        return Some((idx, rest));
    }
    let next = lines[idx + 1..]
        .iter()
        .map(|l| clean_answer(l))
        .find(|l| !l.is_empty())
        .unwrap_or_default();
    Some((idx, next))
}

/// Answer after the last `Final Answer:` line, else the last non-empty line.
pub fn extract_final_answer(text: &str) -> Result<String, AnalyzeError> {
    let lines: Vec<&str> = text.lines().collect();
    if let Some((_, answer)) = find_final(&lines) {
        if !answer.is_empty() {
            return Ok(answer);
        }
    }
    lines
        .iter()
        .rev()
        .map(|l| clean_answer(strip_markup(l)))
        .find(|l| !l.is_empty())
        .ok_or(AnalyzeError::EmptyResponse)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Step {
    Preamble,
    Comprehend,
    Locate,
    Examine,
    Analyze,
    Resolve,
}

fn step_header(line: &str) -> Option<Step> {
    static NUMBERED: OnceLock<Regex> = OnceLock::new();
    static NAMED: OnceLock<Regex> = OnceLock::new();
    let numbered = re(&NUMBERED, r"(?i)^\W*Step\s*([1-5])\b");
    if let Some(c) = numbered.captures(line) {
        return Some(match &c[1] {
            "1" => Step::Comprehend,
            "2" => Step::Locate,
            "3" => Step::Examine,
            "4" => Step::Analyze,
            _ => Step::Resolve,
        });
    }
    let named = re(
        &NAMED,
        r"(?i)^\W*(Comprehend|Locate|Examine|Analy[sz]e|Resolve)\b[^.?!]{0,40}$",
    );
    let c = named.captures(line.trim())?;
    Some(match c[1].to_ascii_lowercase().as_str() {
        "comprehend" => Step::Comprehend,
        "locate" => Step::Locate,
        "examine" => Step::Examine,
        "resolve" => Step::Resolve,
        _ => Step::Analyze,
    })
}

fn strip_bullet(line: &str) -> &str {
    static BULLET: OnceLock<Regex> = OnceLock::new();
    let bullet = re(&BULLET, r"^(?:[-*•]|\d+[.)])\s+");
    let t = line.trim();
    match bullet.find(t) {
        Some(m) => t[m.end()..].trim(),
        None => t,
    }
}

fn located_row(line: &str) -> Option<String> {
    static SHAPE: OnceLock<Regex> = OnceLock::new();
    let t = strip_bullet(line);
    if t.is_empty() {
        return None;
    }
    if let Some(inner) = t.strip_prefix('"').or_else(|| t.strip_prefix('“')) {
        let end = inner
            .find("\":")
            .or_else(|| inner.find("”:"))
            .or_else(|| inner.rfind(['"', '”']))
            .unwrap_or(inner.len());
        let row = inner[..end].trim();
        return (!row.is_empty()).then(|| row.to_string());
    }
    let shape = re(&SHAPE, r"^\S.*?\S(?:\t| {2,})\S");
    (t.contains('\t') || shape.is_match(t)).then(|| t.to_string())
}

fn sub_question_label(line: &str) -> Option<(String, String)> {
    static SQ: OnceLock<Regex> = OnceLock::new();
    let sq = re(&SQ, r"^\W*(SQ[1-4])\s*[):.]\s*(.*)$");
    let c = sq.captures(line.trim())?;
    let text = c[2].trim().trim_end_matches([':', ' ']).trim().to_string();
    Some((c[1].to_string(), text))
}

fn digit_tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 4 && t.chars().any(|c| c.is_ascii_digit()))
        .map(str::to_lowercase)
        .collect()
}

fn row_key(row: &str) -> Option<String> {
    static SPLIT: OnceLock<Regex> = OnceLock::new();
    let split = re(&SPLIT, r"\t| {2,}");
    let m = split.find(row)?;
    let key = row[..m.start()].trim();
    (!key.is_empty()).then(|| key.to_lowercase())
}

fn last_sentence(s: &str) -> String {
    let t = s.trim();
    let body = t.strip_suffix('.').unwrap_or(t);
    let start = body.rfind(". ").map_or(0, |i| i + 2);
    body[start..].trim().to_string()
}

fn join_lines(lines: &[String]) -> String {
    lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Segments a C.L.E.A.R response. Total over non-empty input; anything that
/// does not fit the expected shape is reported in `diagnostics`.
pub fn parse_clear_trace(text: &str) -> Result<ClearTrace, AnalyzeError> {
    let lines: Vec<&str> = text.lines().collect();
    let final_answer = match extract_final_answer(text) {
        Ok(a) => a,
        Err(_) => return Err(AnalyzeError::NoFinalAnswer),
    };
    let final_idx = find_final(&lines).map(|(i, _)| i);

    let mut sections: HashMap<Step, Vec<String>> = HashMap::new();
    let mut seen_steps = Vec::new();
    let mut step = Step::Preamble;
    for (i, line) in lines.iter().enumerate() {
        if Some(i) == final_idx {
            continue;
        }
        if let Some(s) = step_header(line) {
            step = s;
            seen_steps.push(s);
            continue;
        }
        sections.entry(step).or_default().push(line.to_string());
    }
    let section = |s: Step| -> Vec<String> { sections.get(&s).cloned().unwrap_or_default() };

    let mut trace = ClearTrace {
        final_answer,
        ..Default::default()
    };
    if final_idx.is_none() {
        trace
            .diagnostics
            .push(Diagnostic::new("no_marker", "no \"Final Answer:\" line; used last line"));
    }
    for s in [
        Step::Comprehend,
        Step::Locate,
        Step::Examine,
        Step::Analyze,
        Step::Resolve,
    ] {
        if !seen_steps.contains(&s) {
            trace
                .diagnostics
                .push(Diagnostic::new("missing_step", format!("{s:?} section not found")));
        }
    }

    trace.comprehend_notes = join_lines(&section(Step::Comprehend));
    trace.located_rows = section(Step::Locate)
        .iter()
        .filter_map(|l| located_row(l))
        .collect();

    for line in section(Step::Examine) {
        if let Some((label, text)) = sub_question_label(&line) {
            if !trace.sub_questions.iter().any(|q| q.label == label) {
                trace.sub_questions.push(SubQuestion { label, text });
            }
        }
    }
    let n = trace.sub_questions.len();
    if n == 1 || n > 4 {
        trace.diagnostics.push(Diagnostic::new(
            "sub_question_count",
            format!("{n} sub-questions; expected 0 or 2 to 4"),
        ));
    }

    let mut current: Option<(String, Vec<String>)> = None;
    let mut blocks = Vec::new();
    for line in section(Step::Analyze) {
        if let Some((label, rest)) = sub_question_label(&line) {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            current = Some((label, vec![rest]));
        } else if let Some((_, body)) = current.as_mut() {
            body.push(line);
        }
    }
    blocks.extend(current);

    static REF: OnceLock<Regex> = OnceLock::new();
    let reference = re(&REF, r"\bSQ([1-4])\b");
    let row_keys: Vec<Option<String>> = trace.located_rows.iter().map(|r| row_key(r)).collect();
    let row_tokens: Vec<BTreeSet<String>> = trace.located_rows.iter().map(|r| digit_tokens(r)).collect();
    for (label, body) in blocks {
        let reasoning = join_lines(&body);
        let lower = reasoning.to_lowercase();
        let tokens = digit_tokens(&reasoning);
        let evidence_refs = (0..trace.located_rows.len())
            .filter(|&i| {
                row_keys[i].as_ref().is_some_and(|k| lower.contains(k.as_str()))
                    || !row_tokens[i].is_disjoint(&tokens)
            })
            .collect();
        let mut depends_on = Vec::new();
        for c in reference.captures_iter(&reasoning) {
            let dep = format!("SQ{}", &c[1]);
            if dep == label || depends_on.contains(&dep) {
                continue;
            }
            if dep < label {
                depends_on.push(dep);
            } else {
                trace.diagnostics.push(Diagnostic::new(
                    "forward_dependency",
                    format!("{label} refers to later {dep}"),
                ));
            }
        }
        let answer = last_sentence(&reasoning);
        trace.analyses.push(Analysis {
            label,
            evidence_refs,
            depends_on,
            reasoning,
            answer,
        });
    }

    trace.resolve_text = join_lines(&section(Step::Resolve));
    Ok(trace)
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn unwrap_brackets(s: &str) -> String {
    s.replace("['", "")
        .replace("']", "")
        .replace("[\"", "")
        .replace("\"]", "")
}

fn unescape(s: &str) -> String {
    s.replace("\\|", "|").replace("\\\\", "\\")
}

/// Checks each located row against the table text, tolerating tabs rendered
/// as spaces or `": "`.
pub fn verify_row_fidelity(trace: &ClearTrace, linear: &LinearTable) -> FidelityReport {
    let mut forms: HashMap<String, usize> = HashMap::new();
    for (n, line) in linear.lines().enumerate() {
        let Some((key, cell)) = line.split_once('\t') else {
            continue;
        };
        for cell in [cell.to_string(), unescape(cell)] {
            for form in [
                format!("{key} {cell}"),
                format!("{key}: {cell}"),
                format!("{key}:{cell}"),
            ] {
                forms.entry(collapse(&form)).or_insert(n);
            }
        }
    }
    let mut report = FidelityReport {
        rows_total: trace.located_rows.len(),
        ..Default::default()
    };
    for row in &trace.located_rows {
        let norm = collapse(&unwrap_brackets(row));
        match forms.get(&norm) {
            Some(&line) => {
                report.rows_matched += 1;
                report.matched_lines.push(line);
            }
            None => report.unmatched.push(row.clone()),
        }
    }
    report
}

pub const DEFAULT_ABSTENTION_TERMS: [&str; 7] = [
    "not present",
    "not available",
    "cannot be determined",
    "no information",
    "missing",
    "unknown from the table",
    "insufficient information",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstentionLexicon {
    pub terms: Vec<String>,
}

impl Default for AbstentionLexicon {
    fn default() -> Self {
        AbstentionLexicon {
            terms: DEFAULT_ABSTENTION_TERMS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl AbstentionLexicon {
    pub fn extend<I: IntoIterator<Item = String>>(&mut self, extra: I) {
        for t in extra {
            let t = t.to_lowercase();
            if !self.terms.contains(&t) {
                self.terms.push(t);
            }
        }
    }

    pub fn hits(&self, text: &str) -> bool {
        let lower = text.to_lowercase();
        self.terms.iter().any(|t| lower.contains(t.as_str()))
    }
}

pub fn parses_as_number(s: &str) -> bool {
    let t = s.trim().replace(',', "");
    let t = t.strip_prefix('$').unwrap_or(&t);
    !t.is_empty() && t.parse::<f64>().is_ok_and(f64::is_finite)
}

pub fn parses_as_date(s: &str) -> bool {
    let t = s.trim();
    const FULL: [&str; 6] = ["%Y-%m-%d", "%B %d, %Y", "%b %d, %Y", "%d %B %Y", "%d %b %Y", "%m/%d/%Y"];
    if FULL.iter().any(|f| NaiveDate::parse_from_str(t, f).is_ok()) {
        return true;
    }
    let with_day = format!("1 {t}");
    ["%d %B %Y", "%d %b %Y"]
        .iter()
        .any(|f| NaiveDate::parse_from_str(&with_day, f).is_ok())
}

/// Abstention with the default lexicon.
pub fn classify_abstention(text: &str) -> bool {
    classify_abstention_with(text, &AbstentionLexicon::default())
}

/// True when the final answer or the resolve section uses an abstention
/// phrase and the final answer is not a number or date.
pub fn classify_abstention_with(text: &str, lexicon: &AbstentionLexicon) -> bool {
    let Ok(answer) = extract_final_answer(text) else {
        return false;
    };
    if parses_as_number(&answer) || parses_as_date(&answer) {
        return false;
    }
    if lexicon.hits(&answer) {
        return true;
    }
    parse_clear_trace(text).is_ok_and(|t| lexicon.hits(&t.resolve_text))
}
