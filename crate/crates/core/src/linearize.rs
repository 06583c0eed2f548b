//! Linear text rendering of infobox tables, and its inverse.
//!
//! Grammar:
//!
//! ```text
//! Title<TAB>{title}
//! [header]                  (a line without a tab)
//! key<TAB>v1 | v2 | ...
//! ...
//! <blank line>              (exactly one between sections)
//! [header]
//! key<TAB>...
//! ```
//!
//! Inside values, `\` is written as `\\` and `|` as `\|` so the value
//! delimiter never collides with cell content. No trailing newline.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::{keys_match, InfoboxTable, LoadError, Row, Section, VALUE_DELIMITER};

pub const TITLE_KEY: &str = "Title";

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("line {line}: {message}")]
    Grammar { line: usize, message: String },
    #[error(transparent)]
    Invariant(#[from] LoadError),
}

fn grammar(line: usize, message: impl Into<String>) -> LinearError {
    LinearError::Grammar {
        line,
        message: message.into(),
    }
}

/// Rendered table text plus the line number of every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearTable {
    pub text: String,
    /// `(section_index, row_index)` → 0-based line number in `text`.
    pub line_index: BTreeMap<(usize, usize), usize>,
}

impl LinearTable {
    pub fn lines(&self) -> impl Iterator<Item = &str> {
        self.text.split('\n')
    }
}

pub fn escape_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        if c == '\\' || c == '|' {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Splits a rendered cell on unescaped ` | ` and unescapes each value.
fn split_cell(cell: &str) -> Vec<String> {
    let chars: Vec<char> = cell.chars().collect();
    let mut values = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '\\' if i + 1 < chars.len() => {
                cur.push(chars[i + 1]);
                i += 2;
            }
            ' ' if chars.get(i + 1) == Some(&'|') && chars.get(i + 2) == Some(&' ') => {
                values.push(std::mem::take(&mut cur));
                i += 3;
            }
            c => {
                cur.push(c);
                i += 1;
            }
        }
    }
    values.push(cur);
    values
}

pub fn render_row(row: &Row) -> String {
    let cell: Vec<String> = row.values.iter().map(|v| escape_value(v)).collect();
    format!("{}\t{}", row.key, cell.join(VALUE_DELIMITER))
}

pub fn linearize(table: &InfoboxTable) -> LinearTable {
    let mut lines = vec![format!("{TITLE_KEY}\t{}", table.title)];
    let mut line_index = BTreeMap::new();
    for (s, section) in table.sections.iter().enumerate() {
        if s > 0 {
            lines.push(String::new());
        }
        if let Some(header) = &section.header {
            lines.push(header.clone());
        }
        for (r, row) in section.rows.iter().enumerate() {
            line_index.insert((s, r), lines.len());
            lines.push(render_row(row));
        }
    }
    LinearTable {
        text: lines.join("\n"),
        line_index,
    }
}

/// Parses linear text back into a table. The result is validated, so text
/// with a title line but no rows fails with an invariant error.
pub fn parse_linear(text: &str, source_id: &str) -> Result<InfoboxTable, LinearError> {
    let lines: Vec<&str> = text.split('\n').collect();
    let title = lines[0]
        .strip_prefix(TITLE_KEY)
        .and_then(|rest| rest.strip_prefix('\t'))
        .ok_or_else(|| grammar(0, "expected \"Title<TAB>...\""))?;

    let mut sections: Vec<Section> = Vec::new();
    let mut current: Option<Section> = None;
    let mut after_blank = false;
    for (n, &line) in lines.iter().enumerate().skip(1) {
        if line.is_empty() {
            if after_blank {
                return Err(grammar(n, "consecutive blank lines"));
            }
            match current.take() {
                Some(sec) if !sec.rows.is_empty() => sections.push(sec),
                Some(_) => return Err(grammar(n, "section header without rows")),
                None => return Err(grammar(n, "blank line before any section")),
            }
            after_blank = true;
            continue;
        }
        after_blank = false;
        match line.split_once('\t') {
            None => {
                let sec = current.get_or_insert_with(|| Section {
                    header: None,
                    rows: Vec::new(),
                });
                if sec.header.is_some() || !sec.rows.is_empty() {
                    return Err(grammar(n, "header line must open a section"));
                }
                sec.header = Some(line.to_string());
            }
            Some((key, cell)) => {
                if key.is_empty() {
                    return Err(grammar(n, "empty row key"));
                }
                if cell.is_empty() {
                    return Err(grammar(n, "row without values"));
                }
                let sec = current.get_or_insert_with(|| Section {
                    header: None,
                    rows: Vec::new(),
                });
                sec.rows.push(Row {
                    key: key.to_string(),
                    values: split_cell(cell),
                });
            }
        }
    }
    if after_blank {
        return Err(grammar(lines.len() - 1, "trailing blank line"));
    }
    if let Some(sec) = current {
        if sec.rows.is_empty() {
            return Err(grammar(lines.len() - 1, "section header without rows"));
        }
        sections.push(sec);
    }
    let table = InfoboxTable {
        source_id: source_id.to_string(),
        title: title.to_string(),
        sections,
    };
    table.validate()?;
    Ok(table)
}

/// Line numbers of every row (or the title line) whose key matches `key`,
/// ignoring case and surrounding whitespace. Section header lines never match.
pub fn find_row_line(linear: &LinearTable, key: &str) -> Vec<usize> {
    let mut found = Vec::new();
    if keys_match(TITLE_KEY, key) {
        found.push(0);
    }
    let lines: Vec<&str> = linear.lines().collect();
    for &line in linear.line_index.values() {
        if let Some((k, _)) = lines[line].split_once('\t') {
            if keys_match(k, key) {
                found.push(line);
            }
        }
    }
    found
}
