//! Accuracy tables with one row per approach or model and one column per task.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{EvalError, TaskScore};

pub const TASK_COLUMNS: [&str; 9] = [
    "2D+", "3D+", "4D+", "5D+", "2D-", "3D-", "4D-", "5D-", "2Dx",
];

/// An accuracy (or accuracy difference) in hundredths of a percentage point,
/// so that two-decimal text round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell(i64);

impl Cell {
    /// `100 · correct / evaluated`, rounded half up to two decimals.
    pub fn from_score(score: TaskScore) -> Self {
        if score.evaluated == 0 {
            return Cell(0);
        }
        let (c, n) = (score.correct as i64, score.evaluated as i64);
        Cell((20_000 * c + n) / (2 * n))
    }

    pub fn from_hundredths(h: i64) -> Self {
        Cell(h)
    }

    pub fn hundredths(self) -> i64 {
        self.0
    }

    pub fn percent(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        let s = format!("{sign}{}.{:02}", a / 100, a % 100);
        f.pad(&s)
    }
}

impl FromStr for Cell {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("`{s}` is not a two-decimal number");
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('+').unwrap_or(s)),
        };
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        if int.is_empty()
            || !int.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 2
            || !frac.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(bad());
        }
        let int: i64 = int.parse().map_err(|_| bad())?;
        let frac: i64 = format!("{frac:0<2}").parse().map_err(|_| bad())?;
        let v = int * 100 + frac;
        Ok(Cell(if neg { -v } else { v }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub name: String,
    /// Indexed like [`TASK_COLUMNS`]; `None` for tasks that were not run.
    pub cells: [Option<Cell>; 9],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Html,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "html" => Ok(ReportFormat::Html),
            _ => Err(format!(
                "unknown report format `{s}` (expected text, csv or html)"
            )),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Text => "text",
            ReportFormat::Csv => "csv",
            ReportFormat::Html => "html",
        })
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Html => "html",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalReport {
    pub rows: Vec<Row>,
}

fn column(task: &str) -> Option<usize> {
    TASK_COLUMNS.iter().position(|c| *c == task)
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the scored tasks to the row called `name`, creating it if needed.
    /// Tasks outside the table columns are ignored.
    pub fn record(&mut self, name: &str, scores: &BTreeMap<String, TaskScore>) {
        let idx = match self.rows.iter().position(|r| r.name == name) {
            Some(i) => i,
            None => {
                self.rows.push(Row {
                    name: name.to_string(),
                    cells: [None; 9],
                });
                self.rows.len() - 1
            }
        };
        for (task, score) in scores {
            if let Some(c) = column(task) {
                self.rows[idx].cells[c] = Some(Cell::from_score(*score));
            }
        }
    }

    pub fn row(&self, name: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn cell(&self, name: &str, task: &str) -> Option<Cell> {
        self.row(name).and_then(|r| r.cells[column(task)?])
    }

    /// Per-cell `other − self` for rows present in both reports.
    pub fn compare(&self, other: &EvalReport) -> EvalReport {
        let mut out = EvalReport::new();
        for a in &self.rows {
            let Some(b) = other.row(&a.name) else {
                continue;
            };
            let mut cells = [None; 9];
            for (i, cell) in cells.iter_mut().enumerate() {
                if let (Some(x), Some(y)) = (a.cells[i], b.cells[i]) {
                    *cell = Some(Cell(y.0 - x.0));
                }
            }
            out.rows.push(Row {
                name: a.name.clone(),
                cells,
            });
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Text => self.to_text(),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Html => self.to_html(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("Approach,{}\n", TASK_COLUMNS.join(","));
        for row in &self.rows {
            out.push_str(&csv_field(&row.name));
            for cell in &row.cells {
                out.push(',');
                if let Some(c) = cell {
                    let _ = write!(out, "{c}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.chars().count())
            .max()
            .unwrap_or(0)
            .max("Approach".len());
        let mut out = format!("{:<name_w$}", "Approach");
        for c in TASK_COLUMNS {
            let _ = write!(out, "  {c:>7}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<name_w$}", row.name);
            for cell in &row.cells {
                match cell {
                    Some(c) => {
                        let _ = write!(out, "  {c:>7}");
                    }
                    None => out.push_str("        -"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_html(&self) -> String {
        let mut out = String::from(
            "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Accuracy</title>\n\
             <style>table{border-collapse:collapse;font-family:sans-serif}\
             td,th{border:1px solid #999;padding:4px 8px;text-align:right}\
             td:first-child,th:first-child{text-align:left}</style>\n</head>\n<body>\n<table>\n<tr><th>Approach</th>",
        );
        for c in TASK_COLUMNS {
            let _ = write!(out, "<th>{}</th>", html_escape(c));
        }
        out.push_str("</tr>\n");
        for row in &self.rows {
            let _ = write!(out, "<tr><td>{}</td>", html_escape(&row.name));
            for cell in &row.cells {
                match cell {
                    Some(c) => {
                        let _ = write!(out, "<td>{c}</td>");
                    }
                    None => out.push_str("<td></td>"),
                }
            }
            out.push_str("</tr>\n");
        }
        out.push_str("</table>\n</body>\n</html>\n");
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub(crate) fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Parses the CSV written by [`EvalReport::to_csv`].
pub fn parse_csv(text: &str) -> Result<EvalReport, EvalError> {
    let mut lines = text.lines();
    let expected = format!("Approach,{}", TASK_COLUMNS.join(","));
    match lines.next() {
        Some(h) if h.trim_end() == expected => {}
        Some(h) => return Err(EvalError::Report(format!("unexpected report header `{h}`"))),
        None => return Err(EvalError::Report("empty report file".into())),
    }
    let mut report = EvalReport::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(line.trim_end_matches('\r'));
        if fields.len() != TASK_COLUMNS.len() + 1 {
            return Err(EvalError::Report(format!(
                "line {}: expected {} fields, found {}",
                i + 2,
                TASK_COLUMNS.len() + 1,
                fields.len()
            )));
        }
        let mut cells = [None; 9];
        for (cell, f) in cells.iter_mut().zip(&fields[1..]) {
            if !f.is_empty() {
                *cell = Some(
                    f.parse()
                        .map_err(|e| EvalError::Report(format!("line {}: {e}", i + 2)))?,
                );
            }
        }
        report.rows.push(Row {
            name: fields[0].clone(),
            cells,
        });
    }
    Ok(report)
}
