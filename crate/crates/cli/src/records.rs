//! Structured output records and their table view.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Format;

/// How a value was obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tag {
    /// Echo of configuration or run metadata.
    Input,
    Exact,
    /// Result of a truncated computation whose neglected mass is at most the bound.
    Truncated(f64),
    /// Monte Carlo estimate with the given standard error.
    Simulated(f64),
    Error,
}

impl Tag {
    fn text(self) -> String {
        match self {
            Tag::Input => "input".into(),
            Tag::Exact => "analytic-exact".into(),
            Tag::Truncated(b) => format!("analytic-truncated({b:.3e})"),
            Tag::Simulated(se) => format!("simulated(se={se:.3e})"),
            Tag::Error => "error".into(),
        }
    }

    fn bound(self) -> Option<f64> {
        match self {
            Tag::Truncated(b) => Some(b),
            Tag::Simulated(se) => Some(se),
            Tag::Exact => Some(0.0),
            Tag::Input | Tag::Error => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub query: String,
    pub value: Value,
    pub tag: String,
    pub error_bound: Option<f64>,
}

impl Record {
    pub fn new(query: impl Into<String>, value: impl Serialize, tag: Tag) -> Self {
        Record {
            query: query.into(),
            value: serde_json::to_value(value).expect("serializable value"),
            tag: tag.text(),
            error_bound: tag.bound(),
        }
    }

    pub fn error(query: impl Into<String>, reason: &str, message: impl Into<String>) -> Self {
        Record::new(query, json!({ "reason": reason, "message": message.into() }), Tag::Error)
    }
}

/// Collected output of one command.
#[derive(Debug, Default)]
pub struct Report {
    pub records: Vec<Record>,
}

impl Report {
    pub fn push(&mut self, query: impl Into<String>, value: impl Serialize, tag: Tag) {
        self.records.push(Record::new(query, value, tag));
    }

    pub fn write(&self, out: &mut dyn Write, format: Format, precision: usize) -> io::Result<()> {
        match format {
            Format::Records => {
                for r in &self.records {
                    serde_json::to_writer(&mut *out, r)?;
                    out.write_all(b"\n")?;
                }
            }
            Format::Table => write_table(out, &self.records, precision)?,
        }
        out.flush()
    }
}

fn write_table(out: &mut dyn Write, records: &[Record], precision: usize) -> io::Result<()> {
    let rows: Vec<[String; 4]> = records
        .iter()
        .map(|r| {
            [
                r.query.clone(),
                render(&r.value, precision),
                r.tag.clone(),
                r.error_bound.map_or_else(|| "-".into(), |b| number(b, precision)),
            ]
        })
        .collect();
    let header = ["query", "value", "tag", "error_bound"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", line.join("  ").trim_end())?;
    }
    Ok(())
}

fn number(v: f64, precision: usize) -> String {
    if v == 0.0 || (1e-4..1e6).contains(&v.abs()) {
        let exponent = if v == 0.0 { 0 } else { v.abs().log10().floor() as i64 };
        let digits = (precision as i64 - 1 - exponent).max(0) as usize;
        let s = format!("{v:.digits$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{:.*e}", precision.saturating_sub(1), v);
        match s.split_once('e') {
            Some((m, e)) if m.contains('.') => format!("{}e{e}", m.trim_end_matches('0').trim_end_matches('.')),
            _ => s,
        }
    }
}

fn render(v: &Value, precision: usize) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_i64() && !n.is_u64() => number(f, precision),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Array(items) => format!("[{}]", items.iter().map(|i| render(i, precision)).collect::<Vec<_>>().join(", ")),
        Value::Object(map) => format!(
            "{{{}}}",
            map.iter().map(|(k, i)| format!("{k}: {}", render(i, precision))).collect::<Vec<_>>().join(", ")
        ),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_carry_bounds() {
        let r = Record::new("x", 0.5, Tag::Simulated(0.01));
        assert_eq!(r.tag, "simulated(se=1.000e-2)");
        assert_eq!(r.error_bound, Some(0.01));
        assert_eq!(Record::new("x", 1, Tag::Input).error_bound, None);
    }

    #[test]
    fn table_is_derived_from_records() {
        let mut rep = Report::default();
        rep.push("pi_empty", 0.315, Tag::Exact);
        rep.push("witness", vec!["1"], Tag::Exact);
        let mut buf = Vec::new();
        rep.write(&mut buf, Format::Table, 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("query"));
        assert!(lines[1].contains("0.315") && lines[1].contains("analytic-exact"));
        assert!(lines[2].contains("[1]"));
    }

    #[test]
    fn number_formatting() {
        assert_eq!(number(0.547619047619, 6), "0.547619");
        assert_eq!(number(1.5e-9, 3), "1.5e-9");
        assert_eq!(number(1e-10, 6), "1e-10");
        assert_eq!(number(0.0, 6), "0");
    }
}
