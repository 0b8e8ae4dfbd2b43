//! Labeled text tables for analysis outputs.
//!
//! ```text
//! # schema: tcvn-output
//! # version: 1
//! # <key>: <value>
//! [section name]
//! <corner>\t<col>\t<col>..
//! <row label>\t<value>\t<value>..
//! ```
//!
//! Values use the shortest round-trip decimal form; `NA` marks a missing
//! entry. A profile is a section with columns `distance_px` and `value`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const OUTPUT_SCHEMA: &str = "tcvn-output";
pub const OUTPUT_VERSION: u32 = 1;
const MISSING: &str = "NA";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    /// First entry labels the row-label column.
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Section {
    pub fn new(name: impl Into<String>, header: Vec<String>) -> Self {
        Self {
            name: name.into(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) {
        self.rows.push((label.into(), values));
    }

    /// Two-column `(distance_px, value)` records.
    pub fn profile(name: impl Into<String>, values: &[f64]) -> Self {
        let mut s = Self::new(name, vec!["distance_px".into(), "value".into()]);
        for (d, v) in values.iter().enumerate() {
            s.push(d.to_string(), vec![Some(*v)]);
        }
        s
    }

    pub fn value(&self, row: &str, col: &str) -> Option<f64> {
        let c = self.header.iter().skip(1).position(|h| h == col)?;
        self.rows.iter().find(|(l, _)| l == row).and_then(|(_, v)| v[c])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    /// Metadata in insertion order (schema and version are implicit).
    pub meta: Vec<(String, String)>,
    pub sections: Vec<Section>,
}

fn token_ok(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl Document {
    pub fn meta(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn render(&self) -> Result<String> {
        let mut out = format!("# schema: {OUTPUT_SCHEMA}\n# version: {OUTPUT_VERSION}\n");
        for (k, v) in &self.meta {
            if !token_ok(k) || k.contains(':') || v.contains('\n') {
                return Err(Error::Format(format!("bad metadata entry {k:?}")));
            }
            let _ = writeln!(out, "# {k}: {v}");
        }
        for s in &self.sections {
            if !token_ok(&s.name) || s.name.contains(']') || s.header.iter().any(|h| !token_ok(h)) {
                return Err(Error::Format(format!("bad section {:?}", s.name)));
            }
            let _ = writeln!(out, "[{}]", s.name);
            let _ = writeln!(out, "{}", s.header.join("\t"));
            for (label, values) in &s.rows {
                if !token_ok(label) || values.len() + 1 != s.header.len() {
                    return Err(Error::Format(format!("bad row {label:?} in section {}", s.name)));
                }
                out.push_str(label);
                for v in values {
                    out.push('\t');
                    match v {
                        Some(x) => {
                            let _ = write!(out, "{x:?}");
                        }
                        None => out.push_str(MISSING),
                    }
                }
                out.push('\n');
            }
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let expect = |line: Option<&str>, want: String| -> Result<()> {
            match line {
                Some(l) if l == want => Ok(()),
                other => Err(Error::Format(format!("expected {want:?}, found {other:?}"))),
            }
        };
        expect(lines.next(), format!("# schema: {OUTPUT_SCHEMA}"))?;
        expect(lines.next(), format!("# version: {OUTPUT_VERSION}"))?;
        let mut doc = Document::default();
        let mut current: Option<Section> = None;
        let mut need_header = false;
        for line in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                if current.is_some() {
                    return Err(Error::Format("metadata after the first section".into()));
                }
                let (k, v) = rest.split_once(": ").ok_or_else(|| Error::Format(format!("bad metadata {line:?}")))?;
                doc.meta.push((k.into(), v.into()));
            } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                doc.sections.extend(current.take());
                current = Some(Section::new(name, Vec::new()));
                need_header = true;
            } else {
                let s = current.as_mut().ok_or_else(|| Error::Format(format!("row outside a section: {line:?}")))?;
                let fields: Vec<&str> = line.split('\t').collect();
                if need_header {
                    s.header = fields.into_iter().map(String::from).collect();
                    need_header = false;
                    continue;
                }
                if fields.len() != s.header.len() {
                    return Err(Error::Format(format!("row {:?} has {} fields, header {}", fields[0], fields.len(), s.header.len())));
                }
                let values = fields[1..]
                    .iter()
                    .map(|f| match *f {
                        MISSING => Ok(None),
                        x => x.parse::<f64>().map(Some).map_err(|_| Error::Format(format!("bad value {x:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                s.push(fields[0], values);
            }
        }
        doc.sections.extend(current);
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.render()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut d = Document::default();
        d.meta("analysis", "attention").meta("log_clamp", 1e-12);
        let mut s = Section::new("matrix", vec!["row".into(), "a".into(), "b".into()]);
        s.push("a", vec![Some(0.1 + 0.2), None]);
        s.push("b", vec![Some(-1e-300), Some(3.0)]);
        d.sections.push(s);
        d.sections.push(Section::profile("mu", &[1.0, 0.5]));
        let text = d.render().unwrap();
        let back = Document::parse(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.get_meta("log_clamp"), Some("0.000000000001"));
        assert_eq!(back.section("matrix").unwrap().value("a", "b"), None);
        assert_eq!(back.section("mu").unwrap().value("1", "value"), Some(0.5));
    }

    #[test]
    fn wrong_version_rejected() {
        let text = "# schema: tcvn-output\n# version: 2\n";
        assert!(Document::parse(text).is_err());
    }
}
