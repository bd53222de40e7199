//! Artifact encoding and writing.
//!
//! JSON floats use the shortest representation that round-trips to the same
//! `f64`; CSV floats are written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// One output file: a basename plus its encoded contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub file_name: String,
    pub contents: String,
}

impl Artifact {
    pub fn json(stem: &str, value: &impl Serialize) -> Result<Artifact> {
        let mut contents = serde_json::to_string_pretty(value)?;
        contents.push('\n');
        Ok(Artifact {
            file_name: format!("{stem}.json"),
            contents,
        })
    }

    pub fn csv(stem: &str, table: &CsvTable) -> Artifact {
        Artifact {
            file_name: format!("{stem}.csv"),
            contents: table.render(),
        }
    }
}

/// A small CSV table with LF line endings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> CsvTable {
        CsvTable {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// CSV cell for a float; empty when absent.
pub fn num(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_nan() => "nan".into(),
        Some(x) if x.is_infinite() => if x > 0.0 { "inf" } else { "-inf" }.into(),
        Some(x) => {
            let mut s = String::new();
            let _ = write!(s, "{x:.16e}");
            s
        }
    }
}

/// Lowercase enum tag as serialized in JSON (`"partial"`, `"oracle"`, ...).
pub fn tag(value: &impl Serialize) -> String {
    match serde_json::to_value(value) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

/// Writes every artifact into `dir`, or to stdout when `dir` is `None`.
pub fn emit(artifacts: &[Artifact], dir: Option<&Path>) -> Result<()> {
    match dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            for a in artifacts {
                fs::write(dir.join(&a.file_name), &a.contents)?;
            }
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for a in artifacts {
                if artifacts.len() > 1 {
                    writeln!(lock, "# {}", a.file_name)?;
                }
                lock.write_all(a.contents.as_bytes())?;
            }
        }
    }
    Ok(())
}
