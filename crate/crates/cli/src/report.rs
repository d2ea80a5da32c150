//! Tabular reports: CSV with a fixed header and a JSON mirror of the same
//! numbers, both written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Number, Value};
use tempfile::NamedTempFile;

use crate::config::Format;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
}

impl Cell {
    /// CSV text: integers plainly, reals with 17 significant digits so that
    /// parsing gives back the same bits.
    pub fn csv(self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) if x.is_finite() => format!("{x:.16e}"),
            Cell::Real(x) => x.to_string(),
        }
    }

    fn json(self) -> Value {
        match self {
            Cell::Int(i) => json!(i),
            // non-finite values have no JSON number form
            Cell::Real(x) => Number::from_f64(x).map_or(Value::Null, Value::Number),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as i64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(name: &str, columns: &[S]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self, stamp: Option<u64>) -> String {
        let mut out = String::new();
        if let Some(t) = stamp {
            out.push_str(&format!("# generated_unix={t}\n"));
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| c.csv()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Array(r.iter().map(|c| c.json()).collect()))
            .collect();
        let doc = json!({ "columns": self.columns, "rows": rows });
        let mut text = serde_json::to_string_pretty(&doc).expect("JSON values always serialize");
        text.push('\n');
        text
    }

    /// Writes `<dir>/<name>.csv` and/or `<dir>/<name>.json`; returns the paths written.
    pub fn write(&self, dir: &Path, format: Format, stamp: Option<u64>) -> std::io::Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        if format.csv() {
            let path = dir.join(format!("{}.csv", self.name));
            write_atomic(&path, self.to_csv(stamp).as_bytes())?;
            written.push(path);
        }
        if format.json() {
            let path = dir.join(format!("{}.json", self.name));
            write_atomic(&path, self.to_json().as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Writes to a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
