//! CSV reports. The first line is `# ` followed by a one-line JSON object
//! (fingerprint, seeds, sample count, ...); the rest is plain CSV.
//!
//! Floats are written with the shortest representation that round-trips,
//! so equal values always give equal bytes.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Float(f64),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Empty => String::new(),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_owned())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        // no "-0"
        "0".into()
    } else if v.is_finite() && (v.abs() < 1e-5 || v.abs() >= 1e16) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub meta: serde_json::Value,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Report {
    pub fn new(meta: impl Serialize, header: &[&str]) -> Result<Self> {
        Ok(Self {
            meta: serde_json::to_value(meta)?,
            header: header.iter().map(|s| (*s).to_owned()).collect(),
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = b"# ".to_vec();
        out.extend(serde_json::to_vec(&self.meta)?);
        out.push(b'\n');
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| Error::Manifest(format!("csv buffer: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, self.to_bytes()?).at(path)
    }
}

/// A report read back as text cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedReport {
    pub meta: serde_json::Value,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParsedReport {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_report(path: &Path) -> Result<ParsedReport> {
    let file = fs::File::open(path).at(path)?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).at(path)?;
    let meta_text = first.strip_prefix("# ").ok_or_else(|| Error::Header {
        path: path.into(),
        reason: "missing metadata comment line".into(),
    })?;
    let meta = serde_json::from_str(meta_text.trim_end()).map_err(|e| Error::Header {
        path: path.into(),
        reason: format!("metadata: {e}"),
    })?;
    let mut csv = csv::Reader::from_reader(reader);
    let header = csv.headers()?.iter().map(str::to_owned).collect();
    let rows = csv
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(ParsedReport { meta, header, rows })
}

/// A matrix (row-major, `rows × cols`) as a report with columns
/// `row, col, value`.
pub fn matrix_report(meta: impl Serialize, rows: usize, cols: usize, values: &[f64]) -> Result<Report> {
    let mut r = Report::new(meta, &["row", "col", "value"])?;
    for i in 0..rows {
        for j in 0..cols {
            r.push(vec![i.into(), j.into(), values[i * cols + j].into()]);
        }
    }
    Ok(r)
}
