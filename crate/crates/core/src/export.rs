//! CSV / JSON export of tabular results.
//!
//! Floats are written with 17 significant digits in CSV so every value parses
//! back to the identical `f64`. JSON uses serde_json's shortest round-trip form.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn to_csv(&self) -> String {
        match self {
            Cell::Float(v) => format_float(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Float(v) => serde_json::Number::from_f64(*v)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            Cell::Int(v) => Value::from(*v),
            Cell::Text(s) => Value::String(s.clone()),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

/// `{:.16e}`: 17 significant digits, locale independent.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// A record with a fixed column schema.
pub trait TableRow {
    const HEADER: &'static [&'static str];

    /// One cell per header column, in header order.
    fn cells(&self) -> Vec<Cell>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::Config(format!("unknown export format '{other}'"))),
        }
    }
}

pub fn write_csv<R: TableRow, W: Write>(rows: &[R], out: W, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_owned(),
        source,
    };
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    wtr.write_record(R::HEADER).map_err(csv_err)?;
    for row in rows {
        let cells = row.cells();
        debug_assert_eq!(cells.len(), R::HEADER.len());
        wtr.write_record(cells.iter().map(Cell::to_csv)).map_err(csv_err)?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn to_json_value<R: TableRow>(rows: &[R]) -> Value {
    Value::Array(
        rows.iter()
            .map(|row| {
                let obj: Map<String, Value> = R::HEADER
                    .iter()
                    .zip(row.cells())
                    .map(|(k, c)| ((*k).to_owned(), c.to_json()))
                    .collect();
                Value::Object(obj)
            })
            .collect(),
    )
}

/// Write `rows` to `path`. An empty table is an error and leaves no file behind.
pub fn export_table<R: TableRow>(rows: &[R], format: ExportFormat, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyTable {
            path: path.to_owned(),
        });
    }
    let io_err = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    match format {
        ExportFormat::Csv => write_csv(rows, &mut out, path)?,
        ExportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &to_json_value(rows)).map_err(|source| {
                Error::Json {
                    path: path.to_owned(),
                    source,
                }
            })?;
            out.write_all(b"\n").map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}
