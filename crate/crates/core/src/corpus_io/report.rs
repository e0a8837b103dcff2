use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Invalid(format!("unknown report format {other:?}"))),
        }
    }
}

/// One value in a report table.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Float(x) => Some(x),
            Cell::Int(i) => Some(i as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Str(s) => Some(s),
            _ => None,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Null => Value::Null,
            Cell::Bool(b) => Value::Bool(*b),
            Cell::Int(i) => Value::from(*i),
            Cell::Float(x) => Value::from(*x),
            Cell::Str(s) => Value::String(s.clone()),
        }
    }

    fn from_json(v: &Value) -> Result<Cell> {
        Ok(match v {
            Value::Null => Cell::Null,
            Value::Bool(b) => Cell::Bool(*b),
            Value::Number(n) => match n.as_i64() {
                Some(i) if !n.is_f64() => Cell::Int(i),
                _ => Cell::Float(n.as_f64().ok_or_else(|| Error::Invalid(format!("number {n} out of range")))?),
            },
            Value::String(s) => Cell::Str(s.clone()),
            other => return Err(Error::Invalid(format!("nested value {other} in report row"))),
        })
    }

    /// Inverse of the CSV rendering: booleans, integers and floats are
    /// recognized, the empty field is null, anything else is a string.
    fn parse_csv(field: &str) -> Cell {
        match field {
            "" => Cell::Null,
            "true" => Cell::Bool(true),
            "false" => Cell::Bool(false),
            _ => {
                if let Ok(i) = field.parse::<i64>() {
                    Cell::Int(i)
                } else if let Ok(x) = field.parse::<f64>() {
                    if x.is_finite() && field.bytes().any(|b| b.is_ascii_digit()) {
                        return Cell::Float(x);
                    }
                    Cell::Str(field.to_string())
                } else {
                    Cell::Str(field.to_string())
                }
            }
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => Ok(()),
            Cell::Bool(b) => write!(f, "{b}"),
            Cell::Int(i) => write!(f, "{i}"),
            // Debug formatting is the shortest string that parses back to the same bits.
            Cell::Float(x) => write!(f, "{x:?}"),
            Cell::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<f32> for Cell {
    fn from(x: f32) -> Self {
        Cell::Float(f64::from(x))
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::Int(x)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(x: Option<T>) -> Self {
        x.map_or(Cell::Null, Into::into)
    }
}

/// Tabular analysis output with a fixed column order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ReportTable {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn get(&self, row: usize, column: &str) -> Option<&Cell> {
        self.column(column).map(|c| &self.rows[row][c])
    }

    pub fn render(&self, format: ReportFormat) -> Result<Vec<u8>> {
        for row in &self.rows {
            for cell in row {
                if let Cell::Float(x) = cell {
                    if !x.is_finite() {
                        return Err(Error::NonFinite(format!("report cell {x}")));
                    }
                }
            }
        }
        match format {
            ReportFormat::Csv => {
                let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
                w.write_record(&self.columns)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(|c| c.to_string()))?;
                }
                Ok(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
            }
            ReportFormat::Json => {
                let rows: Vec<Value> = self
                    .rows
                    .iter()
                    .map(|row| {
                        let obj: Map<String, Value> =
                            self.columns.iter().cloned().zip(row.iter().map(Cell::to_json)).collect();
                        Value::Object(obj)
                    })
                    .collect();
                let mut bytes = serde_json::to_vec_pretty(&rows).expect("report serializes");
                bytes.push(b'\n');
                Ok(bytes)
            }
        }
    }

    pub fn parse(bytes: &[u8], format: ReportFormat) -> Result<Self> {
        match format {
            ReportFormat::Csv => {
                let mut r = csv::Reader::from_reader(bytes);
                let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
                let mut table = ReportTable { columns, rows: Vec::new() };
                for rec in r.records() {
                    table.rows.push(rec?.iter().map(Cell::parse_csv).collect());
                }
                Ok(table)
            }
            ReportFormat::Json => {
                let rows: Vec<Map<String, Value>> =
                    serde_json::from_slice(bytes).map_err(|e| Error::Invalid(format!("report json: {e}")))?;
                let columns: Vec<String> = rows.first().map(|r| r.keys().cloned().collect()).unwrap_or_default();
                let mut table = ReportTable { columns, rows: Vec::new() };
                for obj in &rows {
                    let row = table
                        .columns
                        .iter()
                        .map(|c| obj.get(c).map_or(Ok(Cell::Null), Cell::from_json))
                        .collect::<Result<Vec<_>>>()?;
                    table.rows.push(row);
                }
                Ok(table)
            }
        }
    }
}

/// Writes `table` atomically; identical tables always produce identical bytes.
pub fn write_report(table: &ReportTable, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let bytes = table.render(format)?;
    write_atomic(path.as_ref(), &bytes)
}

/// Reads a report, picking the format from the file extension.
pub fn read_report(path: impl AsRef<Path>) -> Result<ReportTable> {
    let path = path.as_ref();
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => ReportFormat::Json,
        Some("csv") => ReportFormat::Csv,
        _ => return Err(Error::format(path, "report must end in .csv or .json")),
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ReportTable::parse(&bytes, format).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ReportTable {
        let mut t = ReportTable::new(["model", "unit", "mean", "flag", "note"]);
        t.push(vec!["llama, 7b".into(), 3usize.into(), 0.1f64.into(), true.into(), Cell::Null]);
        t
    }

    #[test]
    fn csv_has_header_and_one_line() {
        let bytes = table().render(ReportFormat::Csv).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text, "model,unit,mean,flag,note\r\n\"llama, 7b\",3,0.1,true,\r\n");
    }

    #[test]
    fn both_formats_parse_back() {
        let t = table();
        for f in [ReportFormat::Csv, ReportFormat::Json] {
            let back = ReportTable::parse(&t.render(f).unwrap(), f).unwrap();
            assert_eq!(back, t, "{f:?}");
        }
    }

    #[test]
    fn floats_roundtrip_exactly() {
        let mut t = ReportTable::new(["x"]);
        for x in [1.0 / 3.0, 1e-300, 12345.678901234567, 2.0, 0.1 + 0.2] {
            t.push(vec![Cell::Float(x)]);
        }
        let back = ReportTable::parse(&t.render(ReportFormat::Csv).unwrap(), ReportFormat::Csv).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn nan_refused() {
        let mut t = ReportTable::new(["x"]);
        t.push(vec![Cell::Float(f64::NAN)]);
        assert!(t.render(ReportFormat::Json).is_err());
    }

    #[test]
    fn unwritable_path() {
        let err = write_report(&table(), "/nonexistent-dir/x/report.csv", ReportFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
