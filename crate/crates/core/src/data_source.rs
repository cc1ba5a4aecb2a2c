//! Row sources: inline values, CSV/JSON files, and WebSocket generators.
//!
//! Complete inputs are loaded in full and buffered before the session starts;
//! rows get ids `0..n` in source order. Progressive inputs are only described
//! here; their chunks arrive through [`crate::protocol`].
//!
//! CSV follows RFC 4180 with a mandatory header. Each column's type is the join
//! of its cells' types under integer → float → boolean → string, where an empty
//! cell is null and does not take part. Integers widen to floats; any other
//! mix falls back to string. The join is commutative, so the inferred types do
//! not depend on row order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::spec::{host_url, is_ws_url, ProvegaSpec};
use crate::value::{Record, Row, Value, ID_KEY};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: {message}")]
    Format { record: usize, message: String },
    #[error("dataset has no rows")]
    Empty,
    #[error("{0} is a progressive source and cannot be loaded at once")]
    NotComplete(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    /// Array of record objects.
    Inline(Vec<Json>),
    File { path: PathBuf, format: FileFormat },
    WebSocket(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSourceDescriptor {
    pub kind: SourceKind,
    pub declared_row_count: Option<usize>,
}

impl DataSourceDescriptor {
    pub fn inline(records: Vec<Json>) -> Self {
        Self {
            kind: SourceKind::Inline(records),
            declared_row_count: None,
        }
    }

    /// A file source; the format comes from the extension (`.json`, else CSV).
    pub fn file(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let format = format_for(&path, None);
        Self {
            kind: SourceKind::File { path, format },
            declared_row_count: None,
        }
    }

    pub fn websocket(url: impl Into<String>) -> Self {
        Self {
            kind: SourceKind::WebSocket(url.into()),
            declared_row_count: None,
        }
    }

    /// Reads the host view's `data` property. Relative file URLs resolve
    /// against `base_dir`. Returns `None` when the view names no data.
    pub fn from_spec(spec: &ProvegaSpec, base_dir: &Path) -> Option<Self> {
        let data = spec.base_view.get("data")?;
        if let Some(values) = data.get("values").and_then(Json::as_array) {
            return Some(Self::inline(values.clone()));
        }
        let url = host_url(&spec.base_view)?;
        if is_ws_url(url) {
            return Some(Self::websocket(url));
        }
        let path = base_dir.join(url);
        let declared = data
            .get("format")
            .and_then(|f| f.get("type"))
            .and_then(Json::as_str);
        let format = format_for(&path, declared);
        Some(Self {
            kind: SourceKind::File { path, format },
            declared_row_count: None,
        })
    }

    pub fn is_progressive(&self) -> bool {
        matches!(self.kind, SourceKind::WebSocket(_))
    }

    pub fn known_row_count(&self) -> Option<usize> {
        match &self.kind {
            SourceKind::Inline(v) => Some(v.len()),
            _ => self.declared_row_count,
        }
    }
}

fn format_for(path: &Path, declared: Option<&str>) -> FileFormat {
    match declared {
        Some("json") => FileFormat::Json,
        Some(_) => FileFormat::Csv,
        None => match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => FileFormat::Json,
            _ => FileFormat::Csv,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    /// Every cell is null.
    Null,
    Integer,
    Float,
    Boolean,
    String,
}

impl ColumnType {
    fn join(self, other: ColumnType) -> ColumnType {
        use ColumnType::*;
        match (self, other) {
            (Null, t) | (t, Null) => t,
            (a, b) if a == b => a,
            (Integer, Float) | (Float, Integer) => Float,
            _ => String,
        }
    }

    fn of(v: &Value) -> ColumnType {
        match v {
            Value::Null => ColumnType::Null,
            Value::Bool(_) => ColumnType::Boolean,
            Value::Int(_) => ColumnType::Integer,
            Value::Float(_) => ColumnType::Float,
            Value::Str(_) => ColumnType::String,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

/// A fully loaded complete input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
}

impl Dataset {
    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Loads every row of a complete input.
pub fn load_complete(descriptor: &DataSourceDescriptor) -> Result<Dataset, DataError> {
    match &descriptor.kind {
        SourceKind::Inline(records) => records_to_dataset(records),
        SourceKind::File { path, format } => {
            let bytes = std::fs::read(path).map_err(|source| DataError::Io {
                path: path.clone(),
                source,
            })?;
            match format {
                FileFormat::Csv => parse_csv(&bytes),
                FileFormat::Json => parse_json_records(&bytes),
            }
        }
        SourceKind::WebSocket(url) => Err(DataError::NotComplete(url.clone())),
    }
}

/// Parses RFC 4180 CSV with a header row.
pub fn parse_csv(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(&e, 0))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::Empty);
    }
    check_header(&header)?;

    let mut cells: Vec<csv::StringRecord> = Vec::new();
    let mut types = vec![ColumnType::Null; header.len()];
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(&e, i + 1))?;
        for (t, cell) in types.iter_mut().zip(record.iter()) {
            *t = t.join(ColumnType::of(&classify(cell)));
        }
        cells.push(record);
    }
    if cells.is_empty() {
        return Err(DataError::Empty);
    }

    let rows = cells
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let values = header
                .iter()
                .zip(row.iter())
                .zip(&types)
                .map(|((name, cell), ty)| (name.clone(), typed_cell(cell, *ty)))
                .collect();
            Row::new(i as u64, values)
        })
        .collect();
    Ok(Dataset {
        columns: columns(header, types),
        rows,
    })
}

/// Parses a JSON array of flat record objects.
pub fn parse_json_records(bytes: &[u8]) -> Result<Dataset, DataError> {
    let doc: Json = serde_json::from_slice(bytes).map_err(|e| DataError::Format {
        record: 0,
        message: e.to_string(),
    })?;
    match doc {
        Json::Array(records) => records_to_dataset(&records),
        _ => Err(DataError::Format {
            record: 0,
            message: "expected an array of objects".into(),
        }),
    }
}

/// Converts record objects into rows. Columns are listed in first-seen order;
/// a record missing a column gets null.
pub fn records_to_dataset(records: &[Json]) -> Result<Dataset, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    let mut header: Vec<String> = Vec::new();
    let mut parsed: Vec<Record> = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let record = record_from_json(rec).map_err(|message| DataError::Format {
            record: i + 1,
            message,
        })?;
        for k in record.keys() {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
        parsed.push(record);
    }
    check_header(&header)?;
    let mut types = vec![ColumnType::Null; header.len()];
    for record in &parsed {
        for (t, name) in types.iter_mut().zip(&header) {
            if let Some(v) = record.get(name) {
                *t = t.join(ColumnType::of(v));
            }
        }
    }
    let rows = parsed
        .into_iter()
        .enumerate()
        .map(|(i, mut record)| {
            let values = header
                .iter()
                .zip(&types)
                .map(|(name, ty)| {
                    let v = record.shift_remove(name).unwrap_or(Value::Null);
                    (name.clone(), coerce(v, *ty))
                })
                .collect();
            Row::new(i as u64, values)
        })
        .collect();
    Ok(Dataset {
        columns: columns(header, types),
        rows,
    })
}

/// Converts one flat JSON object into a record, keeping key order.
pub fn record_from_json(v: &Json) -> Result<Record, String> {
    let Json::Object(map) = v else {
        return Err("expected an object".into());
    };
    map.iter()
        .map(|(k, v)| {
            if k == ID_KEY {
                return Err(format!("column name `{ID_KEY}` is reserved"));
            }
            Value::from_json(v)
                .map(|v| (k.clone(), v))
                .map_err(|e| format!("{k}: {e}"))
        })
        .collect()
}

fn check_header(header: &[String]) -> Result<(), DataError> {
    for (i, name) in header.iter().enumerate() {
        if name == ID_KEY {
            return Err(DataError::Format {
                record: 0,
                message: format!("column name `{ID_KEY}` is reserved"),
            });
        }
        if header[..i].contains(name) {
            return Err(DataError::Format {
                record: 0,
                message: format!("duplicate column `{name}`"),
            });
        }
    }
    Ok(())
}

fn columns(header: Vec<String>, types: Vec<ColumnType>) -> Vec<Column> {
    header
        .into_iter()
        .zip(types)
        .map(|(name, ty)| Column { name, ty })
        .collect()
}

fn csv_error(e: &csv::Error, record: usize) -> DataError {
    let record = e
        .position()
        .map(|p| p.record() as usize)
        .unwrap_or(record);
    DataError::Format {
        record,
        message: e.to_string(),
    }
}

/// The narrowest type a raw CSV cell parses as.
fn classify(cell: &str) -> Value {
    if cell.is_empty() {
        return Value::Null;
    }
    if let Ok(i) = cell.parse::<i64>() {
        return Value::Int(i);
    }
    if looks_numeric(cell) {
        if let Ok(f) = cell.parse::<f64>() {
            if f.is_finite() {
                return Value::Float(f);
            }
        }
    }
    match cell {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::Str(cell.to_owned()),
    }
}

/// Rejects the spellings `f64::from_str` accepts beyond plain decimals
/// (`inf`, `NaN`, `infinity`).
fn looks_numeric(cell: &str) -> bool {
    cell.bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'))
}

/// Reads a raw CSV cell as the column's final type. String columns keep the
/// cell text verbatim.
fn typed_cell(cell: &str, ty: ColumnType) -> Value {
    if cell.is_empty() {
        return Value::Null;
    }
    match ty {
        ColumnType::String | ColumnType::Null => Value::Str(cell.to_owned()),
        _ => coerce(classify(cell), ty),
    }
}

fn coerce(v: Value, ty: ColumnType) -> Value {
    match (v, ty) {
        (Value::Null, _) => Value::Null,
        (Value::Int(i), ColumnType::Float) => Value::Float(i as f64),
        (v @ Value::Str(_), _) => v,
        (v, ColumnType::String) => Value::Str(display(&v)),
        (v, _) => v,
    }
}

fn display(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Str(s) => s.clone(),
    }
}
