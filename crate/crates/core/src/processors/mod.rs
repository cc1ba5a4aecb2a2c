//! Iterative computations for process and mixed chunking.
//!
//! A processor owns the feature data it needs. The scheduler feeds it rows
//! ([`Processor::ingest`]) and asks for one iteration at a time
//! ([`Processor::iterate`]); the result patches existing rows by id and may
//! insert or remove derived rows whose ids live above
//! [`crate::value::DERIVED_ID_BASE`].

mod density;
mod kmeans;

use std::collections::BTreeMap;

use serde_json::{Map, Value as Json};

pub use density::{Density, DensityParams};
pub use kmeans::{init_centroids, lloyd_step, KMeans, KMeansParams, LloydStep, CONVERGENCE_SHIFT};

use crate::value::{Record, Row, RowId};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ProcessorError {
    #[error("need at least {needed} rows, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("row {id}: column `{column}` is missing or not numeric")]
    NonNumeric { id: RowId, column: String },
    #[error("invalid parameter `{key}`: {message}")]
    Parameter { key: String, message: String },
}

/// How iterations relate to the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessorMode {
    /// All data is present before the first iteration.
    Process,
    /// Data keeps arriving between iterations.
    Incremental,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorDescriptor {
    pub name: String,
    pub parameters: Map<String, Json>,
    pub output_columns: Vec<String>,
    pub metrics: Vec<String>,
}

/// Column values to overwrite on one existing row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPatch {
    pub id: RowId,
    pub values: Record,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationResult {
    pub patches: Vec<RowPatch>,
    /// Derived rows that appear this iteration.
    pub inserts: Vec<Row>,
    /// Derived rows that disappear this iteration.
    pub removes: Vec<RowId>,
    pub metrics: BTreeMap<String, f64>,
    pub converged: bool,
}

impl IterationResult {
    pub fn is_noop(&self) -> bool {
        self.patches.is_empty() && self.inserts.is_empty() && self.removes.is_empty()
    }
}

/// Where a built-in stability indicator comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilitySource {
    /// A metric already in `[0, 1]`.
    Direct(&'static str),
    /// A shift metric `d`, mapped to `1 / (1 + d)`.
    Shift(&'static str),
}

pub trait Processor: Send + std::fmt::Debug {
    fn descriptor(&self) -> &ProcessorDescriptor;

    /// Adds rows to the processor's working set.
    fn ingest(&mut self, rows: &[Row]) -> Result<(), ProcessorError>;

    fn iterate(&mut self) -> Result<IterationResult, ProcessorError>;

    fn iterations(&self) -> usize;

    /// Upper bound on iterations over a fixed dataset, when the processor has one.
    fn max_iterations(&self) -> Option<usize>;

    /// True when the last iteration converged and no rows arrived since.
    fn converged(&self) -> bool;

    fn stability_source(&self) -> Option<StabilitySource>;

    /// Metric holding a certainty value in `[0, 1]`, if any.
    fn certainty_metric(&self) -> Option<&'static str> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamError {
    pub key: String,
    pub message: String,
}

impl ParamError {
    pub(crate) fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_owned(),
            message: message.into(),
        }
    }
}

/// A registered processor.
pub struct ProcessorKind {
    pub name: &'static str,
    /// Validates parameters and fills defaults.
    pub normalize: fn(&Map<String, Json>) -> Result<Map<String, Json>, ParamError>,
    pub build: fn(&Map<String, Json>, ProcessorMode) -> Result<Box<dyn Processor>, ProcessorError>,
}

static REGISTRY: &[ProcessorKind] = &[
    ProcessorKind {
        name: "kmeans",
        normalize: kmeans::normalize,
        build: kmeans::build,
    },
    ProcessorKind {
        name: "density",
        normalize: density::normalize,
        build: density::build,
    },
];

pub fn lookup(name: &str) -> Option<&'static ProcessorKind> {
    REGISTRY.iter().find(|k| k.name == name)
}

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|k| k.name).collect()
}

/// Builds a processor from a validated spec entry.
pub fn build(
    spec: &crate::spec::ProcessorSpec,
    mode: ProcessorMode,
) -> Result<Box<dyn Processor>, ProcessorError> {
    let kind = lookup(&spec.name).ok_or_else(|| ProcessorError::Parameter {
        key: "name".into(),
        message: format!("unknown processor `{}`", spec.name),
    })?;
    (kind.build)(&spec.params, mode)
}

// Parameter helpers shared by the processors.

pub(crate) fn check_keys(params: &Map<String, Json>, allowed: &[&str]) -> Result<(), ParamError> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(ParamError::new(
            k,
            format!("unknown parameter (allowed: {})", allowed.join(", ")),
        )),
        None => Ok(()),
    }
}

pub(crate) fn uint_param(
    params: &Map<String, Json>,
    key: &str,
    default: Option<u64>,
    min: u64,
) -> Result<u64, ParamError> {
    match params.get(key) {
        None => default.ok_or_else(|| ParamError::new(key, "required")),
        Some(v) => match v.as_u64() {
            Some(n) if n >= min => Ok(n),
            Some(n) => Err(ParamError::new(key, format!("must be at least {min}, found {n}"))),
            None => Err(ParamError::new(key, "expected a non-negative integer")),
        },
    }
}

pub(crate) fn str_param(
    params: &Map<String, Json>,
    key: &str,
    default: &str,
) -> Result<String, ParamError> {
    match params.get(key) {
        None => Ok(default.to_owned()),
        Some(Json::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(_) => Err(ParamError::new(key, "expected a non-empty string")),
    }
}

pub(crate) fn extent_param(
    params: &Map<String, Json>,
    key: &str,
) -> Result<Option<[f64; 2]>, ParamError> {
    match params.get(key) {
        None | Some(Json::Null) => Ok(None),
        Some(Json::Array(a)) if a.len() == 2 => {
            let lo = a[0].as_f64();
            let hi = a[1].as_f64();
            match (lo, hi) {
                (Some(lo), Some(hi)) if lo < hi => Ok(Some([lo, hi])),
                _ => Err(ParamError::new(key, "expected [min, max] with min < max")),
            }
        }
        Some(_) => Err(ParamError::new(key, "expected [min, max]")),
    }
}

pub(crate) fn param_error(e: ParamError) -> ProcessorError {
    ProcessorError::Parameter {
        key: e.key,
        message: e.message,
    }
}

pub(crate) fn feature(row: &Row, column: &str) -> Result<f64, ProcessorError> {
    row.get(column)
        .and_then(crate::value::Value::as_f64)
        .ok_or_else(|| ProcessorError::NonNumeric {
            id: row.id,
            column: column.to_owned(),
        })
}
