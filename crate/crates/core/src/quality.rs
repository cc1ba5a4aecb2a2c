//! Per-step quality indicators.
//!
//! Built-in definitions:
//! - absolute progress: `rows_emitted / total` for data and mixed chunking,
//!   `iterations / max_iterations` for process chunking, 1 at done;
//! - relative progress: `1 - |changed_t| / max_{s<=t} |changed_s|`, the share
//!   of the largest step's change budget this step did not need;
//! - stability: the processor's declared metric, `1 / (1 + d)` for a shift `d`;
//! - certainty: only from a field binding or a processor that declares one.
//!
//! A field binding reads the named column from the last row of the changeset
//! (last update, else last insert), clamped to `[0, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::processors::StabilitySource;
use crate::spec::{Binding, QualityBindings};
use crate::store::Changeset;
use crate::value::{Row, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySample {
    pub step: i64,
    pub t_ms: u64,
    pub absolute_progress: Option<f64>,
    pub relative_progress: Option<f64>,
    pub stability: Option<f64>,
    pub certainty: Option<f64>,
    pub etc_ms: Option<f64>,
    pub alive: bool,
}

impl QualitySample {
    /// The sample describing the empty start.
    pub fn empty(t_ms: u64, alive: bool) -> Self {
        Self {
            step: -1,
            t_ms,
            absolute_progress: None,
            relative_progress: None,
            stability: None,
            certainty: None,
            etc_ms: None,
            alive,
        }
    }

    pub fn metrics(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("absolute_progress", self.absolute_progress),
            ("relative_progress", self.relative_progress),
            ("stability", self.stability),
            ("certainty", self.certainty),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("quality binding `{metric}` names column `{field}`, which the data does not have")]
pub struct BindingError {
    pub metric: &'static str,
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeriesEntry {
    Sample { step: i64, value: Option<f64> },
    /// A backward step: later samples continue from `to_step`.
    Rewind { to_step: i64 },
}

/// Append-only per-metric history.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QualitySeries {
    pub metrics: BTreeMap<&'static str, Vec<SeriesEntry>>,
}

impl QualitySeries {
    fn push(&mut self, sample: &QualitySample) {
        for (name, value) in sample.metrics() {
            self.metrics.entry(name).or_default().push(SeriesEntry::Sample {
                step: sample.step,
                value,
            });
        }
    }

    fn rewind(&mut self, to_step: i64) {
        for (name, _) in QualitySample::empty(0, true).metrics() {
            self.metrics
                .entry(name)
                .or_default()
                .push(SeriesEntry::Rewind { to_step });
        }
    }

    /// True when every series' steps increase strictly between rewinds.
    pub fn is_well_formed(&self) -> bool {
        self.metrics.values().all(|entries| {
            let mut last = -1i64;
            let mut first = true;
            entries.iter().all(|e| match *e {
                SeriesEntry::Sample { step, .. } => {
                    let ok = first || step > last;
                    first = false;
                    last = step;
                    ok
                }
                SeriesEntry::Rewind { to_step } => {
                    let ok = to_step < last || first;
                    last = to_step;
                    first = false;
                    ok
                }
            })
        })
    }
}

/// Inputs describing the session at emission time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressInput {
    /// Built-in absolute progress, already resolved for the chunking type.
    pub builtin_progress: Option<f64>,
    /// Milliseconds since the session started.
    pub elapsed_ms: u64,
    pub done: bool,
    pub alive: bool,
}

/// `rows_emitted / total`, or `None` without a known positive total.
pub fn data_progress(rows_emitted: usize, total: Option<usize>) -> Option<f64> {
    match total {
        Some(t) if t > 0 => Some((rows_emitted as f64 / t as f64).min(1.0)),
        _ => None,
    }
}

/// `iterations / max_iterations`, or `None` without a declared bound.
pub fn iteration_progress(iterations: usize, max_iterations: Option<usize>) -> Option<f64> {
    match max_iterations {
        Some(m) if m > 0 => Some((iterations as f64 / m as f64).min(1.0)),
        _ => None,
    }
}

/// Linear estimate of the remaining time: `elapsed * (1 - p) / p`.
pub fn estimate_etc(elapsed_ms: f64, progress: Option<f64>) -> Option<f64> {
    match progress {
        Some(p) if p >= 1.0 => Some(0.0),
        Some(p) if p > 0.0 => Some(elapsed_ms * (1.0 - p) / p),
        _ => None,
    }
}

fn field_value(cs: &Changeset, field: &str) -> Option<Option<f64>> {
    let row: &Row = cs.updates.last().or(cs.inserts.last())?;
    Some(match row.get(field) {
        Some(v @ (Value::Int(_) | Value::Float(_))) => v.as_f64().map(|x| x.clamp(0.0, 1.0)),
        _ => None,
    })
}

/// Resolves quality samples for a session and keeps their history.
#[derive(Debug, Clone)]
pub struct QualityTracker {
    bindings: QualityBindings,
    stability: Option<StabilitySource>,
    certainty: Option<&'static str>,
    max_changed: usize,
    last_field: BTreeMap<&'static str, Option<f64>>,
    history: Vec<QualitySample>,
    redo: Vec<QualitySample>,
    series: QualitySeries,
}

impl QualityTracker {
    pub fn new(
        bindings: QualityBindings,
        stability: Option<StabilitySource>,
        certainty: Option<&'static str>,
    ) -> Self {
        Self {
            bindings,
            stability,
            certainty,
            max_changed: 0,
            last_field: BTreeMap::new(),
            history: Vec::new(),
            redo: Vec::new(),
            series: QualitySeries::default(),
        }
    }

    /// Checks that every field binding names one of `columns`.
    pub fn check_bindings<'a>(
        &self,
        columns: impl IntoIterator<Item = &'a str> + Clone,
    ) -> Result<(), BindingError> {
        for (metric, binding) in self.bindings.iter() {
            if let Binding::Field(f) = binding {
                if !columns.clone().into_iter().any(|c| c == f) {
                    return Err(BindingError {
                        metric,
                        field: f.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn series(&self) -> &QualitySeries {
        &self.series
    }

    /// The newest forward sample, or the empty-start sample.
    pub fn current(&self, t_ms: u64, alive: bool) -> QualitySample {
        match self.history.last() {
            Some(s) => QualitySample {
                t_ms,
                alive,
                ..s.clone()
            },
            None => QualitySample::empty(t_ms, alive),
        }
    }

    /// Samples a freshly applied forward changeset.
    pub fn sample(
        &mut self,
        cs: &Changeset,
        metrics: &BTreeMap<String, f64>,
        input: ProgressInput,
    ) -> QualitySample {
        let changed = cs.inserts.len() + cs.updates.len();
        self.max_changed = self.max_changed.max(changed);
        let builtin_progress = if input.done && input.builtin_progress.is_some() {
            Some(1.0)
        } else {
            input.builtin_progress
        };
        let mut resolve = |metric: &'static str, binding: &Binding, builtin: Option<f64>| {
            match binding {
                Binding::Off => None,
                Binding::Builtin => builtin,
                Binding::Field(f) => {
                    let slot = self.last_field.entry(metric).or_insert(None);
                    if let Some(v) = field_value(cs, f) {
                        *slot = v;
                    }
                    *slot
                }
            }
        };
        let bindings = self.bindings.clone();
        let relative = (self.max_changed > 0)
            .then(|| 1.0 - changed as f64 / self.max_changed as f64);
        let stability = match self.stability {
            Some(StabilitySource::Direct(m)) => metrics.get(m).map(|v| v.clamp(0.0, 1.0)),
            Some(StabilitySource::Shift(m)) => metrics.get(m).map(|d| 1.0 / (1.0 + d.abs())),
            None => None,
        };
        let certainty = self
            .certainty
            .and_then(|m| metrics.get(m))
            .map(|v| v.clamp(0.0, 1.0));

        let absolute = resolve(
            "absolute_progress",
            &bindings.absolute_progress,
            builtin_progress,
        );
        let relative = resolve("relative_progress", &bindings.relative_progress, relative);
        let stability = resolve("stability", &bindings.stability, stability);
        let certainty = resolve("certainty", &bindings.certainty, certainty);

        let progress = match bindings.absolute_progress {
            Binding::Field(_) => absolute,
            _ => builtin_progress,
        };
        let etc_ms = if input.done {
            Some(0.0)
        } else {
            estimate_etc(input.elapsed_ms as f64, progress)
        };
        let sample = QualitySample {
            step: cs.step,
            t_ms: input.elapsed_ms,
            absolute_progress: absolute,
            relative_progress: relative,
            stability,
            certainty,
            etc_ms,
            alive: input.alive,
        };
        self.history.push(sample.clone());
        self.redo.clear();
        self.series.push(&sample);
        sample
    }

    /// Records a backward step and returns the sample of the step now current.
    pub fn step_back(&mut self, t_ms: u64, alive: bool) -> QualitySample {
        if let Some(s) = self.history.pop() {
            self.redo.push(s);
        }
        let current = self.current(t_ms, alive);
        self.series.rewind(current.step);
        current
    }

    /// Records a replayed forward step and returns its original sample.
    pub fn step_redo(&mut self, t_ms: u64, alive: bool) -> Option<QualitySample> {
        let s = self.redo.pop()?;
        self.history.push(s);
        let current = self.current(t_ms, alive);
        self.series.push(&current);
        Some(current)
    }
}
