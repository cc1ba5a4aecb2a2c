use std::collections::{BTreeMap, VecDeque};

use indexmap::IndexMap;
use serde_json::Value as Json;

use super::plan::{plan_chunks, replan};
use super::{coalesce, ControlAction, IntervalStats, SessionError, SessionState, Status};
use crate::data_source::{record_from_json, records_to_dataset, Column, Dataset};
use crate::processors::{self, Processor, ProcessorMode};
use crate::quality::{data_progress, iteration_progress, ProgressInput, QualitySample, QualityTracker};
use crate::spec::{ChunkingType, ProvegaSpec, SpecError};
use crate::store::{ChangeReport, Changeset, ChangesetStore, DEFAULT_HISTORY_CAPACITY};
use crate::value::{Record, Row, RowId, Value};

/// Aliveness flips off after this many quiet periods.
const ALIVE_PERIODS: u64 = 5;
/// Cadence assumed for generator-driven sessions without a rendering interval.
const PROGRESSIVE_PERIOD_MS: u64 = 1000;

pub enum SessionInput {
    /// Every row is known up front; the engine chunks it.
    Complete(Dataset),
    /// Rows arrive in batches through [`Session::push_batch`].
    Progressive,
}

/// One emitted changeset with its monitoring payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub changeset: Changeset,
    pub report: ChangeReport,
    pub quality: QualitySample,
    /// Generator batches committed by this changeset.
    pub batches: Vec<u64>,
    /// Data rows in the state after this changeset.
    pub rows_emitted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusUpdate {
    pub status: Status,
    pub alive: bool,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Changeset(Emission),
    Status(StatusUpdate),
    /// Batch `b` is committed and logged; the generator may send more.
    Ack(u64),
}

/// A progression over one dataset.
///
/// All methods take `now`, the number of milliseconds since the session was
/// created, and return the outputs to deliver in order. Callers drive time by
/// calling [`Session::poll`] at or after [`Session::next_deadline`].
pub struct Session {
    spec: ProvegaSpec,
    kind: ChunkingType,
    progressive: bool,
    columns: Vec<Column>,
    total_rows: Option<usize>,

    source: Vec<Row>,
    remaining: VecDeque<Vec<usize>>,
    consumed_chunks: usize,
    process_loaded: bool,

    buffer: VecDeque<(u64, Vec<Row>)>,
    input_ended: bool,
    next_row_id: u64,

    processor: Option<Box<dyn Processor>>,
    idle_iterations: usize,
    last_metrics: BTreeMap<String, f64>,

    frontier: BTreeMap<RowId, Row>,
    store: ChangesetStore,
    quality: QualityTracker,
    pending: Vec<Changeset>,
    pending_batches: Vec<u64>,

    status: Status,
    next_tick: Option<u64>,
    flush_at: Option<u64>,
    started_at: Option<u64>,
    last_emit: Option<u64>,
    last_activity: u64,
    alive: bool,
    intervals: IntervalStats,
    rows_emitted: usize,
    error: Option<String>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("status", &self.status)
            .field("step", &self.store.step())
            .field("rows_emitted", &self.rows_emitted)
            .finish_non_exhaustive()
    }
}

fn merge(row: &mut Row, values: Record) {
    for (k, v) in values {
        row.values.insert(k, v);
    }
}

fn apply_to(table: &mut BTreeMap<RowId, Row>, cs: &Changeset) {
    for r in cs.inserts.iter().chain(&cs.updates) {
        table.insert(r.id, r.clone());
    }
    for id in &cs.removes {
        table.remove(id);
    }
}

fn data_delta(cs: &Changeset) -> isize {
    let data = |id: &RowId| !id.is_derived();
    cs.inserts.iter().map(|r| &r.id).filter(|id| data(id)).count() as isize
        - cs.removes.iter().filter(|id| data(id)).count() as isize
}

impl Session {
    pub fn new(spec: ProvegaSpec, input: SessionInput) -> Result<Self, SessionError> {
        Self::with_history(spec, input, DEFAULT_HISTORY_CAPACITY)
    }

    pub fn with_history(
        mut spec: ProvegaSpec,
        input: SessionInput,
        history_capacity: usize,
    ) -> Result<Self, SessionError> {
        let kind = spec.chunking().kind;
        let progressive = matches!(input, SessionInput::Progressive);
        let processor = match &spec.chunking().processor {
            Some(p) => {
                let mode = if kind == ChunkingType::Process {
                    ProcessorMode::Process
                } else {
                    ProcessorMode::Incremental
                };
                Some(processors::build(p, mode)?)
            }
            None => None,
        };
        let quality = QualityTracker::new(
            spec.monitoring().quality.clone(),
            processor.as_ref().and_then(|p| p.stability_source()),
            processor.as_ref().and_then(|p| p.certainty_metric()),
        );
        let store = ChangesetStore::with_capacity(
            spec.monitoring().change,
            spec.encodings(),
            history_capacity,
        );

        let mut session = Session {
            kind,
            progressive,
            columns: Vec::new(),
            total_rows: None,
            source: Vec::new(),
            remaining: VecDeque::new(),
            consumed_chunks: 0,
            process_loaded: false,
            buffer: VecDeque::new(),
            input_ended: false,
            next_row_id: 0,
            processor,
            idle_iterations: 0,
            last_metrics: BTreeMap::new(),
            frontier: BTreeMap::new(),
            store,
            quality,
            pending: Vec::new(),
            pending_batches: Vec::new(),
            status: Status::Idle,
            next_tick: None,
            flush_at: None,
            started_at: None,
            last_emit: None,
            last_activity: 0,
            alive: true,
            intervals: IntervalStats::default(),
            rows_emitted: 0,
            error: None,
            spec: spec.clone(),
        };

        match input {
            SessionInput::Progressive => {
                if spec.chunking().reading.is_some() {
                    return Err(SpecError::validation(
                        "provega.progression.chunking.reading",
                        "reading is not allowed with a progressive (WebSocket) input",
                    )
                    .into());
                }
                if kind == ChunkingType::Process {
                    return Err(SpecError::validation(
                        "provega.progression.chunking.type",
                        "process chunking requires a complete input",
                    )
                    .into());
                }
            }
            SessionInput::Complete(data) => {
                let Some(reading) = spec.progression.chunking.reading.as_mut() else {
                    return Err(SpecError::validation(
                        "provega.progression.chunking.reading",
                        "reading is required when the engine chunks a complete input",
                    )
                    .into());
                };
                reading.resolve_chunk_size(data.len());
                let plan = plan_chunks(data.len(), reading)?;
                session.spec = spec;
                session.remaining = plan.chunks.into();
                session.total_rows = Some(data.len());
                session.next_row_id = data.len() as u64;
                session.columns = data.columns;
                session.source = data.rows;
                session.check_bindings()?;
            }
        }
        Ok(session)
    }

    fn check_bindings(&self) -> Result<(), SessionError> {
        let mut names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        if let Some(p) = &self.processor {
            names.extend(p.descriptor().output_columns.iter().map(String::as_str));
        }
        self.quality.check_bindings(names.iter().copied())?;
        Ok(())
    }

    // Accessors.

    pub fn spec(&self) -> &ProvegaSpec {
        &self.spec
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn total_rows(&self) -> Option<usize> {
        self.total_rows
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn store(&self) -> &ChangesetStore {
        &self.store
    }

    pub fn quality(&self) -> &QualityTracker {
        &self.quality
    }

    pub fn processor(&self) -> Option<&dyn Processor> {
        self.processor.as_deref()
    }

    /// Diagnostic of the error that stopped the session, if any.
    pub fn error(&self) -> Option<&str> {
        self.error.as_deref()
    }

    /// Rows received or pending but not yet in the store.
    pub fn buffered_rows(&self) -> usize {
        self.buffer.iter().map(|(_, r)| r.len()).sum::<usize>()
            + self.pending.iter().map(|c| c.inserts.len()).sum::<usize>()
    }

    pub fn buffered_batches(&self) -> usize {
        self.buffer.len()
    }

    pub fn state(&self) -> SessionState {
        let total_steps = match (self.kind, &self.processor) {
            (ChunkingType::Data, _) if !self.progressive => {
                Some(self.consumed_chunks + self.remaining.len())
            }
            (ChunkingType::Process, Some(p)) => p.max_iterations(),
            _ => None,
        };
        SessionState {
            status: self.status,
            step: self.store.step(),
            total_steps,
            rows_emitted: self.rows_emitted,
            started_at: self.started_at,
            last_emit_at: self.last_emit,
            emit_intervals: self.intervals,
            mode: self.spec.control().mode,
            alive: self.alive,
        }
    }

    /// The whole current state as inserts, for a client joining late.
    pub fn catch_up(&self, now: u64) -> Emission {
        Emission {
            changeset: Changeset {
                emitted_at: now,
                ..self.store.catch_up()
            },
            report: ChangeReport {
                changed_ids: Vec::new(),
                changed_area: None,
                highlight_duration: self.spec.monitoring().change.mark.highlight_duration,
            },
            quality: self.quality.current(self.elapsed(now), self.alive),
            batches: Vec::new(),
            rows_emitted: self.rows_emitted,
        }
    }

    /// The earliest time at which [`Session::poll`] has work to do.
    pub fn next_deadline(&self) -> Option<u64> {
        if self.status != Status::Running {
            return None;
        }
        let alive_check = self.alive.then(|| self.alive_deadline() + 1);
        [self.next_tick, self.flush_at, alive_check]
            .into_iter()
            .flatten()
            .min()
    }

    // Lifecycle.

    pub fn start(&mut self, now: u64) -> Result<Vec<Output>, SessionError> {
        if self.status != Status::Idle {
            return Err(self.illegal("start", "the session has already started"));
        }
        self.started_at = Some(now);
        self.last_activity = now;
        let mut out = Vec::new();
        if self.spec.control().mode == crate::spec::Mode::Exploration {
            self.status = Status::Paused;
            out.push(self.status_output(None));
        } else {
            self.status = Status::Running;
            self.arm_timer(now);
            out.push(self.status_output(None));
            self.drain(now, &mut out);
        }
        Ok(out)
    }

    pub fn control(
        &mut self,
        action: ControlAction,
        now: u64,
    ) -> Result<Vec<Output>, SessionError> {
        let control = self.spec.control().clone();
        let mut out = Vec::new();
        match action {
            ControlAction::Play => {
                if self.status != Status::Paused {
                    return Err(self.illegal(action.as_str(), "only a paused session can play"));
                }
                self.status = Status::Running;
                self.last_activity = now;
                self.arm_timer(now);
                out.push(self.status_output(None));
                self.drain(now, &mut out);
            }
            ControlAction::Pause => {
                if !control.pause_enabled {
                    return Err(SessionError::Disabled(action));
                }
                if self.status != Status::Running {
                    return Err(self.illegal(action.as_str(), "only a running session can pause"));
                }
                self.flush(now, false, &mut out);
                self.status = Status::Paused;
                self.next_tick = None;
                out.push(self.status_output(None));
            }
            ControlAction::Stop => {
                if !control.stop_enabled {
                    return Err(SessionError::Disabled(action));
                }
                if !matches!(self.status, Status::Running | Status::Paused) {
                    return Err(self.illegal(action.as_str(), "the session is not active"));
                }
                self.flush(now, false, &mut out);
                self.halt(Status::Stopped);
                out.push(self.status_output(None));
            }
            ControlAction::StepForward => {
                if !control.step_enabled {
                    return Err(SessionError::Disabled(action));
                }
                match self.status {
                    Status::Paused => {
                        if !self.advance(now, &mut out) {
                            if !self.finished() {
                                return Err(self.illegal(action.as_str(), "no data is ready"));
                            }
                            self.finish(now, &mut out);
                        }
                    }
                    Status::Done | Status::Stopped if self.store.can_redo() => {
                        self.redo(now, &mut out);
                    }
                    _ => {
                        return Err(self.illegal(
                            action.as_str(),
                            "stepping forward needs a paused session",
                        ))
                    }
                }
            }
            ControlAction::StepBackward => {
                if !control.step_enabled {
                    return Err(SessionError::Disabled(action));
                }
                if !matches!(self.status, Status::Paused | Status::Done | Status::Stopped) {
                    return Err(self.illegal(
                        action.as_str(),
                        "stepping back needs a paused or finished session",
                    ));
                }
                if self.store.step() < 0 {
                    return Err(self.illegal(action.as_str(), "nothing has been emitted"));
                }
                let (mut cs, report) = self.store.invert_last()?;
                cs.emitted_at = now;
                apply_to(&mut self.frontier, &cs);
                self.rows_emitted = (self.rows_emitted as isize + data_delta(&cs)) as usize;
                let quality = self.quality.step_back(self.elapsed(now), self.alive);
                out.push(Output::Changeset(Emission {
                    changeset: cs,
                    report,
                    quality,
                    batches: Vec::new(),
                    rows_emitted: self.rows_emitted,
                }));
            }
        }
        Ok(out)
    }

    /// Changes a reading or rendering parameter from the next tick on.
    pub fn set_parameter(
        &mut self,
        key: &str,
        value: &Json,
        now: u64,
    ) -> Result<Vec<Output>, SessionError> {
        if self.status == Status::Stopped {
            return Err(self.illegal("set", "the session is stopped"));
        }
        let reading_path = |k: &str| format!("provega.progression.chunking.reading.{k}");
        let positive = |path: String| {
            value
                .as_u64()
                .filter(|v| *v >= 1)
                .ok_or_else(|| SpecError::validation(path, "expected an integer of at least 1"))
        };
        let mut out = Vec::new();
        match key {
            "frequency" | "chunk_size" => {
                let path = reading_path(key);
                let v = positive(path.clone())?;
                let Some(reading) = self.spec.progression.chunking.reading.as_mut() else {
                    return Err(SpecError::validation(
                        path,
                        "the generator controls chunking for progressive inputs",
                    )
                    .into());
                };
                if key == "frequency" {
                    reading.frequency_ms = v;
                    if self.status == Status::Running && !self.progressive {
                        // Phase restarts at the change.
                        self.next_tick = Some(now + v);
                    }
                } else {
                    let size = usize::try_from(v)
                        .map_err(|_| SpecError::validation(path, "too large"))?;
                    reading.chunk_size = size;
                    reading.auto_chunk_size = false;
                    self.remaining = replan(&self.remaining, size);
                }
            }
            "min_rendering_frequency" => {
                let path = "provega.progression.control.min_rendering_frequency".to_owned();
                let v = if value.is_null() {
                    None
                } else {
                    Some(positive(path)?)
                };
                self.spec.progression.control.min_rendering_frequency = v;
                if self.status == Status::Running {
                    self.maybe_flush(now, &mut out);
                }
            }
            other => {
                return Err(SpecError::validation(
                    other,
                    "settable keys are frequency, chunk_size and min_rendering_frequency",
                )
                .into())
            }
        }
        Ok(out)
    }

    /// Runs whatever is due at `now`: ticks, deferred emissions, aliveness.
    pub fn poll(&mut self, now: u64) -> Vec<Output> {
        let mut out = Vec::new();
        if self.status != Status::Running {
            return out;
        }
        if self.flush_at.is_some_and(|t| t <= now) {
            self.flush(now, false, &mut out);
        }
        if let Some(deadline) = self.next_tick.filter(|t| *t <= now) {
            let period = self.period();
            let mut next = deadline + period;
            if next <= now {
                // A whole period was missed: emit now and restart the phase.
                next = now + period;
            }
            self.next_tick = Some(next);
            self.advance(now, &mut out);
        }
        if self.status == Status::Running && self.alive && now > self.alive_deadline() {
            self.alive = false;
            out.push(self.status_output(None));
        }
        out
    }

    /// Accepts one generator batch. Rows get the next free ids.
    pub fn push_batch(
        &mut self,
        batch: u64,
        records: &[Json],
        now: u64,
    ) -> Result<Vec<Output>, SessionError> {
        if !self.progressive {
            return Err(SessionError::Protocol(
                "this session reads a complete input".into(),
            ));
        }
        if matches!(self.status, Status::Done | Status::Stopped) || self.input_ended {
            return Ok(Vec::new());
        }
        if self.columns.is_empty() {
            let data = records_to_dataset(records)
                .map_err(|e| SessionError::Protocol(e.to_string()))?;
            self.columns = data.columns;
            if let Err(e) = self.check_bindings() {
                let mut out = Vec::new();
                self.fail(now, e.to_string(), &mut out);
                return Ok(out);
            }
        }
        let mut rows = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let mut values =
                record_from_json(rec).map_err(|e| SessionError::Protocol(format!("row {i}: {e}")))?;
            if let Some(k) = values.keys().find(|k| !self.columns.iter().any(|c| &c.name == *k)) {
                return Err(SessionError::Protocol(format!(
                    "row {i}: column `{k}` is not in the stream's header"
                )));
            }
            let mut full = Record::with_capacity(self.columns.len());
            for c in &self.columns {
                full.insert(c.name.clone(), values.shift_remove(&c.name).unwrap_or(Value::Null));
            }
            rows.push(Row::new(self.next_row_id + i as u64, full));
        }
        self.next_row_id += rows.len() as u64;
        self.buffer.push_back((batch, rows));
        let mut out = Vec::new();
        if self.status == Status::Running {
            self.drain(now, &mut out);
        }
        Ok(out)
    }

    /// The generator finished (`end`) or went away.
    pub fn end_input(&mut self, now: u64, disconnected: bool) -> Vec<Output> {
        let mut out = Vec::new();
        if self.input_ended || matches!(self.status, Status::Done | Status::Stopped) {
            return out;
        }
        self.input_ended = true;
        if disconnected {
            out.push(self.status_output(Some("generator disconnected".into())));
        }
        if self.status == Status::Running {
            self.drain(now, &mut out);
            if self.status == Status::Running {
                if self.finished() {
                    self.finish(now, &mut out);
                } else {
                    self.arm_timer(now);
                }
            }
        }
        out
    }

    // Internals.

    fn illegal(&self, action: &'static str, reason: &str) -> SessionError {
        SessionError::IllegalTransition {
            action,
            status: self.status,
            reason: reason.into(),
        }
    }

    fn elapsed(&self, now: u64) -> u64 {
        now.saturating_sub(self.started_at.unwrap_or(0))
    }

    fn period(&self) -> u64 {
        match &self.spec.chunking().reading {
            Some(r) if !self.progressive => r.frequency_ms,
            _ => self
                .spec
                .control()
                .min_rendering_frequency
                .unwrap_or(PROGRESSIVE_PERIOD_MS),
        }
    }

    fn alive_deadline(&self) -> u64 {
        let mut period = self.period();
        if let Some(m) = self.spec.control().min_rendering_frequency {
            period = period.max(m);
        }
        self.last_activity + ALIVE_PERIODS * period
    }

    fn arm_timer(&mut self, now: u64) {
        // Generator-driven sessions tick on arrivals, and on a timer only to
        // finish iterating after the input ends.
        let timed = !self.progressive || (self.input_ended && self.processor.is_some());
        self.next_tick = timed.then(|| now + self.period());
    }

    fn status_output(&self, warning: Option<String>) -> Output {
        Output::Status(StatusUpdate {
            status: self.status,
            alive: self.alive,
            warning,
        })
    }

    fn halt(&mut self, status: Status) {
        self.status = status;
        self.next_tick = None;
        self.flush_at = None;
    }

    /// Ticks through buffered generator batches while running.
    fn drain(&mut self, now: u64, out: &mut Vec<Output>) {
        if !self.progressive {
            return;
        }
        while self.status == Status::Running && !self.buffer.is_empty() {
            self.advance(now, out);
        }
        if self.status == Status::Running && self.input_ended && self.buffer.is_empty() {
            if self.finished() {
                self.finish(now, out);
            } else if self.next_tick.is_none() {
                self.arm_timer(now);
            }
        }
    }

    /// One step forward: replays an undone step if there is one, else
    /// computes the next. Returns false when there was nothing to do.
    fn advance(&mut self, now: u64, out: &mut Vec<Output>) -> bool {
        if self.pending.is_empty() && self.store.can_redo() {
            self.redo(now, out);
            return true;
        }
        match self.compute(now) {
            Ok(None) => false,
            Ok(Some((cs, batches))) => {
                self.pending.push(cs);
                self.pending_batches.extend(batches);
                if self.finished() {
                    self.finish(now, out);
                } else if self.status == Status::Running {
                    self.maybe_flush(now, out);
                } else {
                    self.flush(now, false, out);
                }
                true
            }
            Err(e) => {
                self.fail(now, e.to_string(), out);
                true
            }
        }
    }

    fn input_exhausted(&self) -> bool {
        if self.progressive {
            self.input_ended && self.buffer.is_empty()
        } else {
            self.remaining.is_empty() && (self.kind != ChunkingType::Process || self.process_loaded)
        }
    }

    fn processor_done(&self) -> bool {
        let Some(p) = &self.processor else {
            return true;
        };
        if p.converged() {
            return true;
        }
        let max = p.max_iterations().unwrap_or(usize::MAX);
        match self.kind {
            ChunkingType::Process => p.iterations() >= max,
            _ => self.idle_iterations >= max,
        }
    }

    fn finished(&self) -> bool {
        match self.kind {
            ChunkingType::Data => self.input_exhausted(),
            ChunkingType::Process => self.process_loaded && self.processor_done(),
            ChunkingType::Mixed => self.input_exhausted() && self.processor_done(),
        }
    }

    /// Produces the next raw changeset, or `None` when no input is ready.
    fn compute(&mut self, now: u64) -> Result<Option<(Changeset, Vec<u64>)>, SessionError> {
        let mut batches = Vec::new();
        let new_rows: Vec<Row> = if self.progressive {
            match self.buffer.pop_front() {
                Some((b, rows)) => {
                    batches.push(b);
                    rows
                }
                None if self.input_ended && self.kind == ChunkingType::Mixed => Vec::new(),
                None => return Ok(None),
            }
        } else if self.kind == ChunkingType::Process {
            if self.process_loaded {
                Vec::new()
            } else {
                self.process_loaded = true;
                self.source.clone()
            }
        } else {
            match self.remaining.pop_front() {
                Some(chunk) => {
                    self.consumed_chunks += 1;
                    chunk.iter().map(|&i| self.source[i].clone()).collect()
                }
                None if self.kind == ChunkingType::Mixed => Vec::new(),
                None => return Ok(None),
            }
        };

        let mut inserts: IndexMap<RowId, Row> = new_rows.into_iter().map(|r| (r.id, r)).collect();
        let mut updates: IndexMap<RowId, Row> = IndexMap::new();
        let mut removes = Vec::new();
        if let Some(p) = self.processor.as_mut() {
            let fresh: Vec<Row> = inserts.values().filter(|r| !r.id.is_derived()).cloned().collect();
            if fresh.is_empty() {
                self.idle_iterations += 1;
            } else if self.kind != ChunkingType::Process || p.iterations() == 0 {
                p.ingest(&fresh)?;
            }
            let result = p.iterate()?;
            if !result.metrics.is_empty() {
                self.last_metrics = result.metrics.clone();
            }
            for patch in result.patches {
                if let Some(row) = inserts.get_mut(&patch.id) {
                    merge(row, patch.values);
                } else if let Some(row) = updates.get_mut(&patch.id) {
                    merge(row, patch.values);
                } else if let Some(prior) = self.frontier.get(&patch.id) {
                    let mut row = prior.clone();
                    merge(&mut row, patch.values);
                    updates.insert(row.id, row);
                } else {
                    return Err(crate::store::StoreError::Conflict {
                        id: patch.id,
                        reason: "processor patched an unknown row",
                    }
                    .into());
                }
            }
            for row in result.inserts {
                inserts.insert(row.id, row);
            }
            removes = result.removes;
        }

        let mut cs = Changeset::forward(self.store.step() + 1);
        cs.emitted_at = now;
        cs.inserts = inserts.into_values().collect();
        cs.updates = updates.into_values().collect();
        cs.removes = removes;
        apply_to(&mut self.frontier, &cs);
        Ok(Some((cs, batches)))
    }

    fn maybe_flush(&mut self, now: u64, out: &mut Vec<Output>) {
        if self.pending.is_empty() {
            self.flush_at = None;
            return;
        }
        match (self.spec.control().min_rendering_frequency, self.last_emit) {
            (Some(min), Some(last)) if now < last + min => self.flush_at = Some(last + min),
            _ => self.flush(now, false, out),
        }
    }

    /// Merges pending changesets and commits them as one step.
    fn flush(&mut self, now: u64, done: bool, out: &mut Vec<Output>) {
        self.flush_at = None;
        if self.pending.is_empty() {
            return;
        }
        let mut merged = coalesce(std::mem::take(&mut self.pending));
        merged.emitted_at = now;
        let batches = std::mem::take(&mut self.pending_batches);
        let report = match self.store.apply(merged.clone()) {
            Ok(r) => r,
            Err(e) => {
                self.error = Some(e.to_string());
                self.halt(Status::Stopped);
                out.push(self.status_output(Some(e.to_string())));
                return;
            }
        };
        merged.step = self.store.step();
        self.rows_emitted = (self.rows_emitted as isize + data_delta(&merged)) as usize;
        let builtin_progress = match self.kind {
            ChunkingType::Process => self
                .processor
                .as_ref()
                .and_then(|p| iteration_progress(p.iterations(), p.max_iterations())),
            _ => data_progress(self.rows_emitted, self.total_rows),
        };
        let quality = self.quality.sample(
            &merged,
            &self.last_metrics,
            ProgressInput {
                builtin_progress,
                elapsed_ms: self.elapsed(now),
                done,
                alive: true,
            },
        );
        self.note_emission(now, out);
        let acks = self.spec.control().ack_flow_control;
        out.push(Output::Changeset(Emission {
            changeset: merged,
            report,
            quality,
            batches: batches.clone(),
            rows_emitted: self.rows_emitted,
        }));
        if acks {
            out.extend(batches.into_iter().map(Output::Ack));
        }
        for w in self.store.take_warnings() {
            out.push(self.status_output(Some(w)));
        }
    }

    fn note_emission(&mut self, now: u64, out: &mut Vec<Output>) {
        if let Some(last) = self.last_emit {
            self.intervals.push(now.saturating_sub(last) as f64);
        }
        self.last_emit = Some(now);
        self.last_activity = now;
        if !self.alive {
            self.alive = true;
            out.push(self.status_output(None));
        }
    }

    fn redo(&mut self, now: u64, out: &mut Vec<Output>) {
        let Some((mut cs, report)) = self.store.redo() else {
            return;
        };
        cs.emitted_at = now;
        apply_to(&mut self.frontier, &cs);
        self.rows_emitted = (self.rows_emitted as isize + data_delta(&cs)) as usize;
        let quality = self
            .quality
            .step_redo(self.elapsed(now), self.alive)
            .unwrap_or_else(|| self.quality.current(self.elapsed(now), self.alive));
        self.note_emission(now, out);
        out.push(Output::Changeset(Emission {
            changeset: cs,
            report,
            quality,
            batches: Vec::new(),
            rows_emitted: self.rows_emitted,
        }));
    }

    fn finish(&mut self, now: u64, out: &mut Vec<Output>) {
        if self.pending.is_empty() {
            // The final step must carry the completed quality sample.
            self.pending.push(Changeset::forward(self.store.step() + 1));
        }
        self.flush(now, true, out);
        if self.status == Status::Stopped {
            return;
        }
        self.halt(Status::Done);
        out.push(self.status_output(None));
    }

    fn fail(&mut self, now: u64, message: String, out: &mut Vec<Output>) {
        self.flush(now, false, out);
        self.error = Some(message.clone());
        self.halt(Status::Stopped);
        out.push(self.status_output(Some(message)));
    }
}
