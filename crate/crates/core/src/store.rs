//! Authoritative dataset state and per-step history.
//!
//! Every forward changeset is logged together with its inverse, so stepping
//! back is exact: the inverse of an insert removes it, the inverse of an update
//! restores the prior row, the inverse of a remove re-inserts the prior row.
//! Undone entries move to a redo stack and stepping forward again replays them
//! verbatim.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::spec::{ChangeConfig, Encodings};
use crate::value::{Row, RowId};

pub const DEFAULT_HISTORY_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// One step's delta.
#[derive(Debug, Clone, PartialEq)]
pub struct Changeset {
    pub step: i64,
    pub inserts: Vec<Row>,
    pub updates: Vec<Row>,
    pub removes: Vec<RowId>,
    pub emitted_at: u64,
    pub direction: Direction,
}

impl Changeset {
    pub fn forward(step: i64) -> Self {
        Self {
            step,
            inserts: Vec::new(),
            updates: Vec::new(),
            removes: Vec::new(),
            emitted_at: 0,
            direction: Direction::Forward,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inserts.is_empty() && self.updates.is_empty() && self.removes.is_empty()
    }

    /// Ids of inserted and updated rows, ascending.
    pub fn changed_ids(&self) -> Vec<RowId> {
        let set: BTreeSet<RowId> = self
            .inserts
            .iter()
            .chain(&self.updates)
            .map(|r| r.id)
            .collect();
        set.into_iter().collect()
    }
}

/// Axis-aligned rectangle in data coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    fn point(x: f64, y: f64) -> Self {
        Self {
            x0: x,
            x1: x,
            y0: y,
            y1: y,
        }
    }

    fn include(&mut self, x: f64, y: f64) {
        self.x0 = self.x0.min(x);
        self.x1 = self.x1.max(x);
        self.y0 = self.y0.min(y);
        self.y1 = self.y1.max(y);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub changed_ids: Vec<RowId>,
    pub changed_area: Option<Rect>,
    pub highlight_duration: u64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("conflict at row {id}: {reason}")]
    Conflict { id: RowId, reason: &'static str },
    #[error("no step to undo")]
    EmptyHistory,
    #[error("step {step} is older than the history capacity of {capacity}")]
    HistoryEvicted { step: i64, capacity: usize },
}

#[derive(Debug, Clone)]
struct HistoryEntry {
    forward: Changeset,
    inverse: Changeset,
}

/// Bounded log of (changeset, inverse) pairs, newest last.
#[derive(Debug, Clone)]
pub struct HistoryLog {
    entries: VecDeque<HistoryEntry>,
    capacity: usize,
    evicted: usize,
}

impl HistoryLog {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity: capacity.max(1),
            evicted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn push(&mut self, entry: HistoryEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
            self.evicted += 1;
        }
        self.entries.push_back(entry);
    }
}

/// Outcome of area detection.
#[derive(Debug, Clone, PartialEq)]
pub enum AreaOutcome {
    Area(Rect),
    /// Nothing to frame (no changed rows, or no x/y encodings).
    None,
    /// The encodings are not numeric; the reason is reported once as a warning.
    NotNumeric(String),
}

/// Minimal bounding box over the positions of `rows` under the x/y encodings.
/// Rows with a null coordinate are skipped.
pub fn detect_area<'a>(rows: impl IntoIterator<Item = &'a Row>, encodings: &Encodings) -> AreaOutcome {
    let (Some(x), Some(y)) = (&encodings.x, &encodings.y) else {
        return AreaOutcome::None;
    };
    for ch in [x, y] {
        if !ch.is_numeric() {
            return AreaOutcome::NotNumeric(format!(
                "field `{}` is encoded as {}",
                ch.field,
                ch.kind.as_deref().unwrap_or("?")
            ));
        }
    }
    let mut rect: Option<Rect> = None;
    for row in rows {
        let (Some(vx), Some(vy)) = (row.get(&x.field), row.get(&y.field)) else {
            continue;
        };
        if vx.is_null() || vy.is_null() {
            continue;
        }
        let (Some(px), Some(py)) = (vx.as_f64(), vy.as_f64()) else {
            return AreaOutcome::NotNumeric(format!(
                "row {} has a non-numeric position",
                row.id
            ));
        };
        match &mut rect {
            Some(r) => r.include(px, py),
            None => rect = Some(Rect::point(px, py)),
        }
    }
    rect.map_or(AreaOutcome::None, AreaOutcome::Area)
}

/// Dataset state plus history.
#[derive(Debug, Clone)]
pub struct ChangesetStore {
    rows: BTreeMap<RowId, Row>,
    history: HistoryLog,
    redo: Vec<HistoryEntry>,
    step: i64,
    change: ChangeConfig,
    encodings: Encodings,
    warnings: Vec<String>,
    area_warned: bool,
}

impl ChangesetStore {
    pub fn new(change: ChangeConfig, encodings: Encodings) -> Self {
        Self::with_capacity(change, encodings, DEFAULT_HISTORY_CAPACITY)
    }

    pub fn with_capacity(change: ChangeConfig, encodings: Encodings, capacity: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            history: HistoryLog::new(capacity),
            redo: Vec::new(),
            step: -1,
            change,
            encodings,
            warnings: Vec::new(),
            area_warned: false,
        }
    }

    /// Index of the newest applied forward step; -1 before the first.
    pub fn step(&self) -> i64 {
        self.step
    }

    pub fn rows(&self) -> &BTreeMap<RowId, Row> {
        &self.rows
    }

    pub fn get(&self, id: RowId) -> Option<&Row> {
        self.rows.get(&id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn history(&self) -> &HistoryLog {
        &self.history
    }

    pub fn can_redo(&self) -> bool {
        !self.redo.is_empty()
    }

    /// Warnings raised by change detection (each reported once).
    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    /// Applies a forward changeset as the next step and logs its inverse.
    /// Any pending redo entries are discarded.
    pub fn apply(&mut self, mut changeset: Changeset) -> Result<ChangeReport, StoreError> {
        self.check(&changeset)?;
        changeset.step = self.step + 1;
        changeset.direction = Direction::Forward;
        let report = self.report(&changeset);
        let inverse = self.mutate(&changeset);
        self.step = changeset.step;
        self.redo.clear();
        self.history.push(HistoryEntry {
            forward: changeset,
            inverse,
        });
        Ok(report)
    }

    /// Undoes the newest step. Returns the backward changeset for emission.
    pub fn invert_last(&mut self) -> Result<(Changeset, ChangeReport), StoreError> {
        let Some(entry) = self.history.entries.pop_back() else {
            return Err(if self.history.evicted > 0 && self.step >= 0 {
                StoreError::HistoryEvicted {
                    step: self.step,
                    capacity: self.history.capacity,
                }
            } else {
                StoreError::EmptyHistory
            });
        };
        let report = self.report(&entry.inverse);
        self.mutate(&entry.inverse);
        self.step -= 1;
        let inverse = entry.inverse.clone();
        self.redo.push(entry);
        Ok((inverse, report))
    }

    /// Re-applies the most recently undone step, if any.
    pub fn redo(&mut self) -> Option<(Changeset, ChangeReport)> {
        let entry = self.redo.pop()?;
        let report = self.report(&entry.forward);
        self.mutate(&entry.forward);
        self.step += 1;
        let forward = entry.forward.clone();
        self.history.push(entry);
        Some((forward, report))
    }

    /// Current state as one changeset of inserts, stamped with the current step.
    pub fn catch_up(&self) -> Changeset {
        let mut cs = Changeset::forward(self.step);
        cs.inserts = self.rows.values().cloned().collect();
        cs
    }

    fn check(&self, cs: &Changeset) -> Result<(), StoreError> {
        let mut seen = HashSet::new();
        let ids = cs
            .inserts
            .iter()
            .map(|r| r.id)
            .chain(cs.updates.iter().map(|r| r.id))
            .chain(cs.removes.iter().copied());
        for id in ids {
            if !seen.insert(id) {
                return Err(StoreError::Conflict {
                    id,
                    reason: "id appears twice in one changeset",
                });
            }
        }
        for r in &cs.inserts {
            if self.rows.contains_key(&r.id) {
                return Err(StoreError::Conflict {
                    id: r.id,
                    reason: "insert of an existing id",
                });
            }
        }
        for id in cs.updates.iter().map(|r| r.id).chain(cs.removes.iter().copied()) {
            if !self.rows.contains_key(&id) {
                return Err(StoreError::Conflict {
                    id,
                    reason: "update or remove of a missing id",
                });
            }
        }
        Ok(())
    }

    /// Applies a validated changeset and returns its inverse.
    fn mutate(&mut self, cs: &Changeset) -> Changeset {
        let mut inverse = Changeset {
            step: cs.step,
            inserts: Vec::with_capacity(cs.removes.len()),
            updates: Vec::with_capacity(cs.updates.len()),
            removes: Vec::with_capacity(cs.inserts.len()),
            emitted_at: cs.emitted_at,
            direction: match cs.direction {
                Direction::Forward => Direction::Backward,
                Direction::Backward => Direction::Forward,
            },
        };
        for row in &cs.inserts {
            self.rows.insert(row.id, row.clone());
            inverse.removes.push(row.id);
        }
        for row in &cs.updates {
            let prior = self
                .rows
                .insert(row.id, row.clone())
                .expect("checked: updated id exists");
            inverse.updates.push(prior);
        }
        for id in &cs.removes {
            let prior = self.rows.remove(id).expect("checked: removed id exists");
            inverse.inserts.push(prior);
        }
        inverse
    }

    fn report(&mut self, cs: &Changeset) -> ChangeReport {
        let changed_ids = cs.changed_ids();
        let highlight_duration = self.change.mark.highlight_duration;
        let mut changed_area = None;
        if self.change.area.enabled && !changed_ids.is_empty() {
            let old = cs.updates.iter().filter_map(|r| self.rows.get(&r.id));
            let rows = cs.inserts.iter().chain(&cs.updates).chain(old);
            match detect_area(rows, &self.encodings) {
                AreaOutcome::Area(r) => changed_area = Some(r),
                AreaOutcome::None => {}
                AreaOutcome::NotNumeric(reason) => {
                    if !self.area_warned {
                        self.area_warned = true;
                        self.warnings
                            .push(format!("area highlighting disabled: {reason}"));
                    }
                }
            }
        }
        ChangeReport {
            changed_ids,
            changed_area,
            highlight_duration,
        }
    }
}
