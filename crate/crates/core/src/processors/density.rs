//! Binned 2D density over two numeric columns.
//!
//! In process mode the grid is refined coarse to fine: iteration `t` bins every
//! row at `min(2^t, bins)` per axis, replacing the previous level's bin rows.
//! In incremental mode the grid is always at full resolution and each
//! iteration folds in the rows ingested since the previous one.
//!
//! Bin rows are derived rows with ids above [`DERIVED_ID_BASE`] and carry
//! `bin_x`, `bin_y`, `count` and the bin's data-space bounds.

use std::collections::BTreeMap;

use serde_json::{Map, Value as Json};

use super::*;
use crate::value::{Value, DERIVED_ID_BASE};

#[derive(Debug, Clone, PartialEq)]
pub struct DensityParams {
    pub x: String,
    pub y: String,
    pub bins_x: usize,
    pub bins_y: usize,
    pub x_extent: Option<[f64; 2]>,
    pub y_extent: Option<[f64; 2]>,
}

const MAX_BINS: u64 = 4096;

pub(super) fn normalize(params: &Map<String, Json>) -> Result<Map<String, Json>, ParamError> {
    let p = DensityParams::from_map(params)?;
    Ok(p.to_map())
}

pub(super) fn build(
    params: &Map<String, Json>,
    mode: ProcessorMode,
) -> Result<Box<dyn Processor>, ProcessorError> {
    let p = DensityParams::from_map(params).map_err(|e| {
        if e.key.starts_with("bins_") {
            ProcessorError::InvalidBinning(format!("{}: {}", e.key, e.message))
        } else {
            param_error(e)
        }
    })?;
    Ok(Box::new(Density::new(p, mode)?))
}

impl DensityParams {
    pub fn from_map(params: &Map<String, Json>) -> Result<Self, ParamError> {
        check_keys(params, &["x", "y", "bins_x", "bins_y", "x_extent", "y_extent"])?;
        let bins = |key| {
            let n = uint_param(params, key, Some(20), 1)?;
            if n > MAX_BINS {
                return Err(ParamError::new(key, format!("at most {MAX_BINS} bins")));
            }
            Ok::<_, ParamError>(n as usize)
        };
        Ok(Self {
            x: str_param(params, "x", "x")?,
            y: str_param(params, "y", "y")?,
            bins_x: bins("bins_x")?,
            bins_y: bins("bins_y")?,
            x_extent: extent_param(params, "x_extent")?,
            y_extent: extent_param(params, "y_extent")?,
        })
    }

    fn to_map(&self) -> Map<String, Json> {
        let mut out = Map::new();
        out.insert("x".into(), self.x.clone().into());
        out.insert("y".into(), self.y.clone().into());
        out.insert("bins_x".into(), self.bins_x.into());
        out.insert("bins_y".into(), self.bins_y.into());
        if let Some(e) = self.x_extent {
            out.insert("x_extent".into(), serde_json::json!(e));
        }
        if let Some(e) = self.y_extent {
            out.insert("y_extent".into(), serde_json::json!(e));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Grid {
    level: u64,
    rx: usize,
    ry: usize,
    /// Non-zero counts keyed by `(bx, by)`.
    counts: BTreeMap<(usize, usize), u64>,
}

impl Grid {
    fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

#[derive(Debug)]
pub struct Density {
    params: DensityParams,
    descriptor: ProcessorDescriptor,
    mode: ProcessorMode,
    points: Vec<[f64; 2]>,
    /// Index of the first point not yet folded into the grid (incremental).
    folded: usize,
    extent: Option<([f64; 2], [f64; 2])>,
    grid: Option<Grid>,
    iterations: usize,
    converged: bool,
    last_metrics: BTreeMap<String, f64>,
}

fn widen(e: [f64; 2]) -> [f64; 2] {
    if e[1] > e[0] {
        e
    } else {
        [e[0] - 0.5, e[1] + 0.5]
    }
}

fn bin_of(v: f64, e: [f64; 2], n: usize) -> usize {
    let t = ((v - e[0]) / (e[1] - e[0]) * n as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(n - 1)
    }
}

/// Fraction of old bin `o` (of `from` bins) lying inside new bin `b` (of `to` bins).
fn overlap(o: usize, from: usize, b: usize, to: usize) -> f64 {
    let lo = (o as f64 / from as f64).max(b as f64 / to as f64);
    let hi = ((o + 1) as f64 / from as f64).min((b + 1) as f64 / to as f64);
    ((hi - lo) * from as f64).max(0.0)
}

fn overlapping(o: usize, from: usize, to: usize) -> std::ops::RangeInclusive<usize> {
    let first = o * to / from;
    let last = (((o + 1) * to).div_ceil(from)).saturating_sub(1).min(to - 1);
    first..=last.max(first)
}

/// `1 - L1/2` between `cur` and `prev` projected onto `cur`'s resolution.
fn grid_stability(prev: &Grid, cur: &Grid) -> f64 {
    let (pt, ct) = (prev.total() as f64, cur.total() as f64);
    if pt == 0.0 || ct == 0.0 {
        return 0.0;
    }
    let mut projected: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&(ox, oy), &c) in &prev.counts {
        let p = c as f64 / pt;
        for bx in overlapping(ox, prev.rx, cur.rx) {
            let wx = overlap(ox, prev.rx, bx, cur.rx);
            if wx == 0.0 {
                continue;
            }
            for by in overlapping(oy, prev.ry, cur.ry) {
                let wy = overlap(oy, prev.ry, by, cur.ry);
                if wy > 0.0 {
                    *projected.entry((bx, by)).or_default() += p * wx * wy;
                }
            }
        }
    }
    let mut l1 = 0.0;
    for (key, &c) in &cur.counts {
        l1 += (c as f64 / ct - projected.get(key).copied().unwrap_or(0.0)).abs();
    }
    for (key, q) in &projected {
        if !cur.counts.contains_key(key) {
            l1 += q.abs();
        }
    }
    (1.0 - l1 / 2.0).clamp(0.0, 1.0)
}

impl Density {
    pub fn new(params: DensityParams, mode: ProcessorMode) -> Result<Self, ProcessorError> {
        if params.bins_x == 0 || params.bins_y == 0 {
            return Err(ProcessorError::InvalidBinning(format!(
                "bins must be positive, found {}x{}",
                params.bins_x, params.bins_y
            )));
        }
        let extent = match (params.x_extent, params.y_extent) {
            (Some(x), Some(y)) => Some((x, y)),
            _ => None,
        };
        Ok(Self {
            descriptor: ProcessorDescriptor {
                name: "density".into(),
                parameters: params.to_map(),
                output_columns: [
                    "bin_x", "bin_y", "count", "x_start", "x_end", "y_start", "y_end",
                ]
                .map(String::from)
                .to_vec(),
                metrics: vec!["stability".into(), "resolution".into()],
            },
            params,
            mode,
            points: Vec::new(),
            folded: 0,
            extent,
            grid: None,
            iterations: 0,
            converged: false,
            last_metrics: BTreeMap::new(),
        })
    }

    /// Number of distinct resolutions the coarse-to-fine schedule visits.
    pub fn levels(&self) -> usize {
        let max = self.params.bins_x.max(self.params.bins_y);
        let mut levels = 1;
        while (1usize << (levels - 1)) < max {
            levels += 1;
        }
        levels
    }

    pub fn extent(&self) -> Option<([f64; 2], [f64; 2])> {
        self.extent
    }

    /// Current counts as `((bin_x, bin_y), count)` at the current resolution.
    pub fn counts(&self) -> Vec<((usize, usize), u64)> {
        self.grid
            .as_ref()
            .map(|g| g.counts.iter().map(|(k, v)| (*k, *v)).collect())
            .unwrap_or_default()
    }

    fn resolve_extent(&mut self, points: &[[f64; 2]]) -> ([f64; 2], [f64; 2]) {
        if let Some(e) = self.extent {
            return e;
        }
        let fold = |axis: usize, given: Option<[f64; 2]>| {
            given.unwrap_or_else(|| {
                let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
                    (a.0.min(p[axis]), a.1.max(p[axis]))
                });
                widen([lo, hi])
            })
        };
        let e = (fold(0, self.params.x_extent), fold(1, self.params.y_extent));
        self.extent = Some(e);
        e
    }

    fn bin_id(level: u64, ry: usize, bx: usize, by: usize) -> RowId {
        RowId(DERIVED_ID_BASE + (level << 32) + (bx * ry + by) as u64)
    }

    fn bin_values(&self, rx: usize, ry: usize, bx: usize, by: usize, count: u64) -> Record {
        let (ex, ey) = self.extent.expect("extent resolved before binning");
        let wx = (ex[1] - ex[0]) / rx as f64;
        let wy = (ey[1] - ey[0]) / ry as f64;
        let mut v = Record::new();
        v.insert("bin_x".into(), Value::Int(bx as i64));
        v.insert("bin_y".into(), Value::Int(by as i64));
        v.insert("count".into(), Value::Int(count as i64));
        v.insert("x_start".into(), Value::Float(ex[0] + wx * bx as f64));
        v.insert("x_end".into(), Value::Float(ex[0] + wx * (bx + 1) as f64));
        v.insert("y_start".into(), Value::Float(ey[0] + wy * by as f64));
        v.insert("y_end".into(), Value::Float(ey[0] + wy * (by + 1) as f64));
        v
    }

    fn count_into(&self, grid: &mut Grid, points: &[[f64; 2]]) {
        let (ex, ey) = self.extent.expect("extent resolved before binning");
        for p in points {
            let key = (bin_of(p[0], ex, grid.rx), bin_of(p[1], ey, grid.ry));
            *grid.counts.entry(key).or_default() += 1;
        }
    }

    fn finish(&mut self, stability: f64, grid: &Grid) -> BTreeMap<String, f64> {
        self.iterations += 1;
        let mut metrics = BTreeMap::new();
        metrics.insert("stability".into(), stability);
        metrics.insert("resolution".into(), (grid.rx * grid.ry) as f64);
        self.last_metrics = metrics.clone();
        metrics
    }

    fn refine(&mut self) -> Result<IterationResult, ProcessorError> {
        if self.points.is_empty() {
            return Err(ProcessorError::InsufficientData { needed: 1, have: 0 });
        }
        let points = std::mem::take(&mut self.points);
        self.resolve_extent(&points);
        let t = self.iterations as u32;
        let scale = 1usize.checked_shl(t).unwrap_or(usize::MAX);
        let mut grid = Grid {
            level: t as u64,
            rx: scale.min(self.params.bins_x),
            ry: scale.min(self.params.bins_y),
            counts: BTreeMap::new(),
        };
        self.count_into(&mut grid, &points);
        self.points = points;

        let mut result = IterationResult::default();
        let stability = match &self.grid {
            Some(prev) => {
                result.removes = prev
                    .counts
                    .keys()
                    .map(|&(bx, by)| Self::bin_id(prev.level, prev.ry, bx, by))
                    .collect();
                grid_stability(prev, &grid)
            }
            None => 0.0,
        };
        for (&(bx, by), &c) in &grid.counts {
            result.inserts.push(Row {
                id: Self::bin_id(grid.level, grid.ry, bx, by),
                values: self.bin_values(grid.rx, grid.ry, bx, by, c),
            });
        }
        self.converged = grid.rx == self.params.bins_x && grid.ry == self.params.bins_y;
        result.converged = self.converged;
        result.metrics = self.finish(stability, &grid);
        self.grid = Some(grid);
        Ok(result)
    }

    fn fold_new(&mut self) -> Result<IterationResult, ProcessorError> {
        let fresh = self.points[self.folded..].to_vec();
        if fresh.is_empty() {
            // Nothing new: converged until more rows arrive.
            self.converged = self.grid.is_some();
            return Ok(IterationResult {
                metrics: self.last_metrics.clone(),
                converged: self.converged,
                ..Default::default()
            });
        }
        self.resolve_extent(&fresh);
        self.folded = self.points.len();
        let prev = self.grid.clone().unwrap_or(Grid {
            level: 0,
            rx: self.params.bins_x,
            ry: self.params.bins_y,
            counts: BTreeMap::new(),
        });
        let mut grid = prev.clone();
        self.count_into(&mut grid, &fresh);

        let mut result = IterationResult::default();
        for (&(bx, by), &c) in &grid.counts {
            let id = Self::bin_id(0, grid.ry, bx, by);
            match prev.counts.get(&(bx, by)) {
                None => result.inserts.push(Row {
                    id,
                    values: self.bin_values(grid.rx, grid.ry, bx, by, c),
                }),
                Some(&old) if old != c => {
                    let mut values = Record::new();
                    values.insert("count".into(), Value::Int(c as i64));
                    result.patches.push(RowPatch { id, values });
                }
                Some(_) => {}
            }
        }
        let stability = grid_stability(&prev, &grid);
        self.converged = false;
        result.metrics = self.finish(stability, &grid);
        self.grid = Some(grid);
        Ok(result)
    }
}

impl Processor for Density {
    fn descriptor(&self) -> &ProcessorDescriptor {
        &self.descriptor
    }

    fn ingest(&mut self, rows: &[Row]) -> Result<(), ProcessorError> {
        let mut points = Vec::with_capacity(rows.len());
        for row in rows {
            points.push([feature(row, &self.params.x)?, feature(row, &self.params.y)?]);
        }
        if !points.is_empty() {
            self.converged = false;
        }
        self.points.extend(points);
        Ok(())
    }

    fn iterate(&mut self) -> Result<IterationResult, ProcessorError> {
        match self.mode {
            ProcessorMode::Process if self.converged => Ok(IterationResult {
                metrics: self.last_metrics.clone(),
                converged: true,
                ..Default::default()
            }),
            ProcessorMode::Process => self.refine(),
            ProcessorMode::Incremental => self.fold_new(),
        }
    }

    fn iterations(&self) -> usize {
        self.iterations
    }

    fn max_iterations(&self) -> Option<usize> {
        Some(self.levels())
    }

    fn converged(&self) -> bool {
        self.converged
    }

    fn stability_source(&self) -> Option<StabilitySource> {
        Some(StabilitySource::Direct("stability"))
    }
}
