//! Progressive k-means over two numeric feature columns.
//!
//! Each iteration is one Lloyd step: assign every point to its nearest centroid
//! (squared Euclidean distance, ties to the lower index), then move each
//! centroid to the mean of its members. A centroid left without members is
//! reseeded onto the point farthest from its nearest centroid. Initial
//! centroids are k distinct rows picked by D²-weighted sampling driven by the
//! normative [`SplitMix64`] generator.

use std::collections::BTreeMap;

use serde_json::{Map, Value as Json};

use super::*;
use crate::rng::SplitMix64;
use crate::value::Value;

pub const CONVERGENCE_SHIFT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub x: String,
    pub y: String,
    pub seed: u64,
    pub max_iterations: usize,
}

pub(super) fn normalize(params: &Map<String, Json>) -> Result<Map<String, Json>, ParamError> {
    let p = KMeansParams::from_map(params)?;
    let mut out = Map::new();
    out.insert("k".into(), p.k.into());
    out.insert("x".into(), p.x.into());
    out.insert("y".into(), p.y.into());
    out.insert("seed".into(), p.seed.into());
    out.insert("max_iterations".into(), p.max_iterations.into());
    Ok(out)
}

pub(super) fn build(
    params: &Map<String, Json>,
    mode: ProcessorMode,
) -> Result<Box<dyn Processor>, ProcessorError> {
    let p = KMeansParams::from_map(params).map_err(param_error)?;
    Ok(Box::new(KMeans::new(p, mode)))
}

impl KMeansParams {
    pub fn from_map(params: &Map<String, Json>) -> Result<Self, ParamError> {
        check_keys(params, &["k", "x", "y", "seed", "max_iterations"])?;
        Ok(Self {
            k: uint_param(params, "k", None, 1)? as usize,
            x: str_param(params, "x", "x")?,
            y: str_param(params, "y", "y")?,
            seed: uint_param(params, "seed", Some(0), 0)?,
            max_iterations: uint_param(params, "max_iterations", Some(100), 1)? as usize,
        })
    }
}

#[derive(Debug)]
pub struct KMeans {
    params: KMeansParams,
    descriptor: ProcessorDescriptor,
    mode: ProcessorMode,
    ids: Vec<RowId>,
    points: Vec<[f64; 2]>,
    assignment: Vec<Option<usize>>,
    centroids: Vec<[f64; 2]>,
    iterations: usize,
    converged: bool,
    last_metrics: BTreeMap<String, f64>,
}

/// One Lloyd step over a fixed point set.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydStep {
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub objective: f64,
    pub shift: f64,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, *c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Picks `k` distinct points by D²-weighted sampling.
pub fn init_centroids(
    points: &[[f64; 2]],
    k: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>, ProcessorError> {
    if points.len() < k {
        return Err(ProcessorError::InsufficientData {
            needed: k,
            have: points.len(),
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut chosen = vec![false; points.len()];
    let first = rng.below(points.len() as u64) as usize;
    chosen[first] = true;
    let mut centroids = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(*p, points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 {
                    acc += d;
                    pick = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every remaining point coincides with a centroid.
            chosen.iter().position(|c| !c).expect("n >= k")
        };
        chosen[pick] = true;
        centroids.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(*p, points[pick]));
        }
        d2[pick] = 0.0;
    }
    Ok(centroids)
}

/// Assigns, recomputes means, reseeds empty clusters, and scores the result.
pub fn lloyd_step(points: &[[f64; 2]], centroids: &[[f64; 2]]) -> LloydStep {
    let k = centroids.len();
    let mut assignment = Vec::with_capacity(points.len());
    let mut nearest_d2 = Vec::with_capacity(points.len());
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for p in points {
        let (j, d) = nearest(*p, centroids);
        assignment.push(j);
        nearest_d2.push(d);
        sums[j][0] += p[0];
        sums[j][1] += p[1];
        counts[j] += 1;
    }

    let mut next: Vec<[f64; 2]> = (0..k)
        .map(|j| {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                [sums[j][0] / n, sums[j][1] / n]
            } else {
                centroids[j]
            }
        })
        .collect();

    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if !empty.is_empty() {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| nearest_d2[b].total_cmp(&nearest_d2[a]).then(a.cmp(&b)));
        for (j, i) in empty.into_iter().zip(order) {
            next[j] = points[i];
        }
    }

    let objective = points
        .iter()
        .zip(&assignment)
        .map(|(p, &j)| dist2(*p, next[j]))
        .sum();
    let shift = centroids
        .iter()
        .zip(&next)
        .map(|(a, b)| dist2(*a, *b).sqrt())
        .fold(0.0, f64::max);
    LloydStep {
        assignment,
        centroids: next,
        objective,
        shift,
    }
}

impl KMeans {
    pub fn new(params: KMeansParams, mode: ProcessorMode) -> Self {
        let mut parameters = Map::new();
        parameters.insert("k".into(), params.k.into());
        parameters.insert("x".into(), params.x.clone().into());
        parameters.insert("y".into(), params.y.clone().into());
        parameters.insert("seed".into(), params.seed.into());
        parameters.insert("max_iterations".into(), params.max_iterations.into());
        Self {
            descriptor: ProcessorDescriptor {
                name: "kmeans".into(),
                parameters,
                output_columns: vec!["cluster".into()],
                metrics: vec!["objective".into(), "centroid_shift".into()],
            },
            params,
            mode,
            ids: Vec::new(),
            points: Vec::new(),
            assignment: Vec::new(),
            centroids: Vec::new(),
            iterations: 0,
            converged: false,
            last_metrics: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &KMeansParams {
        &self.params
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    /// Picks initial centroids from the rows ingested so far.
    pub fn init(&mut self) -> Result<(), ProcessorError> {
        self.centroids = init_centroids(&self.points, self.params.k, self.params.seed)?;
        Ok(())
    }
}

impl Processor for KMeans {
    fn descriptor(&self) -> &ProcessorDescriptor {
        &self.descriptor
    }

    fn ingest(&mut self, rows: &[Row]) -> Result<(), ProcessorError> {
        let mut points = Vec::with_capacity(rows.len());
        for row in rows {
            points.push([feature(row, &self.params.x)?, feature(row, &self.params.y)?]);
        }
        if !rows.is_empty() {
            self.converged = false;
        }
        self.ids.extend(rows.iter().map(|r| r.id));
        self.points.extend(points);
        self.assignment.resize(self.points.len(), None);
        Ok(())
    }

    fn iterate(&mut self) -> Result<IterationResult, ProcessorError> {
        if self.converged {
            return Ok(IterationResult {
                metrics: self.last_metrics.clone(),
                converged: true,
                ..Default::default()
            });
        }
        if self.centroids.is_empty() {
            match self.init() {
                Ok(()) => {}
                Err(ProcessorError::InsufficientData { .. })
                    if self.mode == ProcessorMode::Incremental =>
                {
                    // Rows are assigned once k of them have arrived.
                    return Ok(IterationResult::default());
                }
                Err(e) => return Err(e),
            }
        }

        let step = lloyd_step(&self.points, &self.centroids);
        let mut patches = Vec::new();
        for (i, &j) in step.assignment.iter().enumerate() {
            if self.assignment[i] != Some(j) {
                self.assignment[i] = Some(j);
                let mut values = Record::new();
                values.insert("cluster".into(), Value::Int(j as i64));
                patches.push(RowPatch {
                    id: self.ids[i],
                    values,
                });
            }
        }
        self.centroids = step.centroids;
        self.iterations += 1;
        self.converged = step.shift < CONVERGENCE_SHIFT;
        let mut metrics = BTreeMap::new();
        metrics.insert("objective".into(), step.objective);
        metrics.insert("centroid_shift".into(), step.shift);
        self.last_metrics = metrics.clone();
        Ok(IterationResult {
            patches,
            inserts: Vec::new(),
            removes: Vec::new(),
            metrics,
            converged: self.converged,
        })
    }

    fn iterations(&self) -> usize {
        self.iterations
    }

    fn max_iterations(&self) -> Option<usize> {
        Some(self.params.max_iterations)
    }

    fn converged(&self) -> bool {
        self.converged
    }

    fn stability_source(&self) -> Option<StabilitySource> {
        Some(StabilitySource::Shift("centroid_shift"))
    }
}
