//! Two-step balanced spherical K-means.
//!
//! Stage one fits `m` fine-grained clusters on a caption-embedding sample;
//! stage two groups those fine centers into `n` coarse conditions, one per
//! data expert. The rest of the corpus is then assigned to shards by nearest
//! fine center. Assignment during fitting is capacity-constrained greedy:
//! candidate (point, center) pairs ordered by distance, assigned while the
//! center has capacity left. With non-binding capacity this reduces exactly
//! to a nearest-center scan with lowest-index tie-breaks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{read_u32, read_u64, EmbeddingMatrix};
use crate::error::ModeError;
use crate::kernels::{nearest_center, sq_dist};
use crate::stream::{derive_rng, derive_seed};
use crate::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Magic bytes for the persisted cluster-model format.
pub const CLUSTER_MAGIC: [u8; 4] = *b"MODC";
/// Current cluster-model format version.
pub const CLUSTER_VERSION: u32 = 1;

/// Center initialization strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// D²-weighted seeding: spread initial centers apart.
    KMeansPlusPlus,
    /// Uniform sample of distinct input rows.
    Random,
}

/// Configuration for one balanced K-means fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KMeansConfig {
    /// Number of clusters.
    pub k: usize,
    /// Iteration cap (each iteration = one assignment plus one center update).
    pub max_iters: usize,
    /// Max cluster size is `ceil(n/k) * (1 + balance_slack)`, floored, and
    /// never below `ceil(n/k)` or above `n`.
    pub balance_slack: f64,
    /// Root seed for initialization.
    pub seed: u64,
    /// Center initialization strategy.
    pub init: InitMethod,
    /// Relative objective-improvement stopping threshold.
    pub tol: f64,
    /// Renormalize centers to unit length after every update. Requires
    /// unit-normalized input.
    pub spherical: bool,
    /// Capture per-iteration centers and assignments (test instrumentation).
    pub record_iterations: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 1,
            max_iters: 50,
            balance_slack: 0.2,
            seed: 0,
            init: InitMethod::KMeansPlusPlus,
            tol: 1e-6,
            spherical: true,
            record_iterations: false,
        }
    }
}

impl KMeansConfig {
    fn validate(&self, sample: &EmbeddingMatrix) -> Result<()> {
        if self.k == 0 {
            return Err(ModeError::Config("cluster count k must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(ModeError::Config("max_iters must be at least 1".into()));
        }
        if !self.balance_slack.is_finite() || self.balance_slack < 0.0 {
            return Err(ModeError::Config(format!(
                "balance_slack must be finite and non-negative, got {}",
                self.balance_slack
            )));
        }
        if !self.tol.is_finite() || self.tol < 0.0 {
            return Err(ModeError::Config(format!(
                "tol must be finite and non-negative, got {}",
                self.tol
            )));
        }
        if sample.rows() < self.k {
            return Err(ModeError::InsufficientRows { rows: sample.rows(), k: self.k });
        }
        if !sample.all_finite() {
            return Err(ModeError::NonFinite { context: "k-means input sample".into() });
        }
        if self.spherical && !sample.is_unit_normalized() {
            return Err(ModeError::Config(
                "spherical k-means requires unit-normalized input; normalize rows first".into(),
            ));
        }
        Ok(())
    }
}

/// State captured after one accepted assignment step.
#[derive(Clone, Debug)]
pub struct IterationSnapshot {
    /// Centers the assignment was computed against.
    pub centers: EmbeddingMatrix,
    /// Accepted assignment (point index -> cluster id).
    pub assignments: Vec<u32>,
    /// Objective value of this (centers, assignments) pair.
    pub objective: f64,
}

/// Result of one balanced K-means fit. `assignments` were computed against
/// the returned `centers`, so the pair is always self-consistent.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centers: EmbeddingMatrix,
    pub assignments: Vec<u32>,
    /// Objective after each accepted assignment step; non-increasing.
    pub objective_trace: Vec<f64>,
    /// Per-iteration snapshots, populated only with `record_iterations`.
    pub iterations: Vec<IterationSnapshot>,
}

impl KMeansFit {
    /// Number of points in each cluster.
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; k];
        for &a in &self.assignments {
            sizes[a as usize] += 1;
        }
        sizes
    }

    /// Final objective value.
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("fit records at least one step")
    }
}

/// Per-cluster capacity implied by a slack setting: `ceil(n/k)` scaled by
/// `1 + slack`, floored, clamped to `[ceil(n/k), n]`.
pub fn capacity_for(n_points: usize, k: usize, slack: f64) -> usize {
    let base = n_points.div_ceil(k);
    let scaled = (base as f64 * (1.0 + slack)).floor();
    if !scaled.is_finite() || scaled >= n_points as f64 {
        n_points
    } else {
        (scaled as usize).clamp(base, n_points)
    }
}

/// Greedy capacity-constrained assignment: all (distance, point, center)
/// candidates sorted ascending — ties broken by point index, then center
/// index — and granted in order while the point is unassigned and the center
/// has capacity left. With capacity ≥ n this is exactly a nearest-center scan
/// with lowest-index ties.
pub fn balanced_assign(
    points: &EmbeddingMatrix,
    centers: &EmbeddingMatrix,
    capacity: usize,
) -> Result<Vec<u32>> {
    let n = points.rows();
    let k = centers.rows();
    if points.dim() != centers.dim() {
        return Err(ModeError::DimensionMismatch {
            context: "balanced assignment".into(),
            left: points.dim(),
            right: centers.dim(),
        });
    }
    if k == 0 {
        return Err(ModeError::Config("balanced assignment needs at least one center".into()));
    }
    if capacity.saturating_mul(k) < n {
        return Err(ModeError::Config(format!(
            "capacity {capacity} x {k} centers cannot hold {n} points"
        )));
    }

    let mut pairs: Vec<(f64, u32, u32)> = vec![(0.0, 0, 0); n * k];
    let fill_row = |i: usize, row: &mut [(f64, u32, u32)]| {
        let p = points.row(i);
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = (sq_dist(p, centers.row(c)), i as u32, c as u32);
        }
    };
    #[cfg(feature = "parallel")]
    pairs.par_chunks_mut(k).enumerate().for_each(|(i, row)| fill_row(i, row));
    #[cfg(not(feature = "parallel"))]
    pairs.chunks_mut(k).enumerate().for_each(|(i, row)| fill_row(i, row));

    // Composite keys are unique (point, center), so unstable sort is
    // deterministic here.
    let by_key = |a: &(f64, u32, u32), b: &(f64, u32, u32)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    #[cfg(feature = "parallel")]
    pairs.par_sort_unstable_by(by_key);
    #[cfg(not(feature = "parallel"))]
    pairs.sort_unstable_by(by_key);

    let mut assignments = vec![u32::MAX; n];
    let mut remaining = vec![capacity; k];
    let mut unassigned = n;
    for &(_, p, c) in &pairs {
        let (p, c) = (p as usize, c as usize);
        if assignments[p] == u32::MAX && remaining[c] > 0 {
            assignments[p] = c as u32;
            remaining[c] -= 1;
            unassigned -= 1;
            if unassigned == 0 {
                break;
            }
        }
    }
    debug_assert_eq!(unassigned, 0, "capacity check guarantees feasibility");
    Ok(assignments)
}

/// Weighted objective: sum over points of weight x squared distance to the
/// assigned center. Distances may be computed in parallel; the reduction is
/// sequential in point order so results are bit-identical either way.
fn weighted_objective(
    points: &EmbeddingMatrix,
    weights: Option<&[f64]>,
    centers: &EmbeddingMatrix,
    assignments: &[u32],
) -> (f64, Vec<f64>) {
    let per_point = per_point_costs(points, weights, centers, assignments);
    let total = per_point.iter().sum();
    (total, per_point)
}

fn per_point_costs(
    points: &EmbeddingMatrix,
    weights: Option<&[f64]>,
    centers: &EmbeddingMatrix,
    assignments: &[u32],
) -> Vec<f64> {
    let cost = |i: usize| {
        let w = weights.map_or(1.0, |w| w[i]);
        w * sq_dist(points.row(i), centers.row(assignments[i] as usize))
    };
    #[cfg(feature = "parallel")]
    {
        (0..points.rows()).into_par_iter().map(cost).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..points.rows()).map(cost).collect()
    }
}

/// Mean-update centers (weighted), renormalized in spherical mode. Empty
/// clusters are repaired by splitting the cluster with the largest objective
/// contribution: its farthest member becomes the empty cluster's new center.
/// Returns the new centers plus the (point, empty cluster) repair moves.
fn update_centers(
    points: &EmbeddingMatrix,
    weights: Option<&[f64]>,
    assignments: &[u32],
    old_centers: &EmbeddingMatrix,
    spherical: bool,
    per_point_cost: &[f64],
) -> (EmbeddingMatrix, Vec<(usize, u32)>) {
    let k = old_centers.rows();
    let dim = old_centers.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut mass = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        let c = a as usize;
        let w = weights.map_or(1.0, |w| w[i]);
        let row = points.row(i);
        let acc = &mut sums[c * dim..(c + 1) * dim];
        for (s, &v) in acc.iter_mut().zip(row) {
            *s += w * v as f64;
        }
        mass[c] += w;
        counts[c] += 1;
    }

    let mut data = vec![0.0f32; k * dim];
    for c in 0..k {
        let out = &mut data[c * dim..(c + 1) * dim];
        if counts[c] == 0 || mass[c] <= 0.0 {
            // Placeholder; repaired below (or kept when repair is impossible).
            out.copy_from_slice(old_centers.row(c));
            continue;
        }
        let acc = &sums[c * dim..(c + 1) * dim];
        if spherical {
            let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > f64::MIN_POSITIVE {
                for (o, &s) in out.iter_mut().zip(acc) {
                    *o = (s / norm) as f32;
                }
            } else {
                // Degenerate mean (antipodal members); keep the old center.
                out.copy_from_slice(old_centers.row(c));
            }
        } else {
            for (o, &s) in out.iter_mut().zip(acc) {
                *o = (s / mass[c]) as f32;
            }
        }
    }

    // Split the heaviest cluster into each empty one: its farthest member
    // (by current assignment cost; ties to the lowest point index) becomes
    // the empty cluster's center. Objective-reducing when that member also
    // moves there, since its cost drops to zero. Donors keep at least one
    // member so the split never creates a fresh empty cluster.
    let mut moves: Vec<(usize, u32)> = Vec::new();
    let mut contribution: Vec<f64> = vec![0.0; k];
    for (i, &a) in assignments.iter().enumerate() {
        contribution[a as usize] += per_point_cost[i];
    }
    let mut taken_from = vec![0usize; k];
    let mut taken = vec![false; points.rows()];
    for e in 0..k {
        if counts[e] > 0 {
            continue;
        }
        let richest = |&a: &usize, &b: &usize| {
            contribution[a].total_cmp(&contribution[b]).then_with(|| b.cmp(&a))
        };
        let donor = (0..k)
            .filter(|&c| counts[c] - taken_from[c] >= 2)
            .max_by(richest)
            .or_else(|| (0..k).filter(|&c| counts[c] - taken_from[c] >= 1).max_by(richest));
        let Some(donor) = donor else { continue };
        let farthest = (0..points.rows())
            .filter(|&i| assignments[i] == donor as u32 && !taken[i])
            .max_by(|&a, &b| per_point_cost[a].total_cmp(&per_point_cost[b]).then(b.cmp(&a)));
        let Some(point) = farthest else { continue };
        taken[point] = true;
        taken_from[donor] += 1;
        data[e * dim..(e + 1) * dim].copy_from_slice(points.row(point));
        contribution[donor] -= per_point_cost[point];
        moves.push((point, e as u32));
    }

    let mut centers = EmbeddingMatrix::from_vec(k, dim, data).expect("center shape is valid");
    if spherical {
        centers = centers.assert_unit_normalized();
    }
    (centers, moves)
}

fn init_centers(
    sample: &EmbeddingMatrix,
    weights: Option<&[f64]>,
    cfg: &KMeansConfig,
) -> EmbeddingMatrix {
    let mut rng = derive_rng(cfg.seed, "kmeans-init", 0);
    let n = sample.rows();
    let indices: Vec<usize> = match cfg.init {
        InitMethod::Random => rand::seq::index::sample(&mut rng, n, cfg.k).into_vec(),
        InitMethod::KMeansPlusPlus => {
            let weight_of = |i: usize| weights.map_or(1.0, |w| w[i]);
            let mut chosen = Vec::with_capacity(cfg.k);
            let mut taken = vec![false; n];
            // First seed: weight-proportional draw (uniform when unweighted).
            let total: f64 = (0..n).map(weight_of).sum();
            let first = if total > 0.0 {
                pick_by_cumulative(&mut rng, total, |i| weight_of(i))
            } else {
                0
            };
            chosen.push(first);
            taken[first] = true;
            let mut d2: Vec<f64> =
                (0..n).map(|i| sq_dist(sample.row(i), sample.row(first))).collect();
            while chosen.len() < cfg.k {
                let total: f64 = (0..n).map(|i| weight_of(i) * d2[i]).sum();
                let next = if total > f64::MIN_POSITIVE {
                    pick_by_cumulative(&mut rng, total, |i| weight_of(i) * d2[i])
                } else {
                    // All remaining mass at distance zero: take the lowest
                    // untaken index to stay deterministic.
                    (0..n).find(|&i| !taken[i]).unwrap_or(0)
                };
                let next = if taken[next] {
                    (0..n).find(|&i| !taken[i]).unwrap_or(next)
                } else {
                    next
                };
                chosen.push(next);
                taken[next] = true;
                for i in 0..n {
                    d2[i] = d2[i].min(sq_dist(sample.row(i), sample.row(next)));
                }
            }
            chosen
        }
    };
    let mut centers = sample.gather(&indices);
    if cfg.spherical {
        centers = centers.assert_unit_normalized();
    }
    centers
}

fn pick_by_cumulative<R: rand::Rng>(rng: &mut R, total: f64, mass: impl Fn(usize) -> f64) -> usize {
    let r = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    let mut i = 0;
    loop {
        let m = mass(i);
        if m > 0.0 {
            last_positive = i;
            acc += m;
            if acc > r {
                return i;
            }
        }
        i += 1;
        if acc >= total {
            return last_positive;
        }
    }
}

/// Fit balanced K-means with uniform point weights.
pub fn kmeans_fit(sample: &EmbeddingMatrix, cfg: &KMeansConfig) -> Result<KMeansFit> {
    kmeans_fit_weighted(sample, None, cfg)
}

/// Fit balanced K-means with optional per-point weights (used when coarse
/// clustering weights fine centers by population). Capacity still counts
/// points, not weight mass.
pub fn kmeans_fit_weighted(
    sample: &EmbeddingMatrix,
    weights: Option<&[f64]>,
    cfg: &KMeansConfig,
) -> Result<KMeansFit> {
    cfg.validate(sample)?;
    if let Some(w) = weights {
        if w.len() != sample.rows() {
            return Err(ModeError::ShapeMismatch {
                context: "k-means point weights".into(),
                left: w.len().to_string(),
                right: format!("{} rows", sample.rows()),
            });
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModeError::Config("k-means point weights must be finite and >= 0".into()));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(ModeError::Config("k-means point weights must not all be zero".into()));
        }
    }

    let capacity = capacity_for(sample.rows(), cfg.k, cfg.balance_slack);
    let mut centers = init_centers(sample, weights, cfg);
    let mut assignments = balanced_assign(sample, &centers, capacity)?;
    let (mut objective, mut costs) = weighted_objective(sample, weights, &centers, &assignments);
    let mut trace = vec![objective];
    let mut snapshots = Vec::new();
    if cfg.record_iterations {
        snapshots.push(IterationSnapshot {
            centers: centers.clone(),
            assignments: assignments.clone(),
            objective,
        });
    }

    while trace.len() < cfg.max_iters {
        let (new_centers, repair_moves) =
            update_centers(sample, weights, &assignments, &centers, cfg.spherical, &costs);
        let candidate = balanced_assign(sample, &new_centers, capacity)?;
        let (cand_obj, cand_costs) =
            weighted_objective(sample, weights, &new_centers, &candidate);

        let (next_assign, next_obj, next_costs) = if cand_obj <= objective {
            (candidate, cand_obj, cand_costs)
        } else if !repair_moves.is_empty() {
            // Greedy went uphill after an empty-cluster split; fall back to
            // the explicit split itself, which cannot increase the objective:
            // the moved point lands exactly on its new center.
            let mut fallback = assignments.clone();
            for &(point, empty) in &repair_moves {
                fallback[point] = empty;
            }
            let (obj, costs) = weighted_objective(sample, weights, &new_centers, &fallback);
            if obj > objective {
                break;
            }
            (fallback, obj, costs)
        } else {
            // No improvement possible; keep the previous consistent state.
            break;
        };

        centers = new_centers;
        assignments = next_assign;
        costs = next_costs;
        let improvement = objective - next_obj;
        objective = next_obj;
        trace.push(objective);
        if cfg.record_iterations {
            snapshots.push(IterationSnapshot {
                centers: centers.clone(),
                assignments: assignments.clone(),
                objective,
            });
        }
        if improvement <= cfg.tol * objective.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    // Feasibility pass: exact distance ties can steer the greedy assignment
    // around a repaired center, so an empty cluster may survive the loop.
    // Apply the explicit split moves directly; each pass is objective-safe
    // (the moved point lands on its own coordinates), so the trace stays
    // non-increasing. These fix-ups are appended to the trace but are not
    // assignment steps, so they are never recorded as iteration snapshots.
    for _ in 0..cfg.k {
        let mut sizes = vec![0usize; cfg.k];
        for &a in &assignments {
            sizes[a as usize] += 1;
        }
        if sizes.iter().all(|&s| s > 0) {
            break;
        }
        let (new_centers, moves) =
            update_centers(sample, weights, &assignments, &centers, cfg.spherical, &costs);
        if moves.is_empty() {
            break;
        }
        let mut fixed = assignments.clone();
        for &(point, empty) in &moves {
            fixed[point] = empty;
        }
        let (obj, new_costs) = weighted_objective(sample, weights, &new_centers, &fixed);
        debug_assert!(obj <= objective + 1e-12);
        centers = new_centers;
        assignments = fixed;
        costs = new_costs;
        objective = obj;
        trace.push(objective);
    }

    if !objective.is_finite() {
        return Err(ModeError::NonFinite { context: "k-means objective".into() });
    }
    Ok(KMeansFit { centers, assignments, objective_trace: trace, iterations: snapshots })
}

/// Configuration for the fine-then-coarse clustering pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoStepConfig {
    /// Fine cluster count (step one).
    pub m: usize,
    /// Coarse cluster / expert count (step two).
    pub n: usize,
    pub max_iters: usize,
    /// Slack for the fine step over data points.
    pub fine_slack: f64,
    /// Slack for the coarse step over fine centers.
    pub coarse_slack: f64,
    pub init: InitMethod,
    pub tol: f64,
    pub spherical: bool,
    pub seed: u64,
    /// Weight fine centers by their sample population in step two. Off by
    /// default: step two treats each fine center as one unweighted point.
    pub weight_coarse_by_population: bool,
}

impl TwoStepConfig {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            max_iters: 50,
            fine_slack: 0.2,
            coarse_slack: 0.5,
            init: InitMethod::KMeansPlusPlus,
            tol: 1e-6,
            spherical: true,
            seed: 0,
            weight_coarse_by_population: false,
        }
    }
}

/// Output of the two-step pass: the persistent model plus both raw fits.
#[derive(Clone, Debug)]
pub struct TwoStepFit {
    pub model: ClusterModel,
    pub fine: KMeansFit,
    pub coarse: KMeansFit,
}

/// Fit fine clusters on the sample, then coarse clusters over the fine
/// centers. `fine_counts` in the returned model reflect the fitting sample;
/// call [`ClusterModel::assign_corpus`] + [`ClusterModel::with_fine_counts`]
/// to stamp full-corpus counts.
pub fn two_step_cluster(sample: &EmbeddingMatrix, cfg: &TwoStepConfig) -> Result<TwoStepFit> {
    if cfg.n == 0 {
        return Err(ModeError::Config("expert count n must be at least 1".into()));
    }
    if cfg.m < cfg.n {
        return Err(ModeError::Config(format!(
            "fine cluster count m={} must be at least expert count n={}",
            cfg.m, cfg.n
        )));
    }

    let fine_cfg = KMeansConfig {
        k: cfg.m,
        max_iters: cfg.max_iters,
        balance_slack: cfg.fine_slack,
        seed: derive_seed(cfg.seed, "two-step", 1),
        init: cfg.init,
        tol: cfg.tol,
        spherical: cfg.spherical,
        record_iterations: false,
    };
    let fine = kmeans_fit(sample, &fine_cfg)?;

    let mut fine_counts = vec![0u64; cfg.m];
    for &a in &fine.assignments {
        fine_counts[a as usize] += 1;
    }

    let coarse_cfg = KMeansConfig {
        k: cfg.n,
        max_iters: cfg.max_iters,
        balance_slack: cfg.coarse_slack,
        seed: derive_seed(cfg.seed, "two-step", 2),
        init: cfg.init,
        tol: cfg.tol,
        spherical: cfg.spherical,
        record_iterations: false,
    };
    let population: Vec<f64> = fine_counts.iter().map(|&c| c as f64).collect();
    let weights = cfg.weight_coarse_by_population.then_some(population.as_slice());
    let coarse = kmeans_fit_weighted(&fine.centers, weights, &coarse_cfg)?;

    let model = ClusterModel {
        fine_centers: fine.centers.clone(),
        coarse_centers: coarse.centers.clone(),
        fine_to_coarse: coarse.assignments.clone(),
        fine_counts,
        source: sample.source(),
    };
    model.validate()?;
    Ok(TwoStepFit { model, fine, coarse })
}

/// The fitted two-level cluster structure: fine centers for routing, coarse
/// centers for expert conditions, and the mapping between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    fine_centers: EmbeddingMatrix,
    coarse_centers: EmbeddingMatrix,
    fine_to_coarse: Vec<u32>,
    fine_counts: Vec<u64>,
    source: u8,
}

/// Full-corpus assignment derived from a [`ClusterModel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusAssignment {
    /// Nearest fine center per item.
    pub fine_ids: Vec<u32>,
    /// `fine_to_coarse` applied to `fine_ids`.
    pub coarse_ids: Vec<u32>,
    /// Items per fine cluster.
    pub fine_counts: Vec<u64>,
    /// Items per coarse cluster (shard sizes; unbalanced shards are normal).
    pub coarse_counts: Vec<u64>,
}

impl CorpusAssignment {
    /// Indices of the items in coarse shard `c`, ascending.
    pub fn shard_indices(&self, c: u32) -> Vec<usize> {
        self.coarse_ids
            .iter()
            .enumerate()
            .filter_map(|(i, &id)| (id == c).then_some(i))
            .collect()
    }
}

impl ClusterModel {
    pub fn new(
        fine_centers: EmbeddingMatrix,
        coarse_centers: EmbeddingMatrix,
        fine_to_coarse: Vec<u32>,
        fine_counts: Vec<u64>,
        source: u8,
    ) -> Result<Self> {
        let model = Self { fine_centers, coarse_centers, fine_to_coarse, fine_counts, source };
        model.validate()?;
        Ok(model)
    }

    /// Fine cluster count.
    pub fn m(&self) -> usize {
        self.fine_centers.rows()
    }

    /// Coarse cluster (expert) count.
    pub fn n(&self) -> usize {
        self.coarse_centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.fine_centers.dim()
    }

    pub fn fine_centers(&self) -> &EmbeddingMatrix {
        &self.fine_centers
    }

    pub fn coarse_centers(&self) -> &EmbeddingMatrix {
        &self.coarse_centers
    }

    pub fn fine_to_coarse(&self) -> &[u32] {
        &self.fine_to_coarse
    }

    pub fn fine_counts(&self) -> &[u64] {
        &self.fine_counts
    }

    /// Embedding-source tag inherited from the fitting sample (0 when unset;
    /// not persisted).
    pub fn source(&self) -> u8 {
        self.source
    }

    pub fn with_source(mut self, source: u8) -> Self {
        self.source = source;
        self
    }

    /// Fine cluster ids belonging to coarse cluster `c` (the condition's
    /// member set), ascending.
    pub fn fine_members(&self, c: u32) -> Vec<u32> {
        self.fine_to_coarse
            .iter()
            .enumerate()
            .filter_map(|(s, &cc)| (cc == c).then_some(s as u32))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        let n = self.n();
        if m == 0 || n == 0 {
            return Err(ModeError::Config("cluster model must have m >= 1 and n >= 1".into()));
        }
        if n > m {
            return Err(ModeError::Config(format!(
                "cluster model has n={n} coarse clusters but only m={m} fine clusters"
            )));
        }
        if self.fine_centers.dim() != self.coarse_centers.dim() {
            return Err(ModeError::DimensionMismatch {
                context: "cluster model center matrices".into(),
                left: self.fine_centers.dim(),
                right: self.coarse_centers.dim(),
            });
        }
        if self.fine_to_coarse.len() != m {
            return Err(ModeError::ShapeMismatch {
                context: "fine-to-coarse map".into(),
                left: self.fine_to_coarse.len().to_string(),
                right: format!("m = {m}"),
            });
        }
        if self.fine_counts.len() != m {
            return Err(ModeError::ShapeMismatch {
                context: "fine cluster counts".into(),
                left: self.fine_counts.len().to_string(),
                right: format!("m = {m}"),
            });
        }
        if let Some(&bad) = self.fine_to_coarse.iter().find(|&&c| c as usize >= n) {
            return Err(ModeError::Config(format!(
                "fine-to-coarse map points at coarse id {bad}, but n={n}"
            )));
        }
        let mut seen = vec![false; n];
        for &c in &self.fine_to_coarse {
            seen[c as usize] = true;
        }
        if let Some(empty) = seen.iter().position(|&s| !s) {
            return Err(ModeError::Config(format!(
                "coarse cluster {empty} has no fine clusters"
            )));
        }
        if !self.fine_centers.all_finite() || !self.coarse_centers.all_finite() {
            return Err(ModeError::NonFinite { context: "cluster model centers".into() });
        }
        Ok(())
    }

    /// Assign every corpus item to its nearest fine center (exact scan) and
    /// through it to a coarse shard.
    pub fn assign_corpus(&self, corpus: &EmbeddingMatrix) -> Result<CorpusAssignment> {
        if corpus.dim() != self.dim() {
            return Err(ModeError::DimensionMismatch {
                context: "corpus assignment".into(),
                left: corpus.dim(),
                right: self.dim(),
            });
        }
        let (fine_ids, _) = nearest_center(corpus, &self.fine_centers)?;
        let coarse_ids: Vec<u32> =
            fine_ids.iter().map(|&f| self.fine_to_coarse[f as usize]).collect();
        let mut fine_counts = vec![0u64; self.m()];
        for &f in &fine_ids {
            fine_counts[f as usize] += 1;
        }
        let mut coarse_counts = vec![0u64; self.n()];
        for &c in &coarse_ids {
            coarse_counts[c as usize] += 1;
        }
        Ok(CorpusAssignment { fine_ids, coarse_ids, fine_counts, coarse_counts })
    }

    /// Replace the stored per-fine-cluster counts (e.g. after a full-corpus
    /// assignment).
    pub fn with_fine_counts(mut self, fine_counts: Vec<u64>) -> Result<Self> {
        if fine_counts.len() != self.m() {
            return Err(ModeError::ShapeMismatch {
                context: "fine cluster counts".into(),
                left: fine_counts.len().to_string(),
                right: format!("m = {}", self.m()),
            });
        }
        self.fine_counts = fine_counts;
        Ok(self)
    }

    /// Mean Euclidean distance from each coarse center to its member fine
    /// centers. Larger spread means a more diverse shard; experts are trained
    /// in descending order of this score.
    /// View the coarse partition itself as the routing granularity: the
    /// coarse centers become the fine centers under an identity mapping, so
    /// routing scores tasks by coarse-center distances instead.
    pub fn coarse_as_fine(&self) -> ClusterModel {
        let n = self.n();
        let mut counts = vec![0u64; n];
        for (s, &c) in self.fine_to_coarse.iter().enumerate() {
            counts[c as usize] += self.fine_counts[s];
        }
        ClusterModel {
            fine_centers: self.coarse_centers.clone(),
            coarse_centers: self.coarse_centers.clone(),
            fine_to_coarse: (0..n as u32).collect(),
            fine_counts: counts,
            source: self.source,
        }
    }

    pub fn cluster_diversity(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.n()];
        let mut counts = vec![0usize; self.n()];
        for (s, &c) in self.fine_to_coarse.iter().enumerate() {
            sums[c as usize] +=
                sq_dist(self.fine_centers.row(s), self.coarse_centers.row(c as usize)).sqrt();
            counts[c as usize] += 1;
        }
        sums.iter().zip(&counts).map(|(&s, &cnt)| s / cnt.max(1) as f64).collect()
    }

    /// Expert training priority: coarse ids sorted by diversity, largest
    /// first, ties toward the lower id.
    pub fn priority_order(&self) -> Vec<u32> {
        let diversity = self.cluster_diversity();
        let mut order: Vec<u32> = (0..self.n() as u32).collect();
        order.sort_by(|&a, &b| {
            diversity[b as usize].total_cmp(&diversity[a as usize]).then(a.cmp(&b))
        });
        order
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CLUSTER_MAGIC)?;
        w.write_all(&CLUSTER_VERSION.to_le_bytes())?;
        w.write_all(&(self.m() as u32).to_le_bytes())?;
        w.write_all(&(self.n() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for &v in self.fine_centers.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self.coarse_centers.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.fine_to_coarse {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.fine_counts {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        if r.read_exact(&mut magic).is_err() {
            return Err(ModeError::TruncatedPayload {
                path: path.to_path_buf(),
                needed: 20,
                found: len,
            });
        }
        if magic != CLUSTER_MAGIC {
            return Err(ModeError::BadMagic {
                path: path.to_path_buf(),
                expected: CLUSTER_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut r).map_err(|_| ModeError::TruncatedPayload {
            path: path.to_path_buf(),
            needed: 20,
            found: len,
        })?;
        if version != CLUSTER_VERSION {
            return Err(ModeError::VersionMismatch {
                path: path.to_path_buf(),
                expected: CLUSTER_VERSION,
                found: version,
            });
        }
        let header = |e: ModeError| match e {
            ModeError::Io(_) => ModeError::TruncatedPayload {
                path: path.to_path_buf(),
                needed: 20,
                found: len,
            },
            other => other,
        };
        let m = read_u32(&mut r).map_err(header)? as usize;
        let n = read_u32(&mut r).map_err(header)? as usize;
        let dim = read_u32(&mut r).map_err(header)? as usize;
        if m == 0 || n == 0 || dim == 0 {
            return Err(ModeError::Config(format!(
                "cluster model header has zero extent (m={m}, n={n}, dim={dim}) in {}",
                path.display()
            )));
        }
        let body = 4 * ((m + n) * dim) as u64 + 4 * m as u64 + 8 * m as u64;
        let needed = 20 + body;
        if len < needed {
            return Err(ModeError::TruncatedPayload {
                path: path.to_path_buf(),
                needed,
                found: len,
            });
        }
        if len > needed {
            return Err(ModeError::TrailingBytes { path: path.to_path_buf(), extra: len - needed });
        }
        let mut read_f32_block = |rows: usize| -> Result<Vec<f32>> {
            let mut buf = vec![0u8; rows * dim * 4];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        };
        let fine = read_f32_block(m)?;
        let coarse = read_f32_block(n)?;
        let mut map = Vec::with_capacity(m);
        for _ in 0..m {
            map.push(read_u32(&mut r)?);
        }
        let mut counts = Vec::with_capacity(m);
        for _ in 0..m {
            counts.push(read_u64(&mut r)?);
        }
        let model = Self {
            fine_centers: EmbeddingMatrix::from_vec(m, dim, fine)?.assert_unit_normalized(),
            coarse_centers: EmbeddingMatrix::from_vec(n, dim, coarse)?.assert_unit_normalized(),
            fine_to_coarse: map,
            fine_counts: counts,
            source: 0,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::gauss;

    fn unit_blobs(
        seed: u64,
        per_blob: usize,
        centers: &[Vec<f32>],
        sigma: f64,
    ) -> (EmbeddingMatrix, Vec<u32>) {
        let mut rng = derive_rng(seed, "test-blobs", 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                let row: Vec<f32> =
                    c.iter().map(|&v| (v as f64 + sigma * gauss(&mut rng)) as f32).collect();
                rows.push(row);
                labels.push(b as u32);
            }
        }
        let matrix = EmbeddingMatrix::from_rows(&rows).unwrap().normalize_rows().matrix;
        (matrix, labels)
    }

    fn loose_cfg(k: usize, seed: u64) -> KMeansConfig {
        KMeansConfig { k, balance_slack: 1e9, seed, ..KMeansConfig::default() }
    }

    #[test]
    fn capacity_clamps_to_sane_range() {
        assert_eq!(capacity_for(60, 3, 0.0), 20);
        assert_eq!(capacity_for(60, 3, 0.1), 22);
        assert_eq!(capacity_for(10, 3, 0.0), 4); // ceil(10/3)
        assert_eq!(capacity_for(10, 3, 1e12), 10);
        assert_eq!(capacity_for(5, 5, 0.0), 1);
    }

    #[test]
    fn recovers_well_separated_blobs() {
        let centers = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let (points, labels) = unit_blobs(3, 40, &centers, 0.02);
        let fit = kmeans_fit(&points, &loose_cfg(2, 9)).unwrap();
        // Cluster ids may be swapped relative to generator labels.
        let id0 = fit.assignments[0];
        assert!(fit.assignments.iter().zip(&labels).all(|(&a, &l)| (a == id0) == (l == 0)));
    }

    #[test]
    fn k_equals_rows_gives_zero_objective() {
        let (points, _) = unit_blobs(4, 3, &[vec![1.0, 0.0, 0.0, 0.0, 0.0]], 0.3);
        let fit = kmeans_fit(&points, &loose_cfg(3, 1)).unwrap();
        assert!(fit.objective() < 1e-12, "objective = {}", fit.objective());
        let mut sorted = fit.assignments.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn slack_zero_divisible_gives_exact_balance() {
        let centers = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let (points, _) = unit_blobs(5, 60, &centers, 0.4);
        let cfg = KMeansConfig { k: 3, balance_slack: 0.0, seed: 2, ..KMeansConfig::default() };
        let fit = kmeans_fit(&points, &cfg).unwrap();
        assert_eq!(fit.cluster_sizes(3), vec![20, 20, 20]);
    }

    #[test]
    fn objective_trace_never_increases() {
        for seed in 0..5u64 {
            let centers = vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ];
            let (points, _) = unit_blobs(seed, 30, &centers, 0.25);
            let cfg = KMeansConfig { k: 4, balance_slack: 0.1, seed, ..KMeansConfig::default() };
            let fit = kmeans_fit(&points, &cfg).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-7, "trace increased: {:?}", fit.objective_trace);
            }
        }
    }

    #[test]
    fn fit_is_bit_deterministic() {
        let centers = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let (points, _) = unit_blobs(6, 50, &centers, 0.2);
        let cfg = KMeansConfig { k: 3, balance_slack: 0.15, seed: 42, ..KMeansConfig::default() };
        let a = kmeans_fit(&points, &cfg).unwrap();
        let b = kmeans_fit(&points, &cfg).unwrap();
        assert_eq!(a.centers.data(), b.centers.data());
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn repair_leaves_no_empty_cluster() {
        // Five coincident points and one outlier force duplicate centers,
        // which starves at least one cluster before repair.
        let mut rows = vec![vec![1.0f32, 0.0, 0.0]; 5];
        rows.push(vec![0.0, 1.0, 0.0]);
        let points = EmbeddingMatrix::from_rows(&rows).unwrap().assert_unit_normalized();
        let fit = kmeans_fit(&points, &loose_cfg(3, 7)).unwrap();
        let sizes = fit.cluster_sizes(3);
        assert!(sizes.iter().all(|&s| s > 0), "sizes = {sizes:?}");
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-7);
        }
    }

    #[test]
    fn two_step_m_equals_n_is_bijection() {
        let centers = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let (points, _) = unit_blobs(8, 25, &centers, 0.05);
        let fit = two_step_cluster(&points, &TwoStepConfig::new(4, 4)).unwrap();
        let mut seen = fit.model.fine_to_coarse().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        for c in 0..4 {
            assert_eq!(fit.model.fine_members(c).len(), 1);
        }
    }

    #[test]
    fn two_step_groups_nearer_topics_together() {
        // Four topic directions: 0 and 1 close, 2 and 3 close, the pairs far
        // apart. Coarse grouping at n=2 must match the near pairs.
        let base = vec![
            vec![1.0, 0.06, 0.0, 0.0],
            vec![1.0, -0.06, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.06],
            vec![0.0, 0.0, 1.0, -0.06],
        ];
        let (points, labels) = unit_blobs(11, 60, &base, 0.02);
        let fit = two_step_cluster(&points, &TwoStepConfig { seed: 3, ..TwoStepConfig::new(8, 2) })
            .unwrap();
        let assign = fit.model.assign_corpus(&points).unwrap();
        // Every topic must land in exactly one coarse shard.
        let mut topic_to_coarse = [u32::MAX; 4];
        for (i, &t) in labels.iter().enumerate() {
            let c = assign.coarse_ids[i];
            if topic_to_coarse[t as usize] == u32::MAX {
                topic_to_coarse[t as usize] = c;
            }
            assert_eq!(topic_to_coarse[t as usize], c, "topic {t} split across shards");
        }
        assert_eq!(topic_to_coarse[0], topic_to_coarse[1]);
        assert_eq!(topic_to_coarse[2], topic_to_coarse[3]);
        assert_ne!(topic_to_coarse[0], topic_to_coarse[2]);
    }

    #[test]
    fn sample_assignment_matches_fit_when_capacity_loose() {
        let centers = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let (points, _) = unit_blobs(13, 40, &centers, 0.1);
        let cfg = TwoStepConfig { fine_slack: 1e9, coarse_slack: 1e9, seed: 5, ..TwoStepConfig::new(6, 3) };
        let fit = two_step_cluster(&points, &cfg).unwrap();
        let assign = fit.model.assign_corpus(&points).unwrap();
        assert_eq!(assign.fine_ids, fit.fine.assignments);
        let total: u64 = assign.coarse_counts.iter().sum();
        assert_eq!(total, points.rows() as u64);
    }

    #[test]
    fn diversity_matches_scalar_oracle_and_ranks_spread_first() {
        let fine = EmbeddingMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.70710678, 0.70710678],
        ])
        .unwrap()
        .assert_unit_normalized();
        let coarse = EmbeddingMatrix::from_rows(&[
            vec![0.70710678, 0.70710678],
            vec![0.70710678, 0.70710678],
        ])
        .unwrap()
        .assert_unit_normalized();
        // Coarse 0 holds the two spread-out axes; coarse 1 holds the one
        // coincident center.
        let model =
            ClusterModel::new(fine.clone(), coarse.clone(), vec![0, 0, 1], vec![5, 5, 5], 0)
                .unwrap();
        let div = model.cluster_diversity();
        let mut expect = [0.0f64; 2];
        let mut cnt = [0usize; 2];
        for (s, &c) in model.fine_to_coarse().iter().enumerate() {
            let mut acc = 0.0;
            for (a, b) in fine.row(s).iter().zip(coarse.row(c as usize)) {
                acc += (*a as f64 - *b as f64) * (*a as f64 - *b as f64);
            }
            expect[c as usize] += acc.sqrt();
            cnt[c as usize] += 1;
        }
        for c in 0..2 {
            assert!((div[c] - expect[c] / cnt[c] as f64).abs() < 1e-6);
        }
        assert!(div[1] < 1e-7, "coincident member must score zero");
        assert_eq!(model.priority_order(), vec![0, 1]);
    }

    #[test]
    fn model_roundtrips_bitwise() {
        let centers = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let (points, _) = unit_blobs(17, 30, &centers, 0.15);
        let fit = two_step_cluster(&points, &TwoStepConfig::new(4, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.modc");
        fit.model.write_file(&path).unwrap();
        let loaded = ClusterModel::read_file(&path).unwrap();
        assert_eq!(loaded.fine_centers().data(), fit.model.fine_centers().data());
        assert_eq!(loaded.coarse_centers().data(), fit.model.coarse_centers().data());
        assert_eq!(loaded.fine_to_coarse(), fit.model.fine_to_coarse());
        assert_eq!(loaded.fine_counts(), fit.model.fine_counts());
        let bytes_a = std::fs::read(&path).unwrap();
        loaded.write_file(&path).unwrap();
        let bytes_b = std::fs::read(&path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn corrupt_headers_yield_distinct_errors() {
        let centers = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let (points, _) = unit_blobs(19, 20, &centers, 0.1);
        let fit = two_step_cluster(&points, &TwoStepConfig::new(3, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.modc");
        fit.model.write_file(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        std::fs::write(&path, bad_magic).unwrap();
        assert!(matches!(ClusterModel::read_file(&path), Err(ModeError::BadMagic { .. })));

        let bad_version = {
            let mut b = good.clone();
            b[4..8].copy_from_slice(&9u32.to_le_bytes());
            b
        };
        std::fs::write(&path, bad_version).unwrap();
        assert!(matches!(ClusterModel::read_file(&path), Err(ModeError::VersionMismatch { .. })));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(ClusterModel::read_file(&path), Err(ModeError::TruncatedPayload { .. })));

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, trailing).unwrap();
        assert!(matches!(ClusterModel::read_file(&path), Err(ModeError::TrailingBytes { .. })));
    }

    #[test]
    fn preconditions_are_enforced() {
        let points = EmbeddingMatrix::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0]])
            .unwrap()
            .assert_unit_normalized();
        assert!(matches!(
            kmeans_fit(&points, &loose_cfg(3, 0)),
            Err(ModeError::InsufficientRows { rows: 2, k: 3 })
        ));
        let unnormalized = EmbeddingMatrix::from_rows(&[vec![2.0f32, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(kmeans_fit(&unnormalized, &loose_cfg(2, 0)), Err(ModeError::Config(_))));
        assert!(two_step_cluster(&points, &TwoStepConfig::new(1, 2)).is_err());
        let nan = EmbeddingMatrix::from_vec(2, 2, vec![f32::NAN, 0.0, 0.0, 1.0])
            .unwrap()
            .assert_unit_normalized();
        assert!(matches!(kmeans_fit(&nan, &loose_cfg(2, 0)), Err(ModeError::NonFinite { .. })));
    }
}
