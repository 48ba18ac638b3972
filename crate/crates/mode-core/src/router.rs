//! Inference-time routing: map task metadata onto data experts.
//!
//! A task is described by metadata embeddings (class names, or retrieval
//! corpus texts). Their similarity to the fine-grained cluster centers — an
//! exponentiated negative squared distance with temperature λ — is filtered
//! to each row's maximum, aggregated per expert condition, and softmaxed
//! into routing weights. Expert outputs are then ensembled by those weights.
//!
//! Fixed operation order: raw squared distances → class-count λ adjustment →
//! exponentiation → small-class multiplier on A → max filter → aggregation →
//! softmax.

use crate::clustering::ClusterModel;
use crate::embed::EmbeddingMatrix;
use crate::error::ModeError;
use crate::kernels::{pairwise_sq_dist, softmax, Mat64};
use crate::Result;

/// Default similarity temperature λ.
pub const DEFAULT_LAMBDA: f64 = 0.2;
/// Class counts strictly below this trigger the softening multiplier.
pub const SMALL_CLASS_COUNT: usize = 10;
/// Class counts strictly above this trigger λ sharpening.
pub const LARGE_CLASS_COUNT: usize = 200;

/// What a task's metadata rows represent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Rows are class-name embeddings; one weight vector for the task.
    Classification,
    /// Image queries retrieve texts. Rows are the corpus texts; the whole
    /// corpus is one task with one shared weight vector.
    TextRetrieval,
    /// Text queries retrieve images. Rows are the query texts; each query
    /// is an independent task, so weights are per metadata row.
    ImageRetrieval,
}

/// Task description handed to the router.
#[derive(Clone, Debug)]
pub struct TaskMetadata {
    pub kind: TaskKind,
    pub embeddings: EmbeddingMatrix,
    /// Optional human-readable names matching the embedding rows.
    pub labels: Option<Vec<String>>,
}

/// Which class-count heuristic fired while building a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassCountAdjustment {
    /// Small metadata sets: multiply A by exp(0.5 − √|L|) to soften routing.
    Soften { multiplier: f64 },
    /// Between the thresholds: no adjustment.
    Unadjusted,
    /// Large metadata sets: divide λ by ln|L| to sharpen similarities.
    Sharpen { divisor: f64 },
}

/// Per-task routing weights.
#[derive(Clone, Debug, PartialEq)]
pub enum RoutingWeights {
    /// One weight vector over the n experts, shared by the whole task.
    Shared(Vec<f64>),
    /// One weight row per query (|Q| × n).
    PerQuery(Mat64),
}

/// Everything the router decided for one task, exportable for audit.
#[derive(Clone, Debug)]
pub struct RoutingPlan {
    pub kind: TaskKind,
    /// Similarity matrix after filtering (rows × m).
    pub a: Mat64,
    /// λ as configured for the task.
    pub lambda: f64,
    /// λ actually used after any class-count adjustment.
    pub lambda_effective: f64,
    pub adjustment: ClassCountAdjustment,
    pub weights: RoutingWeights,
}

/// Similarity between metadata rows and fine centers:
/// `A[l][s] = exp(−‖e_l − e_s‖² / λ)`. Entries lie in (0, 1]; an entry is 1
/// exactly when the vectors coincide.
pub fn similarity_matrix(
    metadata: &EmbeddingMatrix,
    fine_centers: &EmbeddingMatrix,
    lambda: f64,
) -> Result<Mat64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(ModeError::Config(format!(
            "similarity temperature lambda must be finite and positive, got {lambda}"
        )));
    }
    let mut a = pairwise_sq_dist(metadata, fine_centers)?;
    for v in a.data_mut() {
        *v = (-*v / lambda).exp();
    }
    Ok(a)
}

/// Keep only each row's maximum entry (ties: lowest column), zero the rest.
pub fn max_filter(a: &Mat64) -> Mat64 {
    let mut out = Mat64::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let row = a.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        *out.at_mut(i, best) = row[best];
    }
    out
}

/// Class-count heuristic for classification metadata: softening multiplier
/// below [`SMALL_CLASS_COUNT`], λ division by ln|L| above
/// [`LARGE_CLASS_COUNT`], nothing in between.
pub fn adjust_for_class_count(class_count: usize) -> ClassCountAdjustment {
    if class_count < SMALL_CLASS_COUNT {
        ClassCountAdjustment::Soften {
            multiplier: (0.5 - (class_count as f64).sqrt()).exp(),
        }
    } else if class_count > LARGE_CLASS_COUNT {
        ClassCountAdjustment::Sharpen { divisor: (class_count as f64).ln() }
    } else {
        ClassCountAdjustment::Unadjusted
    }
}

impl ClassCountAdjustment {
    /// λ after the adjustment (only sharpening changes it).
    pub fn lambda_effective(&self, lambda: f64) -> f64 {
        match self {
            ClassCountAdjustment::Sharpen { divisor } => lambda / divisor,
            _ => lambda,
        }
    }

    /// Multiplier applied to A entries (only softening sets one).
    pub fn a_multiplier(&self) -> f64 {
        match self {
            ClassCountAdjustment::Soften { multiplier } => *multiplier,
            _ => 1.0,
        }
    }
}

fn validate_map(a: &Mat64, fine_to_coarse: &[u32], n: usize) -> Result<()> {
    if a.cols() != fine_to_coarse.len() {
        return Err(ModeError::ShapeMismatch {
            context: "routing aggregation".into(),
            left: format!("{} similarity columns", a.cols()),
            right: format!("{} fine clusters", fine_to_coarse.len()),
        });
    }
    if let Some(&bad) = fine_to_coarse.iter().find(|&&c| c as usize >= n) {
        return Err(ModeError::Config(format!(
            "fine-to-coarse map points at expert {bad}, but n={n}"
        )));
    }
    Ok(())
}

/// Aggregate per-expert scores: `S_c = Σ_rows Σ_{s ∈ S_c} A[row][s]`.
fn expert_sums_over_all_rows(a: &Mat64, fine_to_coarse: &[u32], n: usize) -> Vec<f64> {
    let mut sums = vec![0.0f64; n];
    for i in 0..a.rows() {
        let row = a.row(i);
        for (s, &v) in row.iter().enumerate() {
            sums[fine_to_coarse[s] as usize] += v;
        }
    }
    sums
}

/// Classification routing: one softmax over whole-task expert aggregates.
pub fn route_classification(a: &Mat64, fine_to_coarse: &[u32], n: usize) -> Result<Vec<f64>> {
    validate_map(a, fine_to_coarse, n)?;
    Ok(softmax(&expert_sums_over_all_rows(a, fine_to_coarse, n)))
}

/// Text-retrieval routing: the whole corpus is one task, so the formula and
/// result coincide with classification aggregation.
pub fn route_text_retrieval(a: &Mat64, fine_to_coarse: &[u32], n: usize) -> Result<Vec<f64>> {
    route_classification(a, fine_to_coarse, n)
}

/// Image-retrieval routing: every query row is its own task; each output row
/// is an independent softmax over experts.
pub fn route_image_retrieval(a: &Mat64, fine_to_coarse: &[u32], n: usize) -> Result<Mat64> {
    validate_map(a, fine_to_coarse, n)?;
    let mut out = Mat64::zeros(a.rows(), n);
    for i in 0..a.rows() {
        let mut sums = vec![0.0f64; n];
        for (s, &v) in a.row(i).iter().enumerate() {
            sums[fine_to_coarse[s] as usize] += v;
        }
        out.row_mut(i).copy_from_slice(&softmax(&sums));
    }
    Ok(out)
}

/// Build the full routing plan for a task against a cluster model.
///
/// `apply_heuristics` enables the class-count adjustments (classification
/// tasks only; retrieval corpus size is not a class count).
/// `allow_source_mismatch` overrides the embedding-source tag check when
/// both sides carry nonzero tags that disagree.
pub fn build_routing_plan(
    meta: &TaskMetadata,
    model: &ClusterModel,
    lambda: f64,
    apply_heuristics: bool,
    allow_source_mismatch: bool,
) -> Result<RoutingPlan> {
    if meta.embeddings.rows() == 0 {
        return Err(ModeError::EmptyMetadata);
    }
    if meta.embeddings.dim() != model.dim() {
        return Err(ModeError::DimensionMismatch {
            context: "task metadata vs fine centers".into(),
            left: meta.embeddings.dim(),
            right: model.dim(),
        });
    }
    let (ms, cs) = (meta.embeddings.source(), model.source());
    if ms != 0 && cs != 0 && ms != cs && !allow_source_mismatch {
        return Err(ModeError::SourceMismatch { metadata: ms, centers: cs });
    }

    let adjustment = if apply_heuristics && meta.kind == TaskKind::Classification {
        adjust_for_class_count(meta.embeddings.rows())
    } else {
        ClassCountAdjustment::Unadjusted
    };
    let lambda_effective = adjustment.lambda_effective(lambda);

    let mut a = similarity_matrix(&meta.embeddings, model.fine_centers(), lambda_effective)?;
    let multiplier = adjustment.a_multiplier();
    if multiplier != 1.0 {
        for v in a.data_mut() {
            *v *= multiplier;
        }
    }
    let a = max_filter(&a);

    let map = model.fine_to_coarse();
    let n = model.n();
    let weights = match meta.kind {
        TaskKind::Classification => RoutingWeights::Shared(route_classification(&a, map, n)?),
        TaskKind::TextRetrieval => RoutingWeights::Shared(route_text_retrieval(&a, map, n)?),
        TaskKind::ImageRetrieval => RoutingWeights::PerQuery(route_image_retrieval(&a, map, n)?),
    };

    Ok(RoutingPlan { kind: meta.kind, a, lambda, lambda_effective, adjustment, weights })
}

impl RoutingWeights {
    /// Number of experts the weights cover.
    pub fn expert_count(&self) -> usize {
        match self {
            RoutingWeights::Shared(w) => w.len(),
            RoutingWeights::PerQuery(w) => w.cols(),
        }
    }

    /// Restrict to the given expert ids (ascending) and renormalize so each
    /// weight vector sums to 1 over the survivors. Used when only a subset
    /// of experts has finished training.
    pub fn renormalize_over_available(&self, available: &[u32]) -> Result<RoutingWeights> {
        let n = self.expert_count();
        if available.is_empty() {
            return Err(ModeError::Config("no experts available to route to".into()));
        }
        if available.windows(2).any(|w| w[0] >= w[1]) || available.iter().any(|&c| c as usize >= n)
        {
            return Err(ModeError::Config(format!(
                "available expert ids must be ascending and below n={n}: {available:?}"
            )));
        }
        match self {
            RoutingWeights::Shared(w) => {
                let kept: Vec<f64> = available.iter().map(|&c| w[c as usize]).collect();
                let total: f64 = kept.iter().sum();
                if total <= 0.0 {
                    return Err(ModeError::Config(
                        "available experts carry zero routing mass".into(),
                    ));
                }
                Ok(RoutingWeights::Shared(kept.iter().map(|v| v / total).collect()))
            }
            RoutingWeights::PerQuery(w) => {
                let mut out = Mat64::zeros(w.rows(), available.len());
                for i in 0..w.rows() {
                    let row = w.row(i);
                    let kept: Vec<f64> = available.iter().map(|&c| row[c as usize]).collect();
                    let total: f64 = kept.iter().sum();
                    if total <= 0.0 {
                        return Err(ModeError::Config(format!(
                            "available experts carry zero routing mass for query {i}"
                        )));
                    }
                    for (o, v) in out.row_mut(i).iter_mut().zip(&kept) {
                        *o = v / total;
                    }
                }
                Ok(RoutingWeights::PerQuery(out))
            }
        }
    }
}

/// Weighted sum of expert score matrices. With shared weights the whole
/// matrix of expert c is scaled by `w[c]`; with per-query weights, row i of
/// expert c is scaled by `w[i][c]`.
pub fn ensemble_outputs(expert_scores: &[Mat64], weights: &RoutingWeights) -> Result<Mat64> {
    let n = expert_scores.len();
    if n == 0 {
        return Err(ModeError::Config("ensemble needs at least one expert".into()));
    }
    let (rows, cols) = (expert_scores[0].rows(), expert_scores[0].cols());
    for (c, s) in expert_scores.iter().enumerate() {
        if s.rows() != rows || s.cols() != cols {
            return Err(ModeError::ShapeMismatch {
                context: "ensemble score matrices".into(),
                left: format!("expert {c}: {} x {}", s.rows(), s.cols()),
                right: format!("expert 0: {rows} x {cols}"),
            });
        }
    }
    if weights.expert_count() != n {
        return Err(ModeError::ShapeMismatch {
            context: "ensemble weights".into(),
            left: format!("{} weights", weights.expert_count()),
            right: format!("{n} experts"),
        });
    }
    let mut out = Mat64::zeros(rows, cols);
    match weights {
        RoutingWeights::Shared(w) => {
            for (c, s) in expert_scores.iter().enumerate() {
                let wc = w[c];
                for (o, &v) in out.data_mut().iter_mut().zip(s.data()) {
                    *o += wc * v;
                }
            }
        }
        RoutingWeights::PerQuery(w) => {
            if w.rows() != rows {
                return Err(ModeError::ShapeMismatch {
                    context: "per-query ensemble weights".into(),
                    left: format!("{} weight rows", w.rows()),
                    right: format!("{rows} score rows"),
                });
            }
            for (c, s) in expert_scores.iter().enumerate() {
                for i in 0..rows {
                    let wc = w.at(i, c);
                    let (orow, srow) = (out.row_mut(i), s.row(i));
                    for (o, &v) in orow.iter_mut().zip(srow) {
                        *o += wc * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

impl RoutingPlan {
    /// Structured text export for audit and golden tests: task id, λ values,
    /// heuristic flags, and per-expert weights to 9 decimal places.
    pub fn export_text(&self, task_id: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("task: {task_id}\n"));
        out.push_str(&format!(
            "kind: {}\n",
            match self.kind {
                TaskKind::Classification => "classification",
                TaskKind::TextRetrieval => "text-retrieval",
                TaskKind::ImageRetrieval => "image-retrieval",
            }
        ));
        out.push_str(&format!("lambda: {}\n", self.lambda));
        out.push_str(&format!("lambda_effective: {}\n", self.lambda_effective));
        out.push_str(&format!(
            "adjustment: {}\n",
            match self.adjustment {
                ClassCountAdjustment::Soften { multiplier } =>
                    format!("soften (A x {multiplier:.9})"),
                ClassCountAdjustment::Unadjusted => "none".into(),
                ClassCountAdjustment::Sharpen { divisor } =>
                    format!("sharpen (lambda / {divisor:.9})"),
            }
        ));
        match &self.weights {
            RoutingWeights::Shared(w) => {
                let cells: Vec<String> = w.iter().map(|v| format!("{v:.9}")).collect();
                out.push_str(&format!("weights: {}\n", cells.join(" ")));
            }
            RoutingWeights::PerQuery(w) => {
                for i in 0..w.rows() {
                    let cells: Vec<String> = w.row(i).iter().map(|v| format!("{v:.9}")).collect();
                    out.push_str(&format!("weights[{i}]: {}\n", cells.join(" ")));
                }
            }
        }
        out
    }
}
