//! Desk-scale benchmark harness: zero-shot classification, paired retrieval,
//! a concatenated-feature linear probe, and the ablation matrix.
//!
//! Every metric is computed from ensembled expert score matrices under
//! routed (or uniform) weights, reported as structured records carrying the
//! routing weights and a digest of the full harness configuration so any
//! number can be re-derived.

use crate::clustering::{two_step_cluster, ClusterModel, TwoStepConfig};
use crate::embed::EmbeddingMatrix;
use crate::error::ModeError;
use crate::kernels::{dot_matrix, Mat64};
use crate::nn::AdamW;
use crate::router::{
    build_routing_plan, ensemble_outputs, RoutingWeights, TaskKind, TaskMetadata,
    DEFAULT_LAMBDA,
};
use crate::stream::{derive_rng, gauss};
use crate::synth::{
    generate_corpus, generate_split, SyntheticCorpusSpec, SyntheticSplit, EVAL_SPLIT,
};
use crate::trainer::{
    branch_training, false_negative_rate, specialize_expert, train_seed, DataExpert,
    TrainConfig,
};
use crate::Result;
use rand::seq::SliceRandom;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// One evaluated metric, re-derivable from its configuration digest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub task: String,
    /// `top1_accuracy` or `recall_at_k`.
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
    /// Per-expert routing weights used (column means when weights were
    /// per-query).
    pub weights: Vec<f64>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(
        task: &str,
        metric: &str,
        k: Option<usize>,
        value: f64,
        weights: Vec<f64>,
        config_digest: &str,
    ) -> Result<Self> {
        if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
            return Err(ModeError::Config(format!(
                "metric {metric} for task {task} must lie in [0, 1], got {value}"
            )));
        }
        Ok(EvalReport {
            task: task.to_string(),
            metric: metric.to_string(),
            k,
            value,
            weights,
            config_digest: config_digest.to_string(),
        })
    }
}

/// Routing knobs shared by the evaluation entry points.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RouteOptions {
    pub lambda: f64,
    /// Apply the class-count adjustments (classification metadata only).
    pub apply_heuristics: bool,
    /// Permit metadata whose embedding-source tag conflicts with the
    /// cluster centers'.
    pub allow_source_mismatch: bool,
}

impl Default for RouteOptions {
    fn default() -> Self {
        RouteOptions {
            lambda: DEFAULT_LAMBDA,
            apply_heuristics: true,
            allow_source_mismatch: false,
        }
    }
}

/// Equal weight on every expert — the no-routing baseline.
pub fn uniform_weights(n: usize) -> Result<RoutingWeights> {
    if n == 0 {
        return Err(ModeError::Config("cannot weight zero experts".into()));
    }
    Ok(RoutingWeights::Shared(vec![1.0 / n as f64; n]))
}

fn mean_weights(weights: &RoutingWeights) -> Vec<f64> {
    match weights {
        RoutingWeights::Shared(w) => w.clone(),
        RoutingWeights::PerQuery(w) => {
            let mut sums = vec![0.0f64; w.cols()];
            for i in 0..w.rows() {
                for (acc, &v) in sums.iter_mut().zip(w.row(i)) {
                    *acc += v;
                }
            }
            let rows = w.rows().max(1) as f64;
            sums.iter().map(|v| v / rows).collect()
        }
    }
}

fn argmax_row(row: &[f64]) -> u32 {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Fraction of rows whose true column (the diagonal) ranks within the top
/// `k` scores. Ties count the lower column index as ranked first.
pub fn recall_at_k(scores: &Mat64, k: usize) -> Result<f64> {
    if scores.rows() == 0 || scores.rows() != scores.cols() {
        return Err(ModeError::ShapeMismatch {
            context: "recall_at_k paired scores".into(),
            left: format!("{} rows", scores.rows()),
            right: format!("{} cols", scores.cols()),
        });
    }
    if k == 0 {
        return Err(ModeError::Config("recall needs k >= 1".into()));
    }
    let mut hits = 0usize;
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let truth = row[i];
        let mut rank = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > truth || (v == truth && j < i) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.rows() as f64)
}

/// Zero-shot classification result: the report plus raw predictions.
#[derive(Clone, Debug)]
pub struct ClassificationOutcome {
    pub report: EvalReport,
    pub predictions: Vec<u32>,
}

/// Score every image against every class text under fixed routing weights.
/// Scores are unscaled cosines between tower embeddings; the prediction is
/// the argmax class (ties: lowest class id).
pub fn zero_shot_with_weights(
    images: &EmbeddingMatrix,
    labels: &[u32],
    class_metadata: &EmbeddingMatrix,
    experts: &[&DataExpert],
    weights: &RoutingWeights,
    config_digest: &str,
) -> Result<ClassificationOutcome> {
    if experts.is_empty() {
        return Err(ModeError::Config("classification needs at least one expert".into()));
    }
    if class_metadata.rows() == 0 {
        return Err(ModeError::EmptyMetadata);
    }
    if labels.len() != images.rows() {
        return Err(ModeError::ShapeMismatch {
            context: "zero-shot labels".into(),
            left: format!("{} labels", labels.len()),
            right: format!("{} images", images.rows()),
        });
    }
    let classes = class_metadata.rows() as u32;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModeError::Config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut scores = Vec::with_capacity(experts.len());
    for e in experts {
        let yimg = e.params.embed_images(images)?;
        let ycls = e.params.embed_texts(class_metadata)?;
        scores.push(dot_matrix(&yimg, &ycls)?);
    }
    let ensembled = ensemble_outputs(&scores, weights)?;
    let predictions: Vec<u32> =
        (0..ensembled.rows()).map(|i| argmax_row(ensembled.row(i))).collect();
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let report = EvalReport::new(
        "zero_shot_classification",
        "top1_accuracy",
        None,
        hits as f64 / labels.len() as f64,
        mean_weights(weights),
        config_digest,
    )?;
    Ok(ClassificationOutcome { report, predictions })
}

/// Zero-shot classification with weights routed against a cluster model.
pub fn zero_shot_classify(
    images: &EmbeddingMatrix,
    labels: &[u32],
    class_metadata: &EmbeddingMatrix,
    experts: &[&DataExpert],
    model: &ClusterModel,
    opts: &RouteOptions,
    config_digest: &str,
) -> Result<ClassificationOutcome> {
    let meta = TaskMetadata {
        kind: TaskKind::Classification,
        embeddings: class_metadata.clone(),
        labels: None,
    };
    let plan = build_routing_plan(
        &meta,
        model,
        opts.lambda,
        opts.apply_heuristics,
        opts.allow_source_mismatch,
    )?;
    zero_shot_with_weights(images, labels, class_metadata, experts, &plan.weights, config_digest)
}

/// Both retrieval directions at every requested cutoff.
#[derive(Clone, Debug)]
pub struct RetrievalOutcome {
    pub reports: Vec<EvalReport>,
    /// Cutoffs larger than the corpus, as (requested, used) pairs.
    pub clipped: Vec<(usize, usize)>,
}

/// Paired retrieval in both directions. Text retrieval (image queries →
/// texts) uses one corpus-level weight vector; image retrieval (text
/// queries → images) routes every query text independently. `model = None`
/// evaluates with uniform weights.
pub fn retrieval_eval(
    images: &EmbeddingMatrix,
    captions: &EmbeddingMatrix,
    experts: &[&DataExpert],
    model: Option<&ClusterModel>,
    ks: &[usize],
    opts: &RouteOptions,
    config_digest: &str,
) -> Result<RetrievalOutcome> {
    let weights_for = |kind: TaskKind| -> Result<RoutingWeights> {
        match model {
            None => uniform_weights(experts.len()),
            Some(m) => {
                let meta =
                    TaskMetadata { kind, embeddings: captions.clone(), labels: None };
                let plan = build_routing_plan(
                    &meta,
                    m,
                    opts.lambda,
                    opts.apply_heuristics,
                    opts.allow_source_mismatch,
                )?;
                Ok(plan.weights)
            }
        }
    };
    let text_weights = weights_for(TaskKind::TextRetrieval)?;
    let image_weights = weights_for(TaskKind::ImageRetrieval)?;
    retrieval_with_weights(
        images,
        captions,
        experts,
        &text_weights,
        &image_weights,
        ks,
        config_digest,
    )
}

/// Paired retrieval with explicit routing weights — the entry point for
/// partial systems whose weights were renormalized over the experts that
/// actually exist.
pub fn retrieval_with_weights(
    images: &EmbeddingMatrix,
    captions: &EmbeddingMatrix,
    experts: &[&DataExpert],
    text_weights: &RoutingWeights,
    image_weights: &RoutingWeights,
    ks: &[usize],
    config_digest: &str,
) -> Result<RetrievalOutcome> {
    if experts.is_empty() {
        return Err(ModeError::Config("retrieval needs at least one expert".into()));
    }
    if images.rows() != captions.rows() {
        return Err(ModeError::ShapeMismatch {
            context: "paired retrieval corpus".into(),
            left: format!("{} images", images.rows()),
            right: format!("{} captions", captions.rows()),
        });
    }
    let n_items = images.rows();
    if n_items == 0 {
        return Err(ModeError::Config("retrieval corpus is empty".into()));
    }

    let mut text_scores = Vec::with_capacity(experts.len());
    let mut image_scores = Vec::with_capacity(experts.len());
    for e in experts {
        let yimg = e.params.embed_images(images)?;
        let ytxt = e.params.embed_texts(captions)?;
        text_scores.push(dot_matrix(&yimg, &ytxt)?);
        image_scores.push(dot_matrix(&ytxt, &yimg)?);
    }

    let text_ensembled = ensemble_outputs(&text_scores, text_weights)?;
    let image_ensembled = ensemble_outputs(&image_scores, image_weights)?;

    let mut reports = Vec::new();
    let mut clipped = Vec::new();
    for &k in ks {
        if k == 0 {
            return Err(ModeError::Config("retrieval cutoff k must be >= 1".into()));
        }
        let used = k.min(n_items);
        if used != k {
            clipped.push((k, used));
        }
        reports.push(EvalReport::new(
            "text_retrieval",
            "recall_at_k",
            Some(used),
            recall_at_k(&text_ensembled, used)?,
            mean_weights(text_weights),
            config_digest,
        )?);
        reports.push(EvalReport::new(
            "image_retrieval",
            "recall_at_k",
            Some(used),
            recall_at_k(&image_ensembled, used)?,
            mean_weights(image_weights),
            config_digest,
        )?);
    }
    Ok(RetrievalOutcome { reports, clipped })
}

/// Linear-probe training knobs (same optimizer family as the towers).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Items taken from the training split for probe fitting.
    pub train_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            train_size: 1024,
            seed: 0,
        }
    }
}

/// Concatenate each expert's frozen image-tower embeddings: n experts with
/// embedding width k give rows of width n·k, expert blocks in order.
pub fn concat_features(experts: &[&DataExpert], images: &EmbeddingMatrix) -> Result<Mat64> {
    if experts.is_empty() {
        return Err(ModeError::Config("feature concat needs at least one expert".into()));
    }
    let per: Vec<Mat64> =
        experts.iter().map(|e| e.params.embed_images(images)).collect::<Result<_>>()?;
    let width: usize = per.iter().map(|m| m.cols()).sum();
    let mut out = Mat64::zeros(images.rows(), width);
    for i in 0..images.rows() {
        let row = out.row_mut(i);
        let mut offset = 0;
        for m in &per {
            row[offset..offset + m.cols()].copy_from_slice(m.row(i));
            offset += m.cols();
        }
    }
    Ok(out)
}

/// Fit a linear softmax classifier on frozen features and return validation
/// top-1 accuracy. Seeded initialization is the only randomness.
pub fn train_linear_probe(
    train_x: &Mat64,
    train_y: &[u32],
    val_x: &Mat64,
    val_y: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.rows() == 0 || train_x.rows() != train_y.len() {
        return Err(ModeError::ShapeMismatch {
            context: "probe training set".into(),
            left: format!("{} rows", train_x.rows()),
            right: format!("{} labels", train_y.len()),
        });
    }
    if val_x.rows() != val_y.len() {
        return Err(ModeError::ShapeMismatch {
            context: "probe validation set".into(),
            left: format!("{} rows", val_x.rows()),
            right: format!("{} labels", val_y.len()),
        });
    }
    if val_x.cols() != train_x.cols() {
        return Err(ModeError::DimensionMismatch {
            context: "probe features".into(),
            left: train_x.cols(),
            right: val_x.cols(),
        });
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ModeError::Config("probe needs epochs >= 1 and batch_size >= 1".into()));
    }
    let classes = (*train_y.iter().max().unwrap() + 1) as usize;
    let distinct = {
        let mut seen = vec![false; classes];
        for &y in train_y {
            seen[y as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(ModeError::Config(
            "probe training labels are degenerate (single class)".into(),
        ));
    }
    if let Some(&bad) = val_y.iter().find(|&&y| y as usize >= classes) {
        return Err(ModeError::Config(format!(
            "validation label {bad} unseen in probe training"
        )));
    }

    let dim = train_x.cols();
    let len = classes * dim + classes;
    let mut rng = derive_rng(cfg.seed, "probe", 0);
    let mut theta: Vec<f64> = (0..classes * dim).map(|_| 0.01 * gauss(&mut rng)).collect();
    theta.extend(std::iter::repeat(0.0).take(classes));
    // Decay (if configured) applies to the weight matrix, not the biases.
    let mut decay_mask = vec![true; classes * dim];
    decay_mask.extend(std::iter::repeat(false).take(classes));
    let mut opt = AdamW::new(cfg.learning_rate, 0.9, 0.98, 1e-6, cfg.weight_decay, len);

    let logits_of = |theta: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let w = &theta[c * dim..(c + 1) * dim];
                let mut z = theta[classes * dim + c];
                for (wv, xv) in w.iter().zip(x) {
                    z += wv * xv;
                }
                z
            })
            .collect()
    };

    let batch = cfg.batch_size.min(train_x.rows());
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0f64; len];
            for &i in chunk {
                let x = train_x.row(i);
                let z = logits_of(&theta, x);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..classes {
                    let mut g = exps[c] / sum;
                    if c as u32 == train_y[i] {
                        g -= 1.0;
                    }
                    g /= chunk.len() as f64;
                    for (slot, xv) in grad[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                        *slot += g * xv;
                    }
                    grad[classes * dim + c] += g;
                }
            }
            opt.step(&mut theta, &grad, &decay_mask);
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(ModeError::NonFinite { context: "linear probe parameters".into() });
    }

    let hits = (0..val_x.rows())
        .filter(|&i| argmax_row(&logits_of(&theta, val_x.row(i))) == val_y[i])
        .count();
    Ok(hits as f64 / val_x.rows().max(1) as f64)
}

/// Linear probe over concatenated frozen features from all experts,
/// equally weighted (no routing).
pub fn concat_linear_probe(
    train_images: &EmbeddingMatrix,
    train_labels: &[u32],
    val_images: &EmbeddingMatrix,
    val_labels: &[u32],
    experts: &[&DataExpert],
    cfg: &ProbeConfig,
    config_digest: &str,
) -> Result<EvalReport> {
    let train_x = concat_features(experts, train_images)?;
    let val_x = concat_features(experts, val_images)?;
    let acc = train_linear_probe(&train_x, train_labels, &val_x, val_labels, cfg)?;
    EvalReport::new(
        "linear_probe",
        "top1_accuracy",
        None,
        acc,
        vec![1.0 / experts.len() as f64; experts.len()],
        config_digest,
    )
}

/// Mean batch false-negative rate over randomly drawn batches: the fraction
/// of off-diagonal (image, caption) pairs where the caption is a canonical
/// description of the image's topic.
pub fn batch_false_negative_rate(
    split: &SyntheticSplit,
    batch_size: usize,
    batches: usize,
    seed: u64,
) -> Result<f64> {
    if batch_size < 2 || batch_size > split.len() {
        return Err(ModeError::Config(format!(
            "batch size {batch_size} invalid for a split of {}",
            split.len()
        )));
    }
    if batches == 0 {
        return Err(ModeError::Config("need at least one batch".into()));
    }
    let image_cells = split.canonical_image_cells();
    let caption_cells = split.caption_cells();
    let mut rng = derive_rng(seed, "fnr-batches", 0);
    let mut total = 0.0f64;
    for _ in 0..batches {
        let picks = rand::seq::index::sample(&mut rng, split.len(), batch_size);
        let img: Vec<u32> = picks.iter().map(|i| image_cells[i]).collect();
        let cap: Vec<u32> = picks.iter().map(|i| caption_cells[i]).collect();
        total += false_negative_rate(&img, &cap);
    }
    Ok(total / batches as f64)
}

/// Ablation arm families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArmKind {
    /// Cluster-and-specialize data experts with routed weights.
    Mode,
    /// n dense replicas of the full-corpus model, uniform weights.
    Full,
    /// Random shards matching the clustered shard sizes, uniform weights.
    Random,
    /// Single-step clustering: m = n fine clusters.
    OneStep,
    /// Expert training as Mode, but routing against coarse centers.
    CoarseCluster,
}

/// One ablation arm: a family plus its expert count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Arm {
    pub kind: ArmKind,
    pub n: usize,
}

impl Arm {
    pub fn new(kind: ArmKind, n: usize) -> Self {
        Arm { kind, n }
    }

    /// Stable identifier, e.g. `mode-2`, `full-1`, `one-step-4`.
    pub fn id(&self) -> String {
        let kind = match self.kind {
            ArmKind::Mode => "mode",
            ArmKind::Full => "full",
            ArmKind::Random => "random",
            ArmKind::OneStep => "one-step",
            ArmKind::CoarseCluster => "coarse-cluster",
        };
        format!("{kind}-{}", self.n)
    }

    pub fn parse(s: &str) -> Result<Arm> {
        let err = || {
            ModeError::Config(format!(
                "unrecognized arm '{s}'; expected one of mode-N, full-N, random-N, \
                 one-step-N, coarse-cluster-N"
            ))
        };
        let (head, tail) = s.rsplit_once('-').ok_or_else(err)?;
        let n: usize = tail.parse().map_err(|_| err())?;
        if n == 0 {
            return Err(err());
        }
        let kind = match head {
            "mode" => ArmKind::Mode,
            "full" => ArmKind::Full,
            "random" => ArmKind::Random,
            "one-step" => ArmKind::OneStep,
            "coarse-cluster" => ArmKind::CoarseCluster,
            _ => return Err(err()),
        };
        Ok(Arm { kind, n })
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl Serialize for Arm {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Arm::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Everything needed to train one arm.
pub struct ArmContext<'a> {
    pub train: &'a SyntheticSplit,
    pub seed_model: &'a DataExpert,
    /// Caption embeddings handed to the clusterer (possibly a sample).
    pub cluster_sample: &'a EmbeddingMatrix,
    /// Fine cluster count for two-step arms.
    pub m: usize,
    pub train_cfg: &'a TrainConfig,
    pub cluster_seed: u64,
}

/// A trained arm ready for evaluation.
#[derive(Clone, Debug)]
pub struct TrainedSystem {
    pub arm: Arm,
    /// Index == condition (or replica) id.
    pub experts: Vec<DataExpert>,
    /// Model to route with; `None` means uniform weights.
    pub routing_model: Option<ClusterModel>,
    /// Items each expert trained on.
    pub shard_sizes: Vec<u64>,
}

fn cluster_for(ctx: &ArmContext, m: usize, n: usize) -> Result<ClusterModel> {
    let cfg = TwoStepConfig { seed: ctx.cluster_seed, ..TwoStepConfig::new(m, n) };
    Ok(two_step_cluster(ctx.cluster_sample, &cfg)?.model)
}

fn specialize_all(
    ctx: &ArmContext,
    model: &ClusterModel,
) -> Result<(Vec<DataExpert>, Vec<u64>)> {
    let assignment = model.assign_corpus(&ctx.train.captions)?;
    let mut experts = Vec::with_capacity(model.n());
    for c in 0..model.n() as u32 {
        let idx = assignment.shard_indices(c);
        let shard = ctx.train.select(&idx);
        experts.push(specialize_expert(
            ctx.seed_model,
            &shard.images,
            &shard.captions,
            c,
            model.fine_members(c),
            ctx.train_cfg,
        )?);
    }
    Ok((experts, assignment.coarse_counts))
}

/// Train one ablation arm. All arms branch from the same seed model and use
/// the same batch-stream derivation, so `full-1` reproduces the dense
/// baseline exactly and clustered arms differ only where the method does.
pub fn train_arm(arm: Arm, ctx: &ArmContext) -> Result<TrainedSystem> {
    if arm.n == 0 {
        return Err(ModeError::Config("arm needs at least one expert".into()));
    }
    match arm.kind {
        ArmKind::Mode | ArmKind::CoarseCluster => {
            let model = cluster_for(ctx, ctx.m, arm.n)?;
            let (experts, shard_sizes) = specialize_all(ctx, &model)?;
            let routing_model = if arm.kind == ArmKind::CoarseCluster {
                model.coarse_as_fine()
            } else {
                model
            };
            Ok(TrainedSystem { arm, experts, routing_model: Some(routing_model), shard_sizes })
        }
        ArmKind::OneStep => {
            let model = cluster_for(ctx, arm.n, arm.n)?;
            let (experts, shard_sizes) = specialize_all(ctx, &model)?;
            Ok(TrainedSystem { arm, experts, routing_model: Some(model), shard_sizes })
        }
        ArmKind::Full => {
            let mut experts = Vec::with_capacity(arm.n);
            for replica in 0..arm.n as u64 {
                experts.push(branch_training(
                    ctx.seed_model,
                    &ctx.train.images,
                    &ctx.train.captions,
                    None,
                    Vec::new(),
                    replica,
                    ctx.train_cfg,
                )?);
            }
            let sizes = vec![ctx.train.len() as u64; arm.n];
            Ok(TrainedSystem { arm, experts, routing_model: None, shard_sizes: sizes })
        }
        ArmKind::Random => {
            // Mimic the clustered arm's shard sizes exactly, but fill the
            // shards by a seeded shuffle instead of cluster membership.
            let model = cluster_for(ctx, ctx.m, arm.n)?;
            let assignment = model.assign_corpus(&ctx.train.captions)?;
            let mut order: Vec<usize> = (0..ctx.train.len()).collect();
            let mut rng = derive_rng(ctx.train_cfg.seed, "random-split", arm.n as u64);
            order.shuffle(&mut rng);
            let mut experts = Vec::with_capacity(arm.n);
            let mut offset = 0usize;
            for c in 0..arm.n {
                let size = assignment.coarse_counts[c] as usize;
                let idx = &order[offset..offset + size];
                offset += size;
                let shard = ctx.train.select(idx);
                experts.push(branch_training(
                    ctx.seed_model,
                    &shard.images,
                    &shard.captions,
                    Some(c as u32),
                    Vec::new(),
                    c as u64,
                    ctx.train_cfg,
                )?);
            }
            Ok(TrainedSystem {
                arm,
                experts,
                routing_model: None,
                shard_sizes: assignment.coarse_counts,
            })
        }
    }
}

/// Full harness configuration. The `seed` fields inside `corpus` and
/// `train` are overridden by each matrix seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub corpus: SyntheticCorpusSpec,
    pub train: TrainConfig,
    /// Fine cluster count for two-step arms.
    pub m: usize,
    pub arms: Vec<Arm>,
    /// Matrix seeds; every arm runs once per seed.
    pub seeds: Vec<u64>,
    /// Held-out items per evaluation split.
    pub eval_size: usize,
    /// Retrieval cutoffs.
    pub ks: Vec<usize>,
    pub route: RouteOptions,
    /// Caption sample size for clustering; 0 uses the full corpus.
    pub cluster_sample_size: usize,
    /// Linear probe (skipped when absent).
    pub probe: Option<ProbeConfig>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            corpus: SyntheticCorpusSpec::default(),
            train: TrainConfig::default(),
            m: 64,
            arms: vec![Arm::new(ArmKind::Mode, 2), Arm::new(ArmKind::Full, 1)],
            seeds: vec![0, 1, 2, 3, 4],
            eval_size: 2000,
            ks: vec![1, 5],
            route: RouteOptions::default(),
            cluster_sample_size: 10_000,
            probe: None,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.arms.is_empty() {
            return Err(ModeError::Config("harness needs at least one arm".into()));
        }
        if self.seeds.is_empty() {
            return Err(ModeError::Config("harness needs at least one seed".into()));
        }
        if self.eval_size < 2 {
            return Err(ModeError::Config("eval_size must be at least 2".into()));
        }
        let max_n = self.arms.iter().map(|a| a.n).max().unwrap_or(1);
        if self.m < max_n {
            return Err(ModeError::Config(format!(
                "fine cluster count m={} below largest arm n={max_n}",
                self.m
            )));
        }
        Ok(())
    }

    /// Hex digest of the full configuration; stamped on every record.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("harness config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// One harness measurement: arm and seed, then the report fields.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub arm: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Evaluate a trained system on held-out data: zero-shot classification,
/// both retrieval directions, and optionally the linear probe.
pub fn evaluate_system(
    system: &TrainedSystem,
    class_metadata: &EmbeddingMatrix,
    eval: &SyntheticSplit,
    probe_train: Option<&SyntheticSplit>,
    cfg: &HarnessConfig,
    config_digest: &str,
) -> Result<Vec<EvalReport>> {
    let experts: Vec<&DataExpert> = system.experts.iter().collect();
    let mut reports = Vec::new();

    let classify = match &system.routing_model {
        Some(model) => zero_shot_classify(
            &eval.images,
            &eval.topics,
            class_metadata,
            &experts,
            model,
            &cfg.route,
            config_digest,
        )?,
        None => {
            let w = uniform_weights(experts.len())?;
            zero_shot_with_weights(
                &eval.images,
                &eval.topics,
                class_metadata,
                &experts,
                &w,
                config_digest,
            )?
        }
    };
    reports.push(classify.report);

    let retrieval = retrieval_eval(
        &eval.images,
        &eval.captions,
        &experts,
        system.routing_model.as_ref(),
        &cfg.ks,
        &cfg.route,
        config_digest,
    )?;
    reports.extend(retrieval.reports);

    if let (Some(pcfg), Some(train)) = (&cfg.probe, probe_train) {
        let take = pcfg.train_size.min(train.len());
        let idx: Vec<usize> = (0..take).collect();
        let probe_split = train.select(&idx);
        reports.push(concat_linear_probe(
            &probe_split.images,
            &probe_split.topics,
            &eval.images,
            &eval.topics,
            &experts,
            pcfg,
            config_digest,
        )?);
    }
    Ok(reports)
}

fn run_seed(cfg: &HarnessConfig, seed: u64, digest: &str) -> Result<Vec<EvalRecord>> {
    let spec = SyntheticCorpusSpec { seed, ..cfg.corpus.clone() };
    let corpus = generate_corpus(&spec)?;
    let eval = generate_split(&spec, &corpus.centers, cfg.eval_size, EVAL_SPLIT, 1.0)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let seed_model = train_seed(&corpus.train.images, &corpus.train.captions, &train_cfg)?;

    let sample = if cfg.cluster_sample_size == 0
        || cfg.cluster_sample_size >= corpus.train.len()
    {
        corpus.train.captions.clone()
    } else {
        let mut rng = derive_rng(seed, "cluster-sample", 0);
        let picks =
            rand::seq::index::sample(&mut rng, corpus.train.len(), cfg.cluster_sample_size);
        let mut idx: Vec<usize> = picks.iter().collect();
        idx.sort_unstable();
        corpus.train.captions.gather(&idx)
    };

    let ctx = ArmContext {
        train: &corpus.train,
        seed_model: &seed_model,
        cluster_sample: &sample,
        m: cfg.m,
        train_cfg: &train_cfg,
        cluster_seed: seed,
    };

    // Mode and CoarseCluster arms share expert training; cache by the
    // training signature so shared work runs once.
    let mut cache: HashMap<(ArmKind, usize), TrainedSystem> = HashMap::new();
    let mut records = Vec::new();
    for &arm in &cfg.arms {
        let base_kind = match arm.kind {
            ArmKind::CoarseCluster => ArmKind::Mode,
            k => k,
        };
        let base_key = (base_kind, arm.n);
        if !cache.contains_key(&base_key) {
            let base = train_arm(Arm::new(base_kind, arm.n), &ctx)?;
            cache.insert(base_key, base);
        }
        let base = &cache[&base_key];
        let system = if arm.kind == ArmKind::CoarseCluster {
            TrainedSystem {
                arm,
                experts: base.experts.clone(),
                routing_model: base.routing_model.as_ref().map(|m| m.coarse_as_fine()),
                shard_sizes: base.shard_sizes.clone(),
            }
        } else {
            base.clone()
        };
        let reports = evaluate_system(
            &system,
            &corpus.class_metadata,
            &eval,
            Some(&corpus.train),
            cfg,
            digest,
        )?;
        records.extend(
            reports.into_iter().map(|report| EvalRecord { arm: arm.id(), seed, report }),
        );
    }
    Ok(records)
}

/// Run the full ablation matrix: every arm × every seed, one shared seed
/// model per seed. Seeds are independent jobs; records keep seed order.
pub fn run_matrix(cfg: &HarnessConfig) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    let digest = cfg.digest();
    #[cfg(feature = "parallel")]
    let per_seed: Result<Vec<Vec<EvalRecord>>> =
        cfg.seeds.par_iter().map(|&s| run_seed(cfg, s, &digest)).collect();
    #[cfg(not(feature = "parallel"))]
    let per_seed: Result<Vec<Vec<EvalRecord>>> =
        cfg.seeds.iter().map(|&s| run_seed(cfg, s, &digest)).collect();
    Ok(per_seed?.into_iter().flatten().collect())
}

/// Render records as line-delimited JSON with fixed field order.
pub fn records_to_jsonl(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parse records back from line-delimited JSON.
pub fn records_from_jsonl(text: &str) -> Result<Vec<EvalRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| ModeError::Config(format!("bad record line: {e}")))
        })
        .collect()
}

/// Plain-text summary: mean metric per (task, k, arm) across seeds.
pub fn render_summary(records: &[EvalRecord]) -> String {
    let mut groups: BTreeMap<(String, Option<usize>, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.report.task.clone(), r.report.k, r.arm.clone()))
            .or_default()
            .push(r.report.value);
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>4} {:<18} {:>8} {:>6}\n",
        "task", "k", "arm", "mean", "seeds"
    ));
    for ((task, k, arm), values) in &groups {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let k_text = k.map_or(String::from("-"), |k| k.to_string());
        out.push_str(&format!(
            "{task:<28} {k_text:>4} {arm:<18} {mean:>8.4} {:>6}\n",
            values.len()
        ));
    }
    out
}
