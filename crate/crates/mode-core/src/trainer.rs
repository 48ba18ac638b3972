//! Contrastive training: the shared seed phase, per-shard expert
//! specialization, and checkpoint serialization.
//!
//! Every expert branches from one partially trained seed model and continues
//! on its own shard with a batch stream derived from (root seed, stream
//! index). Jobs share nothing mutable, so they can run in any order — or in
//! parallel — and produce bit-identical checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{read_u32, EmbeddingMatrix};
use crate::error::ModeError;
use crate::kernels::Mat64;
use crate::nn::{AdamW, Tower, TowerParams, TowerShape, LAYER_COUNT, MAX_LOGIT_SCALE};
use crate::stream::derive_rng;
use crate::Result;

/// Magic bytes for the checkpoint format.
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MODX";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;
/// Condition id stored for seed/dense checkpoints (no coarse cluster).
pub const CONDITION_NONE: u32 = 0xFFFF_FFFF;

/// Training hyperparameters shared by the seed phase and every branch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Pairs per batch (≥ 2; a batch needs in-batch negatives).
    pub batch_size: usize,
    /// Combined optimizer-step budget: seed phase plus one expert's phase.
    pub total_steps: u64,
    /// Fraction of `total_steps` spent on the shared seed phase.
    pub seed_fraction: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Initial logit-scale log-value.
    pub logit_scale_init: f64,
    /// Keep the logit scale fixed during training.
    pub freeze_logit_scale: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Root seed; batch streams and init derive from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 3200,
            seed_fraction: 27.0 / 32.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.1,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            freeze_logit_scale: false,
            hidden_dim: 32,
            embed_dim: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(ModeError::Config(format!(
                "batch_size must be at least 2 (got {}); contrastive batches need negatives",
                self.batch_size
            )));
        }
        if self.total_steps < 2 {
            return Err(ModeError::Config(format!(
                "total_steps must be at least 2 (got {}) to cover both phases",
                self.total_steps
            )));
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction < 1.0) {
            return Err(ModeError::Config(format!(
                "seed_fraction must lie strictly between 0 and 1, got {}",
                self.seed_fraction
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModeError::Config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(ModeError::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(ModeError::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !self.logit_scale_init.is_finite() {
            return Err(ModeError::Config("logit_scale_init must be finite".into()));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(ModeError::Config("hidden_dim and embed_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Optimizer steps spent on the shared seed phase.
    pub fn seed_steps(&self) -> u64 {
        let raw = (self.seed_fraction * self.total_steps as f64).round() as u64;
        raw.clamp(1, self.total_steps - 1)
    }

    /// Optimizer steps each branch runs after the seed phase.
    pub fn expert_steps(&self) -> u64 {
        self.total_steps - self.seed_steps()
    }

    fn shape_for(&self, images: &EmbeddingMatrix, texts: &EmbeddingMatrix) -> TowerShape {
        TowerShape {
            image_dim: images.dim(),
            caption_dim: texts.dim(),
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
        }
    }
}

/// One trained checkpoint: the shared seed (condition = NONE) or a data
/// expert specialized to coarse cluster `condition_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataExpert {
    pub params: TowerParams,
    /// Coarse cluster this expert is conditioned on; `None` for the seed and
    /// for dense/full-corpus branches.
    pub condition_id: Option<u32>,
    /// Fine cluster ids making up the condition (empty when not conditioned;
    /// not persisted — rehydrate from the cluster model after loading).
    pub fine_set: Vec<u32>,
    pub steps_trained: u64,
    /// Digest of the seed checkpoint this branch grew from (zeros for the
    /// seed itself).
    pub provenance: [u8; 32],
}

/// Loss value plus flat-layout gradients for one batch.
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Symmetric in-batch contrastive loss with analytic gradients.
///
/// Both towers run on the paired batch; logits are exp(logit_scale) times
/// the cosine similarity between every image row and every text row. The
/// loss averages row-wise and column-wise cross-entropy against the diagonal.
pub fn contrastive_loss(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    params: &TowerParams,
) -> Result<LossAndGrad> {
    let b = images.rows();
    if texts.rows() != b {
        return Err(ModeError::ShapeMismatch {
            context: "contrastive batch".into(),
            left: format!("{b} image rows"),
            right: format!("{} text rows", texts.rows()),
        });
    }
    if b < 2 {
        return Err(ModeError::Config(format!(
            "contrastive batch needs at least 2 pairs, got {b}"
        )));
    }

    let img = params.forward(Tower::Image, images)?;
    let txt = params.forward(Tower::Text, texts)?;
    let k = params.shape().embed_dim;
    let scale = params.scale();

    // Logits L = scale · Y_img · Y_txtᵀ.
    let mut logits = Mat64::zeros(b, b);
    for i in 0..b {
        let yi = img.y.row(i);
        let li = logits.row_mut(i);
        for (j, lij) in li.iter_mut().enumerate() {
            let tj = txt.y.row(j);
            let mut acc = 0.0;
            for d in 0..k {
                acc += yi[d] * tj[d];
            }
            *lij = scale * acc;
        }
    }

    // loss = ½·[mean_i CE(row i) + mean_j CE(col j)], targets on the diagonal.
    let mut row_p = Mat64::zeros(b, b); // softmax over each row
    let mut loss_rows = 0.0;
    for i in 0..b {
        let li = logits.row(i);
        let max = li.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in li {
            denom += (v - max).exp();
        }
        let lse = max + denom.ln();
        loss_rows += lse - li[i];
        let pi = row_p.row_mut(i);
        for (j, p) in pi.iter_mut().enumerate() {
            *p = (li[j] - lse).exp();
        }
    }
    let mut col_q = Mat64::zeros(b, b); // softmax over each column
    let mut loss_cols = 0.0;
    for j in 0..b {
        let mut max = f64::NEG_INFINITY;
        for i in 0..b {
            max = max.max(logits.at(i, j));
        }
        let mut denom = 0.0;
        for i in 0..b {
            denom += (logits.at(i, j) - max).exp();
        }
        let lse = max + denom.ln();
        loss_cols += lse - logits.at(j, j);
        for i in 0..b {
            *col_q.at_mut(i, j) = (logits.at(i, j) - lse).exp();
        }
    }
    let bf = b as f64;
    let loss = 0.5 * (loss_rows + loss_cols) / bf;

    // dLoss/dL = (P + Q − 2I) / (2B)
    let mut g = Mat64::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            *g.at_mut(i, j) = (row_p.at(i, j) + col_q.at(i, j) - 2.0 * delta) / (2.0 * bf);
        }
    }

    // dY_img = scale·G·Y_txt; dY_txt = scale·Gᵀ·Y_img;
    // d(logit_scale) = Σ G ⊙ L (since ∂L/∂t = L for L = eᵗ·cos).
    let mut d_img = Mat64::zeros(b, k);
    let mut d_txt = Mat64::zeros(b, k);
    let mut d_ls = 0.0;
    for i in 0..b {
        let gi = g.row(i);
        let di = d_img.row_mut(i);
        for (j, &gij) in gi.iter().enumerate() {
            let tj = txt.y.row(j);
            for d in 0..k {
                di[d] += scale * gij * tj[d];
            }
            d_ls += gij * logits.at(i, j);
        }
    }
    for j in 0..b {
        let dj = d_txt.row_mut(j);
        for i in 0..b {
            let gij = g.at(i, j);
            let yi = img.y.row(i);
            for d in 0..k {
                dj[d] += scale * gij * yi[d];
            }
        }
    }

    let mut grad = vec![0.0f64; params.shape().param_len()];
    params.backward(Tower::Image, &img, &d_img, &mut grad);
    params.backward(Tower::Text, &txt, &d_txt, &mut grad);
    grad[params.shape().logit_scale_index()] = d_ls;

    Ok(LossAndGrad { loss, grad })
}

/// Drive `steps` optimizer steps over shuffled epoch batches of the given
/// pair set. Fresh optimizer state; used by both phases.
fn run_phase(
    params: &mut TowerParams,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    rng: &mut impl rand::Rng,
    steps: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = images.rows();
    let batch = cfg.batch_size.min(n);
    let mask = params.shape().decay_mask();
    let ls_index = params.shape().logit_scale_index();
    let mut opt = AdamW::new(
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
        cfg.weight_decay,
        params.shape().param_len(),
    );

    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n; // force a shuffle on the first step
    for step in 0..steps {
        if pos + batch > n {
            order.shuffle(rng);
            pos = 0;
        }
        let indices = &order[pos..pos + batch];
        pos += batch;
        let img_batch = images.gather(indices);
        let txt_batch = texts.gather(indices);
        let mut out = contrastive_loss(&img_batch, &txt_batch, params)?;
        if !out.loss.is_finite() {
            return Err(ModeError::NonFiniteLoss { step, loss: out.loss });
        }
        if cfg.freeze_logit_scale {
            out.grad[ls_index] = 0.0;
        }
        opt.step(params.theta_mut(), &out.grad, &mask);
        let ls = params.logit_scale().min(MAX_LOGIT_SCALE.ln());
        params.set_logit_scale(ls);
        if !params.all_finite() {
            return Err(ModeError::NonFiniteLoss { step, loss: out.loss });
        }
    }
    Ok(())
}

fn validate_pair_set(images: &EmbeddingMatrix, texts: &EmbeddingMatrix) -> Result<()> {
    if images.rows() != texts.rows() {
        return Err(ModeError::ShapeMismatch {
            context: "paired corpus".into(),
            left: format!("{} images", images.rows()),
            right: format!("{} texts", texts.rows()),
        });
    }
    if !images.all_finite() || !texts.all_finite() {
        return Err(ModeError::NonFinite { context: "training pair set".into() });
    }
    Ok(())
}

/// Train the shared seed model on the full corpus for the seed fraction of
/// the step budget.
pub fn train_seed(
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<DataExpert> {
    cfg.validate()?;
    validate_pair_set(images, texts)?;
    if images.rows() < 2 {
        return Err(ModeError::Config(format!(
            "seed training needs at least 2 pairs, got {}",
            images.rows()
        )));
    }
    let mut params =
        TowerParams::init(cfg.shape_for(images, texts), cfg.seed, cfg.logit_scale_init)?;
    let mut rng = derive_rng(cfg.seed, "seed-batches", 0);
    let steps = cfg.seed_steps();
    run_phase(&mut params, images, texts, &mut rng, steps, cfg)?;
    Ok(DataExpert {
        params,
        condition_id: None,
        fine_set: Vec::new(),
        steps_trained: steps,
        provenance: [0u8; 32],
    })
}

/// Branch from the seed and continue training on an arbitrary pair set with
/// an explicit batch-stream index. The general engine behind
/// [`specialize_expert`]; also drives dense continuations and ablation arms,
/// which must share the exact stream derivation so that a single expert on
/// the full corpus reproduces the dense trajectory step for step.
pub fn branch_training(
    seed: &DataExpert,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    condition_id: Option<u32>,
    fine_set: Vec<u32>,
    stream_index: u64,
    cfg: &TrainConfig,
) -> Result<DataExpert> {
    cfg.validate()?;
    validate_pair_set(images, texts)?;
    if seed.condition_id.is_some() {
        return Err(ModeError::Config(format!(
            "branch must start from the seed model, not expert {:?}",
            seed.condition_id
        )));
    }
    if images.rows() < 2 {
        return Err(ModeError::Config(format!(
            "branch needs at least 2 pairs, got {}",
            images.rows()
        )));
    }
    let mut params = seed.params.clone();
    let mut rng = derive_rng(cfg.seed, "expert-batches", stream_index);
    let steps = cfg.expert_steps();
    run_phase(&mut params, images, texts, &mut rng, steps, cfg)?;
    Ok(DataExpert {
        params,
        condition_id,
        fine_set,
        steps_trained: seed.steps_trained + steps,
        provenance: checkpoint_digest(seed),
    })
}

/// Specialize one data expert on its coarse shard. `fine_set` lists the fine
/// clusters forming condition `condition_id`.
pub fn specialize_expert(
    seed: &DataExpert,
    shard_images: &EmbeddingMatrix,
    shard_texts: &EmbeddingMatrix,
    condition_id: u32,
    fine_set: Vec<u32>,
    cfg: &TrainConfig,
) -> Result<DataExpert> {
    if shard_images.rows() == 0 {
        return Err(ModeError::EmptyShard { condition: condition_id });
    }
    if shard_images.rows() < 2 {
        return Err(ModeError::Config(format!(
            "shard for condition {condition_id} has a single pair; contrastive batches need 2"
        )));
    }
    if fine_set.is_empty() {
        return Err(ModeError::Config(format!(
            "condition {condition_id} has an empty fine-cluster set"
        )));
    }
    branch_training(
        seed,
        shard_images,
        shard_texts,
        Some(condition_id),
        fine_set,
        condition_id as u64,
        cfg,
    )
}

/// Fraction of off-diagonal (image i, caption j) pairs in a batch whose
/// topic labels match — captions that would wrongly be treated as negatives
/// for some other image. Symmetric single-label batches pass the same slice
/// twice.
pub fn false_negative_rate(image_labels: &[u32], caption_labels: &[u32]) -> f64 {
    let b = image_labels.len();
    assert_eq!(b, caption_labels.len(), "batch label vectors must align");
    if b < 2 {
        return 0.0;
    }
    let mut hits = 0usize;
    for (i, &img) in image_labels.iter().enumerate() {
        for (j, &cap) in caption_labels.iter().enumerate() {
            if i != j && img == cap {
                hits += 1;
            }
        }
    }
    hits as f64 / (b * (b - 1)) as f64
}

/// Elementwise arithmetic mean of expert parameters (including the
/// logit-scale log-value). All experts must share one shape.
pub fn average_params(experts: &[&DataExpert]) -> Result<TowerParams> {
    let first = experts.first().ok_or(ModeError::EmptyMetadata)?;
    let shape = first.params.shape();
    for e in experts {
        if e.params.shape() != shape {
            return Err(ModeError::ShapeMismatch {
                context: "parameter averaging".into(),
                left: format!("{:?}", e.params.shape()),
                right: format!("{shape:?}"),
            });
        }
    }
    let mut mean = vec![0.0f64; shape.param_len()];
    for e in experts {
        for (m, &v) in mean.iter_mut().zip(e.params.theta()) {
            *m += v;
        }
    }
    let n = experts.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    TowerParams::from_theta(shape, mean)
}

impl DataExpert {
    /// Serialize to the checkpoint wire format.
    pub fn encode(&self) -> Vec<u8> {
        let shape = self.params.shape();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.condition_id.unwrap_or(CONDITION_NONE).to_le_bytes());
        out.extend_from_slice(&(LAYER_COUNT as u32).to_le_bytes());
        for layer in 0..LAYER_COUNT {
            let (rows, cols) = shape.layer_shapes()[layer];
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for &v in &self.params.theta()[shape.layer_range(layer)] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.params.logit_scale().to_le_bytes());
        out.extend_from_slice(&self.steps_trained.to_le_bytes());
        out.extend_from_slice(&self.provenance);
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut r = BufReader::new(file);
        let truncated = |needed: u64| ModeError::TruncatedPayload {
            path: path.to_path_buf(),
            needed,
            found: len,
        };

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| truncated(16))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModeError::BadMagic {
                path: path.to_path_buf(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(&mut r).map_err(|_| truncated(16))?;
        if version != CHECKPOINT_VERSION {
            return Err(ModeError::VersionMismatch {
                path: path.to_path_buf(),
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let condition = read_u32(&mut r).map_err(|_| truncated(16))?;
        let layer_count = read_u32(&mut r).map_err(|_| truncated(16))? as usize;
        if layer_count != LAYER_COUNT {
            return Err(ModeError::Config(format!(
                "checkpoint {} declares {layer_count} layers; this format has {LAYER_COUNT}",
                path.display()
            )));
        }

        let mut dims = [(0usize, 0usize); LAYER_COUNT];
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(LAYER_COUNT);
        let mut consumed = 16u64;
        for d in &mut dims {
            let rows = read_u32(&mut r).map_err(|_| truncated(consumed + 8))? as usize;
            let cols = read_u32(&mut r).map_err(|_| truncated(consumed + 8))? as usize;
            if rows == 0 || cols == 0 {
                return Err(ModeError::Config(format!(
                    "checkpoint {} has a zero-extent layer ({rows} x {cols})",
                    path.display()
                )));
            }
            *d = (rows, cols);
            consumed += 8;
            let bytes = rows as u64 * cols as u64 * 4;
            let mut buf = vec![0u8; bytes as usize];
            r.read_exact(&mut buf).map_err(|_| truncated(consumed + bytes))?;
            consumed += bytes;
            layers.push(
                buf.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
            );
        }

        let mut tail = [0u8; 8 + 8 + 32];
        r.read_exact(&mut tail).map_err(|_| truncated(consumed + 48))?;
        consumed += 48;
        if len > consumed {
            return Err(ModeError::TrailingBytes {
                path: path.to_path_buf(),
                extra: len - consumed,
            });
        }
        let logit_scale = f64::from_le_bytes(tail[0..8].try_into().unwrap());
        let steps_trained = u64::from_le_bytes(tail[8..16].try_into().unwrap());
        let mut provenance = [0u8; 32];
        provenance.copy_from_slice(&tail[16..48]);

        // Reconstruct the shape from layer dims and check internal agreement.
        let shape = TowerShape {
            image_dim: dims[0].1,
            caption_dim: dims[4].1,
            hidden_dim: dims[0].0,
            embed_dim: dims[2].0,
        };
        if dims != shape.layer_shapes() {
            return Err(ModeError::Config(format!(
                "checkpoint {} has inconsistent layer dimensions: {dims:?}",
                path.display()
            )));
        }
        let mut theta = Vec::with_capacity(shape.param_len());
        for layer in layers {
            theta.extend_from_slice(&layer);
        }
        theta.push(logit_scale);
        let params = TowerParams::from_theta(shape, theta)?;
        if !params.all_finite() {
            return Err(ModeError::NonFinite {
                context: format!("checkpoint parameters in {}", path.display()),
            });
        }
        Ok(Self {
            params,
            condition_id: (condition != CONDITION_NONE).then_some(condition),
            fine_set: Vec::new(),
            steps_trained,
            provenance,
        })
    }
}

/// Digest identifying a checkpoint's exact serialized content.
pub fn checkpoint_digest(expert: &DataExpert) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(expert.encode());
    hasher.finalize().into()
}
