//! Synthetic paired-modality corpus with measurable ground truth.
//!
//! Items live on a topic/mode grid: each topic owns one image center and M
//! caption-mode centers. Mode 0 is the *canonical* description of the topic's
//! images; modes 1..M are alternative descriptions ("the caption describes
//! something else about the picture"). With probability ρ an item's caption
//! is drawn from a non-canonical mode, which makes the batch false-negative
//! rate a measurable quantity: a caption collides with another item's image
//! exactly when it is a canonical caption of that image's topic.
//!
//! Canonical caption-mode centers form a deliberately tight bundle (shared
//! anchor plus a small per-topic offset) while non-canonical modes are
//! scattered uniformly on the sphere, so caption clustering separates the
//! two regimes and shard-level false-negative rates genuinely differ.

use crate::embed::EmbeddingMatrix;
use crate::error::ModeError;
use crate::stream::{derive_rng, gauss};
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Source tag for image-side embeddings.
pub const IMAGE_SOURCE: u8 = 1;
/// Source tag for caption-side embeddings (cluster centers and task
/// metadata share this space).
pub const CAPTION_SOURCE: u8 = 2;

/// Scale of the per-topic offset applied to the shared canonical anchor.
/// Small values keep canonical caption centers in one tight bundle.
pub const HEAD_SPREAD: f64 = 0.35;

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    /// Number of topics T.
    pub topics: usize,
    /// Caption modes per topic M (mode 0 is canonical).
    pub modes_per_topic: usize,
    /// Raw image vector dimension.
    pub image_dim: usize,
    /// Raw caption vector dimension.
    pub caption_dim: usize,
    /// Noise magnitude σ: per-dimension standard deviation is σ/√dim, so
    /// the expected noise norm is σ regardless of dimension.
    pub noise_sigma: f64,
    /// Probability ρ that an item's caption comes from a non-canonical mode
    /// of its topic.
    pub false_negative_knob: f64,
    /// Number of paired items N in the training corpus.
    pub corpus_size: usize,
    /// Root seed for all generator streams.
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            topics: 16,
            modes_per_topic: 4,
            image_dim: 32,
            caption_dim: 32,
            noise_sigma: 1.0,
            false_negative_knob: 0.3,
            corpus_size: 50_000,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(ModeError::Config(format!(
                "need at least 2 topics, got {}",
                self.topics
            )));
        }
        if self.modes_per_topic == 0 {
            return Err(ModeError::Config("modes_per_topic must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.false_negative_knob)
            || !self.false_negative_knob.is_finite()
        {
            return Err(ModeError::Config(format!(
                "false_negative_knob must lie in [0, 1], got {}",
                self.false_negative_knob
            )));
        }
        if self.false_negative_knob > 0.0 && self.modes_per_topic < 2 {
            return Err(ModeError::Config(
                "false_negative_knob > 0 requires at least 2 caption modes".into(),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(ModeError::Config(format!(
                "noise_sigma must be finite and positive, got {}",
                self.noise_sigma
            )));
        }
        if self.image_dim == 0 || self.caption_dim == 0 {
            return Err(ModeError::Config("vector dimensions must be positive".into()));
        }
        if self.corpus_size == 0 {
            return Err(ModeError::Config("corpus_size must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth centers the generator samples around.
#[derive(Clone, Debug)]
pub struct CorpusCenters {
    /// T unit rows, one image center per topic.
    pub image_topics: EmbeddingMatrix,
    /// T·M unit rows; row `t·M + m` is caption mode m of topic t.
    pub caption_modes: EmbeddingMatrix,
}

fn random_unit_row<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return row.iter().map(|v| v / norm).collect();
        }
    }
}

fn to_f32_unit(rows: &[Vec<f64>]) -> EmbeddingMatrix {
    let rows32: Vec<Vec<f32>> =
        rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();
    EmbeddingMatrix::from_rows(&rows32)
        .expect("generator rows are rectangular")
        .normalize_rows()
        .matrix
}

/// Sample the ground-truth centers for a spec (stream: seed/"centers"/0).
pub fn corpus_centers(spec: &SyntheticCorpusSpec) -> Result<CorpusCenters> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, "centers", 0);
    let (t_count, m_count) = (spec.topics, spec.modes_per_topic);

    let image_rows: Vec<Vec<f64>> =
        (0..t_count).map(|_| random_unit_row(&mut rng, spec.image_dim)).collect();

    // Shared anchor for the canonical-caption bundle.
    let anchor = random_unit_row(&mut rng, spec.caption_dim);
    let mut caption_rows: Vec<Vec<f64>> = Vec::with_capacity(t_count * m_count);
    for _ in 0..t_count {
        let offset = random_unit_row(&mut rng, spec.caption_dim);
        let head: Vec<f64> = anchor
            .iter()
            .zip(&offset)
            .map(|(&a, &g)| a + HEAD_SPREAD * g)
            .collect();
        let norm = head.iter().map(|v| v * v).sum::<f64>().sqrt();
        caption_rows.push(head.iter().map(|v| v / norm).collect());
        for _ in 1..m_count {
            caption_rows.push(random_unit_row(&mut rng, spec.caption_dim));
        }
    }

    Ok(CorpusCenters {
        image_topics: to_f32_unit(&image_rows).with_source(IMAGE_SOURCE),
        caption_modes: to_f32_unit(&caption_rows).with_source(CAPTION_SOURCE),
    })
}

/// One generated set of paired items with ground-truth labels.
#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub images: EmbeddingMatrix,
    pub captions: EmbeddingMatrix,
    /// Topic id per item.
    pub topics: Vec<u32>,
    /// Caption mode per item (0 = canonical).
    pub caption_modes: Vec<u32>,
    modes_per_topic: usize,
}

impl SyntheticSplit {
    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    /// Grid-cell label of each caption: `topic·M + mode`.
    pub fn caption_cells(&self) -> Vec<u32> {
        let m = self.modes_per_topic as u32;
        self.topics
            .iter()
            .zip(&self.caption_modes)
            .map(|(&t, &md)| t * m + md)
            .collect()
    }

    /// Grid-cell label a matching caption for each image would carry: the
    /// canonical mode of the image's topic, `topic·M + 0`.
    pub fn canonical_image_cells(&self) -> Vec<u32> {
        let m = self.modes_per_topic as u32;
        self.topics.iter().map(|&t| t * m).collect()
    }

    /// Keep only the given item indices (used to realize expert shards).
    pub fn select(&self, indices: &[usize]) -> SyntheticSplit {
        SyntheticSplit {
            images: self.images.gather(indices),
            captions: self.captions.gather(indices),
            topics: indices.iter().map(|&i| self.topics[i]).collect(),
            caption_modes: indices.iter().map(|&i| self.caption_modes[i]).collect(),
            modes_per_topic: self.modes_per_topic,
        }
    }
}

/// Draw `n` items (stream: seed/"items"/`split_index`). `sigma_scale`
/// inflates σ for distribution-shifted test splits; the topic/mode label
/// sequence is identical across scales because the draw count per item does
/// not depend on the scale.
pub fn generate_split(
    spec: &SyntheticCorpusSpec,
    centers: &CorpusCenters,
    n: usize,
    split_index: u64,
    sigma_scale: f64,
) -> Result<SyntheticSplit> {
    spec.validate()?;
    if n == 0 {
        return Err(ModeError::Config("split size must be positive".into()));
    }
    if !(sigma_scale.is_finite() && sigma_scale > 0.0) {
        return Err(ModeError::Config(format!(
            "sigma_scale must be finite and positive, got {sigma_scale}"
        )));
    }
    let mut rng = derive_rng(spec.seed, "items", split_index);
    let m_count = spec.modes_per_topic;
    let img_sd = spec.noise_sigma * sigma_scale / (spec.image_dim as f64).sqrt();
    let cap_sd = spec.noise_sigma * sigma_scale / (spec.caption_dim as f64).sqrt();

    let mut topics = Vec::with_capacity(n);
    let mut caption_modes = Vec::with_capacity(n);
    let mut image_rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut caption_rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen_range(0..spec.topics);
        let flip = rng.gen::<f64>() < spec.false_negative_knob;
        let mode = if flip { 1 + rng.gen_range(0..m_count - 1) } else { 0 };
        topics.push(t as u32);
        caption_modes.push(mode as u32);

        let ic = centers.image_topics.row(t);
        image_rows.push(
            ic.iter().map(|&c| (c as f64 + gauss(&mut rng) * img_sd) as f32).collect(),
        );
        let cc = centers.caption_modes.row(t * m_count + mode);
        caption_rows.push(
            cc.iter().map(|&c| (c as f64 + gauss(&mut rng) * cap_sd) as f32).collect(),
        );
    }

    let images = EmbeddingMatrix::from_rows(&image_rows)?
        .normalize_rows()
        .matrix
        .with_source(IMAGE_SOURCE);
    let captions = EmbeddingMatrix::from_rows(&caption_rows)?
        .normalize_rows()
        .matrix
        .with_source(CAPTION_SOURCE);
    Ok(SyntheticSplit { images, captions, topics, caption_modes, modes_per_topic: m_count })
}

/// Full corpus bundle: ground-truth centers, the training split, and
/// class metadata (the canonical caption center of each topic, which is the
/// synthetic stand-in for an embedded class name).
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub centers: CorpusCenters,
    pub train: SyntheticSplit,
    /// T rows in caption space, one per topic (mode-0 centers).
    pub class_metadata: EmbeddingMatrix,
}

/// Split index used for the training corpus.
pub const TRAIN_SPLIT: u64 = 0;
/// Split index used for held-out evaluation items.
pub const EVAL_SPLIT: u64 = 1;
/// Split index used for the σ-inflated distribution-shifted items.
pub const SHIFTED_SPLIT: u64 = 2;

/// Generate the training corpus and its metadata deterministically.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    let centers = corpus_centers(spec)?;
    let train = generate_split(spec, &centers, spec.corpus_size, TRAIN_SPLIT, 1.0)?;
    let class_metadata = class_metadata_from(&centers, spec);
    Ok(SyntheticCorpus { spec: spec.clone(), centers, train, class_metadata })
}

/// Extract the per-topic canonical caption centers as class metadata.
pub fn class_metadata_from(
    centers: &CorpusCenters,
    spec: &SyntheticCorpusSpec,
) -> EmbeddingMatrix {
    let heads: Vec<usize> = (0..spec.topics).map(|t| t * spec.modes_per_topic).collect();
    centers.caption_modes.gather(&heads).with_source(CAPTION_SOURCE)
}
