//! End-to-end orchestration: declarative run configs, content-addressed
//! artifacts with a manifest, resumable stages, priority-ordered expert
//! training, retrieval-enhanced expert selection, and evaluation.
//!
//! Every stage writes its outputs under the run directory and records their
//! digests in `manifest.json`. Rerunning a completed stage under an
//! unchanged configuration is a no-op; changing the configuration makes
//! dependent artifacts stale, and evaluation refuses to run on stale or
//! tampered artifacts.

use crate::clustering::{two_step_cluster, ClusterModel, TwoStepConfig};
use crate::embed::EmbeddingMatrix;
use crate::error::ModeError;
use crate::eval::{
    hex_string, records_from_jsonl, records_to_jsonl, render_summary, run_matrix,
    zero_shot_with_weights, Arm, ArmKind, EvalRecord, HarnessConfig,
    ProbeConfig, RetrievalOutcome, RouteOptions,
};
use crate::kernels::nearest_center;
use crate::router::{build_routing_plan, RoutingWeights, TaskKind, TaskMetadata};
use crate::synth::{
    class_metadata_from, corpus_centers, generate_corpus, generate_split,
    SyntheticCorpusSpec, CAPTION_SOURCE, EVAL_SPLIT, IMAGE_SOURCE,
};
use crate::trainer::{specialize_expert, train_seed, DataExpert, TrainConfig};
use crate::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// File locations. `out_dir` receives every artifact; the optional entries
/// point at externally produced embedding files for `ingest`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub images: Option<PathBuf>,
    pub captions: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { out_dir: PathBuf::from("mode-run"), images: None, captions: None }
    }
}

/// Clustering stage parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    /// Fine cluster count.
    pub m: usize,
    /// Coarse cluster (expert) count.
    pub n: usize,
    /// Captions sampled for fitting; 0 fits on the full corpus.
    pub sample_size: usize,
    pub max_iters: usize,
    pub fine_slack: f64,
    pub coarse_slack: f64,
    pub tol: f64,
    pub weight_coarse_by_population: bool,
    /// Clustering seed; defaults to the corpus seed.
    pub seed: Option<u64>,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let base = TwoStepConfig::new(64, 2);
        ClusteringSection {
            m: 64,
            n: 2,
            sample_size: 10_000,
            max_iters: base.max_iters,
            fine_slack: base.fine_slack,
            coarse_slack: base.coarse_slack,
            tol: base.tol,
            weight_coarse_by_population: base.weight_coarse_by_population,
            seed: None,
        }
    }
}

/// Evaluation stage parameters (the ablation matrix plus cutoffs).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub eval_size: usize,
    pub ks: Vec<usize>,
    pub probe: Option<ProbeConfig>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            arms: vec![Arm::new(ArmKind::Mode, 2), Arm::new(ArmKind::Full, 1)],
            seeds: vec![0, 1, 2, 3, 4],
            eval_size: 2000,
            ks: vec![1, 5],
            probe: None,
        }
    }
}

/// The full declarative run configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub corpus: SyntheticCorpusSpec,
    pub clustering: ClusteringSection,
    pub training: TrainConfig,
    pub routing: RouteOptions,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| ModeError::Config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            ModeError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.training.validate()?;
        let c = &self.clustering;
        if c.n < 1 || c.m < c.n {
            return Err(ModeError::Config(format!(
                "need m >= n >= 1, got m={} n={}",
                c.m, c.n
            )));
        }
        let mut seeds = self.evaluation.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.evaluation.seeds.len() {
            return Err(ModeError::Config("evaluation seeds must be distinct".into()));
        }
        for p in [&self.paths.images, &self.paths.captions].into_iter().flatten() {
            if !p.exists() {
                return Err(ModeError::Config(format!(
                    "referenced file does not exist: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Hex digest of the resolved configuration (field order is fixed).
    /// Paths are excluded: where artifacts live must not change what they
    /// are. External input content is tracked by the manifest instead.
    pub fn digest(&self) -> String {
        let semantic = (
            &self.corpus,
            &self.clustering,
            &self.training,
            &self.routing,
            &self.evaluation,
        );
        let bytes = serde_json::to_vec(&semantic).expect("run config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        hex_string(&h.finalize())
    }

    fn two_step_config(&self) -> TwoStepConfig {
        let c = &self.clustering;
        TwoStepConfig {
            max_iters: c.max_iters,
            fine_slack: c.fine_slack,
            coarse_slack: c.coarse_slack,
            tol: c.tol,
            weight_coarse_by_population: c.weight_coarse_by_population,
            seed: c.seed.unwrap_or(self.corpus.seed),
            ..TwoStepConfig::new(c.m, c.n)
        }
    }

    fn harness_config(&self) -> HarnessConfig {
        HarnessConfig {
            corpus: self.corpus.clone(),
            train: self.training.clone(),
            m: self.clustering.m,
            arms: self.evaluation.arms.clone(),
            seeds: self.evaluation.seeds.clone(),
            eval_size: self.evaluation.eval_size,
            ks: self.evaluation.ks.clone(),
            route: self.routing,
            cluster_sample_size: self.clustering.sample_size,
            probe: self.evaluation.probe,
        }
    }
}

/// Record of everything a run has produced so far.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunManifest {
    /// Digest of the configuration the artifacts were built under.
    pub config_digest: String,
    /// Resolved configuration (defaults included) for audit.
    pub config: serde_json::Value,
    /// Relative artifact path → content digest.
    pub artifacts: BTreeMap<String, String>,
    /// Stage → unix seconds of last (re)build.
    pub timestamps: BTreeMap<String, String>,
    /// Conditions in the order their experts were trained.
    pub expert_order: Vec<u32>,
    /// Reserved: overlapping fine-cluster groupings are not implemented.
    pub overlapping_groups: Option<serde_json::Value>,
}

/// Content digest of a file on disk.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex_string(&h.finalize()))
}

/// What a stage did, with any warnings to surface.
#[derive(Clone, Debug, Default)]
pub struct StageOutcome {
    pub skipped: bool,
    pub messages: Vec<String>,
}

impl StageOutcome {
    fn fresh() -> Self {
        StageOutcome::default()
    }

    fn skipped() -> Self {
        StageOutcome { skipped: true, messages: vec!["up to date; skipped".into()] }
    }

    fn note(&mut self, msg: impl Into<String>) {
        self.messages.push(msg.into());
    }
}

/// Expert training order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainOrder {
    /// Descending cluster diversity (widest-ranging condition first).
    Priority,
    /// Every condition, in priority order.
    All,
    /// Exactly these conditions, in this order.
    Explicit(Vec<u32>),
}

impl TrainOrder {
    pub fn parse(text: &str) -> Result<TrainOrder> {
        match text {
            "priority" => Ok(TrainOrder::Priority),
            "all" => Ok(TrainOrder::All),
            list => {
                let ids: std::result::Result<Vec<u32>, _> =
                    list.split(',').map(|t| t.trim().parse::<u32>()).collect();
                let ids = ids.map_err(|_| {
                    ModeError::Config(format!(
                        "training order must be 'priority', 'all', or a comma-separated \
                         condition list, got '{text}'"
                    ))
                })?;
                if ids.is_empty() {
                    return Err(ModeError::Config("empty explicit training order".into()));
                }
                Ok(TrainOrder::Explicit(ids))
            }
        }
    }
}

/// A run directory with its configuration and manifest.
pub struct Pipeline {
    cfg: RunConfig,
    manifest: RunManifest,
}

impl Pipeline {
    /// Open (or initialize) the run directory for a configuration.
    pub fn open(cfg: RunConfig) -> Result<Pipeline> {
        cfg.validate()?;
        fs::create_dir_all(cfg.paths.out_dir.join("corpus"))?;
        fs::create_dir_all(cfg.paths.out_dir.join("cluster"))?;
        fs::create_dir_all(cfg.paths.out_dir.join("checkpoints"))?;
        fs::create_dir_all(cfg.paths.out_dir.join("reports"))?;
        let manifest_path = cfg.paths.out_dir.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path)?;
            serde_json::from_str(&text).map_err(|e| {
                ModeError::Config(format!(
                    "corrupt manifest {}: {e}",
                    manifest_path.display()
                ))
            })?
        } else {
            RunManifest::default()
        };
        Ok(Pipeline { cfg, manifest })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(rel)
    }

    fn expert_rel(c: u32) -> String {
        format!("checkpoints/expert_{c:04}.modx")
    }

    fn save_manifest(&self) -> Result<()> {
        let text =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(self.out("manifest.json"), text)?;
        Ok(())
    }

    /// True when every listed artifact exists, was recorded under the
    /// current configuration, and still matches its recorded digest.
    fn stage_done(&self, rels: &[&str]) -> bool {
        if self.manifest.config_digest != self.cfg.digest() {
            return false;
        }
        rels.iter().all(|rel| {
            let path = self.out(rel);
            match (self.manifest.artifacts.get(*rel), path.exists()) {
                (Some(recorded), true) => {
                    file_digest(&path).map(|d| &d == recorded).unwrap_or(false)
                }
                _ => false,
            }
        })
    }

    /// Record freshly written artifacts and stamp the stage.
    fn record(&mut self, stage: &str, rels: &[&str]) -> Result<()> {
        let digest = self.cfg.digest();
        if self.manifest.config_digest != digest {
            // First stage to run under a changed configuration claims the
            // manifest; older artifact records stay for digest comparison
            // but no longer satisfy `stage_done`.
            self.manifest.config_digest = digest;
            self.manifest.config =
                serde_json::to_value(&self.cfg).expect("run config serializes");
        }
        for rel in rels {
            let d = file_digest(&self.out(rel))?;
            self.manifest.artifacts.insert((*rel).to_string(), d);
        }
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_else(|_| "0".into());
        self.manifest.timestamps.insert(stage.to_string(), now);
        self.save_manifest()
    }

    /// Verify required artifacts exist and match the manifest; the error
    /// names every missing file, and any digest drift refuses the run.
    fn require_fresh(&self, rels: &[&str]) -> Result<()> {
        let missing: Vec<PathBuf> = rels
            .iter()
            .map(|rel| self.out(rel))
            .filter(|p| !p.exists())
            .collect();
        if !missing.is_empty() {
            return Err(ModeError::MissingArtifacts(missing));
        }
        let current = self.cfg.digest();
        if self.manifest.config_digest != current {
            return Err(ModeError::DigestMismatch {
                path: self.out("manifest.json"),
                expected: current,
                actual: self.manifest.config_digest.clone(),
            });
        }
        for rel in rels {
            let path = self.out(rel);
            let actual = file_digest(&path)?;
            let expected = self.manifest.artifacts.get(*rel).cloned().unwrap_or_default();
            if expected != actual {
                return Err(ModeError::DigestMismatch { path, expected, actual });
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Stages
    // ------------------------------------------------------------------

    const CORPUS_FILES: [&'static str; 4] = [
        "corpus/images.mode",
        "corpus/captions.mode",
        "corpus/class_metadata.mode",
        "corpus/labels.json",
    ];

    /// Generate the synthetic corpus and write its canonical files.
    pub fn gen_corpus(&mut self) -> Result<StageOutcome> {
        if self.stage_done(&Self::CORPUS_FILES) {
            return Ok(StageOutcome::skipped());
        }
        let mut outcome = StageOutcome::fresh();
        let corpus = generate_corpus(&self.cfg.corpus)?;
        corpus.train.images.write_file(&self.out("corpus/images.mode"))?;
        corpus.train.captions.write_file(&self.out("corpus/captions.mode"))?;
        corpus.class_metadata.write_file(&self.out("corpus/class_metadata.mode"))?;
        let labels = serde_json::json!({
            "topics": corpus.train.topics,
            "caption_modes": corpus.train.caption_modes,
            "modes_per_topic": self.cfg.corpus.modes_per_topic,
        });
        fs::write(
            self.out("corpus/labels.json"),
            serde_json::to_string(&labels).expect("labels serialize"),
        )?;
        self.record("gen-corpus", &Self::CORPUS_FILES)?;
        outcome.note(format!(
            "generated {} pairs across {} topics",
            corpus.train.len(),
            self.cfg.corpus.topics
        ));
        Ok(outcome)
    }

    /// Validate externally supplied embedding files and write canonical
    /// normalized copies into the run directory.
    pub fn ingest(&mut self) -> Result<StageOutcome> {
        let (img_src, cap_src) = match (&self.cfg.paths.images, &self.cfg.paths.captions) {
            (Some(i), Some(c)) => (i.clone(), c.clone()),
            _ => {
                return Err(ModeError::Config(
                    "ingest needs paths.images and paths.captions; for synthetic \
                     corpora use gen-corpus instead"
                        .into(),
                ))
            }
        };
        let rels = ["corpus/images.mode", "corpus/captions.mode"];
        // Source files sit outside the config digest, so their content is
        // pinned here: a swapped source must rerun the stage.
        let sources_unchanged = [("external:images", &img_src), ("external:captions", &cap_src)]
            .iter()
            .all(|(key, path)| {
                matches!(
                    (self.manifest.artifacts.get(*key), file_digest(path)),
                    (Some(recorded), Ok(actual)) if *recorded == actual
                )
            });
        if sources_unchanged && self.stage_done(&rels) {
            return Ok(StageOutcome::skipped());
        }
        let mut outcome = StageOutcome::fresh();
        let images = EmbeddingMatrix::read_file(&img_src)?;
        let captions = EmbeddingMatrix::read_file(&cap_src)?;
        if images.rows() != captions.rows() {
            return Err(ModeError::ShapeMismatch {
                context: "paired corpus".into(),
                left: format!("{} images", images.rows()),
                right: format!("{} captions", captions.rows()),
            });
        }
        if images.rows() == 0 {
            return Err(ModeError::Config("ingested corpus is empty".into()));
        }
        let canonical = |matrix: EmbeddingMatrix,
                             default_source: u8,
                             rel: &str,
                             outcome: &mut StageOutcome|
         -> Result<()> {
            if !matrix.all_finite() {
                return Err(ModeError::NonFinite { context: format!("ingest {rel}") });
            }
            let mut m = matrix;
            if !m.is_unit_normalized() {
                let normalized = m.normalize_rows();
                if !normalized.zero_rows.is_empty() {
                    outcome.note(format!(
                        "{rel}: {} zero rows replaced by a basis vector",
                        normalized.zero_rows.len()
                    ));
                }
                outcome.note(format!("{rel}: rows normalized to unit length"));
                m = normalized.matrix;
            }
            if m.source() == 0 {
                m = m.with_source(default_source);
            }
            m.write_file(&self.out(rel))?;
            Ok(())
        };
        canonical(images, IMAGE_SOURCE, "corpus/images.mode", &mut outcome)?;
        canonical(captions, CAPTION_SOURCE, "corpus/captions.mode", &mut outcome)?;
        self.manifest
            .artifacts
            .insert("external:images".into(), file_digest(&img_src)?);
        self.manifest
            .artifacts
            .insert("external:captions".into(), file_digest(&cap_src)?);
        self.record("ingest", &rels)?;
        outcome.note("ingested corpus files");
        Ok(outcome)
    }

    const CLUSTER_FILES: [&'static str; 2] = ["cluster/model.modc", "cluster/assignments.json"];

    /// Fit the two-step cluster structure on (a sample of) the captions and
    /// assign the full corpus.
    pub fn cluster(&mut self) -> Result<StageOutcome> {
        let captions_path = self.out("corpus/captions.mode");
        if !captions_path.exists() {
            return Err(ModeError::MissingArtifacts(vec![captions_path]));
        }
        if self.stage_done(&Self::CLUSTER_FILES) {
            let mut outcome = StageOutcome::skipped();
            if self.cfg.clustering.m == self.cfg.clustering.n {
                outcome.note("note: m == n is the one-step clustering configuration");
            }
            return Ok(outcome);
        }
        let mut outcome = StageOutcome::fresh();
        if self.cfg.clustering.m == self.cfg.clustering.n {
            outcome.note("note: m == n is the one-step clustering configuration");
        }
        let captions = EmbeddingMatrix::read_file(&captions_path)?;
        let sample_size = self.cfg.clustering.sample_size;
        let sample = if sample_size == 0 || sample_size >= captions.rows() {
            outcome.note(format!("fitting on the full corpus ({} captions)", captions.rows()));
            captions.clone()
        } else {
            let mut rng = crate::stream::derive_rng(
                self.cfg.clustering.seed.unwrap_or(self.cfg.corpus.seed),
                "cluster-sample",
                0,
            );
            let picks = rand::seq::index::sample(&mut rng, captions.rows(), sample_size);
            let mut idx: Vec<usize> = picks.iter().collect();
            idx.sort_unstable();
            outcome.note(format!("fitting on a sample of {sample_size} captions"));
            captions.gather(&idx)
        };
        let fit = two_step_cluster(&sample, &self.cfg.two_step_config())?;
        let assignment = fit.model.assign_corpus(&captions)?;
        let model = fit.model.with_fine_counts(assignment.fine_counts.clone())?;
        model.write_file(&self.out("cluster/model.modc"))?;
        let table = serde_json::json!({
            "fine_ids": assignment.fine_ids,
            "coarse_ids": assignment.coarse_ids,
            "fine_counts": assignment.fine_counts,
            "coarse_counts": assignment.coarse_counts,
        });
        fs::write(
            self.out("cluster/assignments.json"),
            serde_json::to_string(&table).expect("assignments serialize"),
        )?;
        for (c, count) in assignment.coarse_counts.iter().enumerate() {
            outcome.note(format!("shard {c}: {count} items"));
        }
        self.record("cluster", &Self::CLUSTER_FILES)?;
        Ok(outcome)
    }

    fn load_corpus_pair(&self) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        let img_path = self.out("corpus/images.mode");
        let cap_path = self.out("corpus/captions.mode");
        let missing: Vec<PathBuf> = [&img_path, &cap_path]
            .into_iter()
            .filter(|p| !p.exists())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ModeError::MissingArtifacts(missing));
        }
        Ok((EmbeddingMatrix::read_file(&img_path)?, EmbeddingMatrix::read_file(&cap_path)?))
    }

    /// Train the shared seed model on the full corpus.
    pub fn train_seed_stage(&mut self) -> Result<StageOutcome> {
        let rels = ["checkpoints/seed.modx"];
        if self.stage_done(&rels) {
            return Ok(StageOutcome::skipped());
        }
        let mut outcome = StageOutcome::fresh();
        let (images, captions) = self.load_corpus_pair()?;
        let seed = train_seed(&images, &captions, &self.cfg.training)?;
        seed.write_file(&self.out("checkpoints/seed.modx"))?;
        self.record("train-seed", &rels)?;
        outcome.note(format!("seed model trained for {} steps", seed.steps_trained));
        Ok(outcome)
    }

    fn load_cluster_model(&self) -> Result<ClusterModel> {
        let path = self.out("cluster/model.modc");
        if !path.exists() {
            return Err(ModeError::MissingArtifacts(vec![path]));
        }
        ClusterModel::read_file(&path)
    }

    /// Train experts in the given order, branching each from the seed model
    /// (auto-trained when absent). Already-fresh checkpoints are skipped, so
    /// partial systems grow incrementally.
    pub fn train_experts(&mut self, order: &TrainOrder) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::fresh();
        let model = self.load_cluster_model()?;
        let n = model.n() as u32;
        let ids: Vec<u32> = match order {
            TrainOrder::Priority | TrainOrder::All => model.priority_order(),
            TrainOrder::Explicit(ids) => {
                let mut seen = vec![false; n as usize];
                for &c in ids {
                    if c >= n {
                        return Err(ModeError::Config(format!(
                            "condition {c} out of range; the model has {n} conditions"
                        )));
                    }
                    if std::mem::replace(&mut seen[c as usize], true) {
                        return Err(ModeError::Config(format!(
                            "condition {c} listed twice in the training order"
                        )));
                    }
                }
                ids.clone()
            }
        };

        if !self.stage_done(&["checkpoints/seed.modx"]) {
            let seed_outcome = self.train_seed_stage()?;
            if !seed_outcome.skipped {
                outcome.note("seed model was missing; trained it first");
            }
        }
        let seed = DataExpert::read_file(&self.out("checkpoints/seed.modx"))?;
        let (images, captions) = self.load_corpus_pair()?;
        let assignment = model.assign_corpus(&captions)?;

        let mut trained = Vec::new();
        for &c in &ids {
            let rel = Self::expert_rel(c);
            if self.stage_done(&[&rel]) {
                outcome.note(format!("expert {c}: up to date; skipped"));
                continue;
            }
            let idx = assignment.shard_indices(c);
            let shard_images = images.gather(&idx);
            let shard_captions = captions.gather(&idx);
            let expert = specialize_expert(
                &seed,
                &shard_images,
                &shard_captions,
                c,
                model.fine_members(c),
                &self.cfg.training,
            )?;
            expert.write_file(&self.out(&rel))?;
            self.record("train-experts", &[&rel])?;
            if !self.manifest.expert_order.contains(&c) {
                self.manifest.expert_order.push(c);
                self.save_manifest()?;
            }
            outcome.note(format!("expert {c}: trained on {} items", idx.len()));
            trained.push(c);
        }
        if trained.is_empty() {
            outcome.skipped = true;
        }
        Ok(outcome)
    }

    /// Rank conditions by how many metadata rows route into them: each row's
    /// nearest fine center votes for the condition that owns it. Ties rank
    /// the lower condition id first.
    pub fn select_expert(
        &self,
        metadata: &EmbeddingMatrix,
    ) -> Result<Vec<(u32, usize)>> {
        if metadata.rows() == 0 {
            return Err(ModeError::EmptyMetadata);
        }
        let model = self.load_cluster_model()?;
        if metadata.dim() != model.dim() {
            return Err(ModeError::DimensionMismatch {
                context: "selection metadata vs fine centers".into(),
                left: metadata.dim(),
                right: model.dim(),
            });
        }
        let (ms, cs) = (metadata.source(), model.source());
        if ms != 0 && cs != 0 && ms != cs && !self.cfg.routing.allow_source_mismatch {
            return Err(ModeError::SourceMismatch { metadata: ms, centers: cs });
        }
        let (fine_ids, _) = nearest_center(metadata, model.fine_centers())?;
        let mut hits = vec![0usize; model.n()];
        for &s in &fine_ids {
            hits[model.fine_to_coarse()[s as usize] as usize] += 1;
        }
        let mut ranked: Vec<(u32, usize)> = hits
            .into_iter()
            .enumerate()
            .filter_map(|(c, h)| (h > 0).then_some((c as u32, h)))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked)
    }

    fn available_experts(&self, n: u32) -> Vec<u32> {
        (0..n)
            .filter(|&c| self.out(&Self::expert_rel(c)).exists())
            .collect()
    }

    /// Evaluate the trained system (renormalizing over however many experts
    /// exist) and then run the configured ablation matrix. Refuses to run on
    /// missing or stale artifacts.
    pub fn evaluate(&mut self) -> Result<StageOutcome> {
        let mut outcome = StageOutcome::fresh();
        let model = self.load_cluster_model()?;
        let n = model.n() as u32;
        let available = self.available_experts(n);
        let mut required: Vec<String> =
            vec!["cluster/model.modc".into(), "checkpoints/seed.modx".into()];
        if available.is_empty() {
            // Name the first expert checkpoint so the error is actionable.
            required.push(Self::expert_rel(0));
        }
        required.extend(available.iter().map(|&c| Self::expert_rel(c)));
        let required_refs: Vec<&str> = required.iter().map(String::as_str).collect();
        self.require_fresh(&required_refs)?;
        // Inputs verified fresh; identical configs rebuild identical
        // records, so a digest-matching report set can be kept as-is.
        if self.stage_done(&["reports/records.jsonl", "reports/summary.txt"]) {
            return Ok(StageOutcome::skipped());
        }

        let mut records = self.evaluate_primary(&model, &available, &mut outcome)?;
        if !self.cfg.evaluation.arms.is_empty() {
            let harness = self.cfg.harness_config();
            outcome.note(format!(
                "running ablation matrix: {} arms x {} seeds",
                harness.arms.len(),
                harness.seeds.len()
            ));
            records.extend(run_matrix(&harness)?);
        }
        fs::write(self.out("reports/records.jsonl"), records_to_jsonl(&records))?;
        fs::write(self.out("reports/summary.txt"), render_summary(&records))?;
        self.record("evaluate", &["reports/records.jsonl", "reports/summary.txt"])?;
        outcome.note(format!("{} records written", records.len()));
        Ok(outcome)
    }

    /// Evaluate the run's own checkpoints on a regenerated held-out split.
    fn evaluate_primary(
        &self,
        model: &ClusterModel,
        available: &[u32],
        outcome: &mut StageOutcome,
    ) -> Result<Vec<EvalRecord>> {
        let spec = &self.cfg.corpus;
        let centers = corpus_centers(spec)?;
        let eval = generate_split(
            spec,
            &centers,
            self.cfg.evaluation.eval_size,
            EVAL_SPLIT,
            1.0,
        )?;
        let class_metadata = class_metadata_from(&centers, spec);

        let mut experts = Vec::new();
        for &c in available {
            let mut e = DataExpert::read_file(&self.out(&Self::expert_rel(c)))?;
            // Checkpoints do not persist the fine set; rehydrate it.
            e.fine_set = model.fine_members(c);
            experts.push(e);
        }
        let expert_refs: Vec<&DataExpert> = experts.iter().collect();
        let n = model.n();
        let partial = available.len() < n;
        if partial {
            outcome.note(format!(
                "partial system: {} of {n} experts; weights renormalized",
                available.len()
            ));
        }
        let digest = self.cfg.digest();
        let weights_for = |kind: TaskKind, embeddings: &EmbeddingMatrix| -> Result<RoutingWeights> {
            let meta =
                TaskMetadata { kind, embeddings: embeddings.clone(), labels: None };
            let r = self.cfg.routing;
            let plan =
                build_routing_plan(&meta, model, r.lambda, r.apply_heuristics, r.allow_source_mismatch)?;
            if partial {
                plan.weights.renormalize_over_available(available)
            } else {
                Ok(plan.weights)
            }
        };

        let mut reports = Vec::new();
        let classify = zero_shot_with_weights(
            &eval.images,
            &eval.topics,
            &class_metadata,
            &expert_refs,
            &weights_for(TaskKind::Classification, &class_metadata)?,
            &digest,
        )?;
        reports.push(classify.report);
        let retrieval = crate::eval::retrieval_with_weights(
            &eval.images,
            &eval.captions,
            &expert_refs,
            &weights_for(TaskKind::TextRetrieval, &eval.captions)?,
            &weights_for(TaskKind::ImageRetrieval, &eval.captions)?,
            &self.cfg.evaluation.ks,
            &digest,
        )?;
        for (requested, used) in &retrieval.clipped {
            outcome.note(format!("recall cutoff {requested} clipped to corpus size {used}"));
        }
        let RetrievalOutcome { reports: rr, .. } = retrieval;
        reports.extend(rr);
        Ok(reports
            .into_iter()
            .map(|report| EvalRecord {
                arm: "primary".into(),
                seed: self.cfg.corpus.seed,
                report,
            })
            .collect())
    }

    /// Render the stored records as the summary table.
    pub fn report(&self) -> Result<String> {
        let path = self.out("reports/records.jsonl");
        if !path.exists() {
            return Err(ModeError::MissingArtifacts(vec![path]));
        }
        let text = fs::read_to_string(&path)?;
        let records = records_from_jsonl(&text)?;
        Ok(render_summary(&records))
    }
}
