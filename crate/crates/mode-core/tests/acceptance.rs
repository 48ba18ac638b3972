//! Shipping gate: one test per acceptance criterion, each printing a
//! `criterion NN (...): PASS` line on success.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! Criteria 7–9 share one ablation-matrix run (trained once, cached).

use mode_core::clustering::{
    kmeans_fit, two_step_cluster, InitMethod, KMeansConfig, TwoStepConfig,
};
use mode_core::embed::EmbeddingMatrix;
use mode_core::eval::{
    batch_false_negative_rate, run_matrix, Arm, ArmKind, EvalRecord, HarnessConfig,
    ProbeConfig,
};
use mode_core::kernels::{softmax, sq_dist, Mat64};
use mode_core::nn::{TowerParams, TowerShape};
use mode_core::pipeline::{
    ClusteringSection, EvaluationSection, PathsConfig, Pipeline, RunConfig, TrainOrder,
};
use mode_core::router::{
    adjust_for_class_count, ensemble_outputs, max_filter, route_classification,
    route_image_retrieval, similarity_matrix, ClassCountAdjustment, RoutingWeights,
};
use mode_core::stream::{derive_rng, gauss};
use mode_core::synth::{generate_corpus, SyntheticCorpusSpec};
use mode_core::trainer::{contrastive_loss, DataExpert, TrainConfig};
use mode_core::ModeError;
use rand::Rng;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

// ---------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------

fn gaussian_matrix(seed: u64, index: u64, rows: usize, dim: usize) -> EmbeddingMatrix {
    let mut rng = derive_rng(seed, "acceptance", index);
    let data: Vec<Vec<f32>> = (0..rows)
        .map(|_| (0..dim).map(|_| gauss(&mut rng) as f32).collect())
        .collect();
    EmbeddingMatrix::from_rows(&data).unwrap()
}

fn unit_matrix(seed: u64, index: u64, rows: usize, dim: usize) -> EmbeddingMatrix {
    gaussian_matrix(seed, index, rows, dim).normalize_rows().matrix
}

/// One-sided paired sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let mut tail = 0u64;
    for i in wins..=trials {
        let mut c = 1u64;
        for j in 0..i {
            c = c * (trials - j) as u64 / (j + 1) as u64;
        }
        tail += c;
    }
    tail as f64 / 2f64.powi(trials as i32)
}

fn per_seed_values(records: &[EvalRecord], arm: &str, task: &str) -> Vec<(u64, f64)> {
    let mut vals: Vec<(u64, f64)> = records
        .iter()
        .filter(|r| r.arm == arm && r.report.task == task && r.report.k.unwrap_or(1) == 1)
        .map(|r| (r.seed, r.report.value))
        .collect();
    vals.sort_by_key(|&(s, _)| s);
    vals
}

fn mean_for(records: &[EvalRecord], arm: &str, task: &str) -> f64 {
    let vals = per_seed_values(records, arm, task);
    assert!(!vals.is_empty(), "no records for arm {arm} task {task}");
    vals.iter().map(|&(_, v)| v).sum::<f64>() / vals.len() as f64
}

/// The shared five-seed ablation matrix behind criteria 7–9.
fn ablation_matrix() -> &'static (Vec<EvalRecord>, Duration) {
    static MATRIX: OnceLock<(Vec<EvalRecord>, Duration)> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let cfg = HarnessConfig {
            corpus: SyntheticCorpusSpec::default(),
            train: TrainConfig::default(),
            m: 64,
            arms: vec![
                Arm::new(ArmKind::Mode, 2),
                Arm::new(ArmKind::Mode, 4),
                Arm::new(ArmKind::Full, 1),
                Arm::new(ArmKind::Full, 2),
                Arm::new(ArmKind::Random, 2),
                Arm::new(ArmKind::OneStep, 2),
                Arm::new(ArmKind::CoarseCluster, 2),
            ],
            seeds: vec![0, 1, 2, 3, 4],
            eval_size: 2000,
            ks: vec![1, 5],
            route: Default::default(),
            cluster_sample_size: 10_000,
            probe: Some(ProbeConfig::default()),
        };
        let start = Instant::now();
        let records = run_matrix(&cfg).expect("ablation matrix runs");
        (records, start.elapsed())
    })
}

// ---------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------

#[test]
fn criterion_01_kmeans_matches_bruteforce_scan_with_monotone_objective() {
    let start = Instant::now();
    for i in 0..30u64 {
        let mut rng = derive_rng(101, "acceptance-c1", i);
        let k = 1 + rng.gen_range(0..5usize);
        let n = (k + 5 + rng.gen_range(0..180usize)).min(200);
        let d = 2 + rng.gen_range(0..7usize);
        let data = gaussian_matrix(101, 1000 + i, n, d);
        let cfg = KMeansConfig {
            k,
            max_iters: 30,
            balance_slack: 1e9, // non-binding: every capacity covers all points
            seed: i,
            init: InitMethod::KMeansPlusPlus,
            tol: 1e-9,
            spherical: false,
            record_iterations: true,
        };
        let fit = kmeans_fit(&data, &cfg).unwrap();
        assert!(!fit.iterations.is_empty());
        for snap in &fit.iterations {
            for p in 0..n {
                let mut best = 0u32;
                let mut best_d = f64::INFINITY;
                for c in 0..k {
                    let dist = sq_dist(data.row(p), snap.centers.row(c));
                    if dist < best_d {
                        best_d = dist;
                        best = c as u32;
                    }
                }
                assert_eq!(
                    snap.assignments[p], best,
                    "instance {i}: point {p} not assigned to its nearest center"
                );
            }
        }
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-7, "objective increased: {} -> {}", w[0], w[1]);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    println!("criterion 01 (k-means matches brute-force scan, monotone objective): PASS");
}

#[test]
fn criterion_02_balance_contract_exact_and_slack_bounded() {
    for i in 0..50u64 {
        let mut rng = derive_rng(102, "acceptance-c2", i);

        // Slack 0 with k dividing n: perfectly equal cluster sizes.
        let k = 2 + rng.gen_range(0..5usize);
        let q = 5 + rng.gen_range(0..36usize);
        let n = k * q;
        let d = 2 + rng.gen_range(0..7usize);
        let data = gaussian_matrix(102, 1000 + i, n, d);
        let cfg = KMeansConfig {
            k,
            max_iters: 20,
            balance_slack: 0.0,
            seed: i,
            init: InitMethod::KMeansPlusPlus,
            tol: 1e-9,
            spherical: false,
            record_iterations: false,
        };
        let fit = kmeans_fit(&data, &cfg).unwrap();
        let sizes = fit.cluster_sizes(k);
        assert!(sizes.iter().all(|&s| s == q), "instance {i}: sizes {sizes:?} != {q}");

        // Slack 0.1 on an arbitrary instance: max size within the bound.
        let k2 = 2 + rng.gen_range(0..5usize);
        let n2 = k2 + 20 + rng.gen_range(0..180usize);
        let data2 = gaussian_matrix(102, 2000 + i, n2, d);
        let fit2 = kmeans_fit(&data2, &KMeansConfig { k: k2, balance_slack: 0.1, ..cfg }).unwrap();
        let max_size = *fit2.cluster_sizes(k2).iter().max().unwrap();
        let bound = n2.div_ceil(k2) as f64 * 1.1;
        assert!(
            max_size as f64 <= bound + 1e-9,
            "instance {i}: max cluster size {max_size} exceeds {bound}"
        );
    }
    println!("criterion 02 (balance contract: exact at slack 0, bounded at slack 0.1): PASS");
}

#[test]
fn criterion_03_routing_algebra() {
    let mut rng = derive_rng(103, "acceptance-c3", 0);
    for trial in 0..20u64 {
        let m = 3 + rng.gen_range(0..12usize);
        let n = 1 + rng.gen_range(0..m.min(4));
        let rows = 1 + rng.gen_range(0..6usize);
        let d = 2 + rng.gen_range(0..6usize);
        let meta = unit_matrix(103, 100 + trial * 3, rows, d);
        let centers = unit_matrix(103, 101 + trial * 3, m, d);
        let mut map: Vec<u32> = (0..m as u32).map(|s| s % n as u32).collect();
        // Shuffle so conditions interleave.
        for s in (1..map.len()).rev() {
            map.swap(s, rng.gen_range(0..=s));
        }
        let a = similarity_matrix(&meta, &centers, 0.2).unwrap();

        // Weight vectors are distributions.
        let w = route_classification(&a, &map, n).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&v| v >= 0.0));
        let per_query = route_image_retrieval(&a, &map, n).unwrap();
        for r in 0..per_query.rows() {
            assert!((per_query.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        // Max filter: idempotent, exactly one nonzero per row.
        let filtered = max_filter(&a);
        let twice = max_filter(&filtered);
        assert_eq!(filtered.data(), twice.data(), "max_filter not idempotent");
        for r in 0..filtered.rows() {
            assert_eq!(filtered.row(r).iter().filter(|&&v| v != 0.0).count(), 1);
        }

        // Softmax shift invariance.
        let logits: Vec<f64> = (0..n).map(|_| 4.0 * gauss(&mut rng)).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
        let (s1, s2) = (softmax(&logits), softmax(&shifted));
        for (abit, bbit) in s1.iter().zip(&s2) {
            assert!((abit - bbit).abs() < 1e-9);
        }
    }

    // A single expert under weight 1 passes integer scores through bit-for-bit.
    let mut scores = Mat64::zeros(3, 4);
    for (i, v) in scores.data_mut().iter_mut().enumerate() {
        *v = (i as f64) - 5.0;
    }
    let out =
        ensemble_outputs(&[scores.clone()], &RoutingWeights::Shared(vec![1.0])).unwrap();
    assert_eq!(out.data(), scores.data(), "n=1 ensemble is not the identity");
    println!("criterion 03 (routing algebra: distributions, max filter, shift invariance, n=1 identity): PASS");
}

#[test]
fn criterion_04_class_count_adjustments_match_closed_forms() {
    match adjust_for_class_count(2) {
        ClassCountAdjustment::Soften { multiplier } => {
            let expected = (0.5 - 2f64.sqrt()).exp();
            assert!((multiplier - expected).abs() < 1e-12);
        }
        other => panic!("|L|=2 should soften, got {other:?}"),
    }
    assert_eq!(adjust_for_class_count(100), ClassCountAdjustment::Unadjusted);
    match adjust_for_class_count(1000) {
        ClassCountAdjustment::Sharpen { divisor } => {
            let expected = 1000f64.ln();
            assert!((divisor - expected).abs() < 1e-12);
            let adj = adjust_for_class_count(1000);
            assert!((adj.lambda_effective(0.2) - 0.2 / expected).abs() < 1e-15);
        }
        other => panic!("|L|=1000 should sharpen, got {other:?}"),
    }
    println!("criterion 04 (class-count heuristics match closed forms): PASS");
}

#[test]
fn criterion_05_analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let shape = TowerShape { image_dim: 6, caption_dim: 5, hidden_dim: 5, embed_dim: 4 };
    let step = 1e-4;
    for batch in 0..20u64 {
        let images = gaussian_matrix(105, batch * 2, 8, shape.image_dim);
        let captions = gaussian_matrix(105, batch * 2 + 1, 8, shape.caption_dim);
        let params =
            TowerParams::init(shape, 7000 + batch, (1.0f64 / 0.07).ln()).unwrap();
        let out = contrastive_loss(&images, &captions, &params).unwrap();
        let mut worst = 0.0f64;
        for i in 0..shape.param_len() {
            let mut plus = params.clone();
            plus.theta_mut()[i] += step;
            let lp = contrastive_loss(&images, &captions, &plus).unwrap().loss;
            let mut minus = params.clone();
            minus.theta_mut()[i] -= step;
            let lm = contrastive_loss(&images, &captions, &minus).unwrap().loss;
            let fd = (lp - lm) / (2.0 * step);
            let denom = fd.abs().max(out.grad[i].abs()).max(1e-8);
            worst = worst.max(((fd - out.grad[i]) / denom).abs());
        }
        assert!(worst < 1e-4, "batch {batch}: max relative error {worst}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!("criterion 05 (analytic gradients match central finite differences): PASS");
}

#[test]
fn criterion_06_expert_shard_batches_carry_fewer_false_negatives() {
    let spec = SyntheticCorpusSpec { seed: 11, ..SyntheticCorpusSpec::default() };
    assert_eq!(spec.false_negative_knob, 0.3);
    let corpus = generate_corpus(&spec).unwrap();

    // Cluster captions the same way the pipeline does.
    let mut rng = derive_rng(spec.seed, "cluster-sample", 0);
    let picks = rand::seq::index::sample(&mut rng, corpus.train.len(), 10_000);
    let mut idx: Vec<usize> = picks.iter().collect();
    idx.sort_unstable();
    let sample = corpus.train.captions.gather(&idx);
    let fit = two_step_cluster(&sample, &TwoStepConfig::new(64, 2)).unwrap();
    let assignment = fit.model.assign_corpus(&corpus.train.captions).unwrap();
    let model = fit.model.with_fine_counts(assignment.fine_counts.clone()).unwrap();

    // Highest-priority condition: the most diverse shard, trained first.
    let first = model.priority_order()[0];
    let shard = corpus.train.select(&assignment.shard_indices(first));

    let batches = 128;
    let corpus_rate = batch_false_negative_rate(&corpus.train, 64, batches, 2025).unwrap();
    let shard_rate = batch_false_negative_rate(&shard, 64, batches, 2025).unwrap();
    assert!(
        corpus_rate > 0.02,
        "corpus rate {corpus_rate} too small for a meaningful comparison"
    );
    assert!(
        shard_rate < corpus_rate,
        "shard batches ({shard_rate}) should carry strictly fewer false negatives \
         than corpus batches ({corpus_rate})"
    );
    println!(
        "criterion 06 (shard batches reduce false negatives: {shard_rate:.4} < {corpus_rate:.4}): PASS"
    );
}

#[test]
fn criterion_07_clustered_experts_beat_dense_and_scale_with_n() {
    let (records, elapsed) = ablation_matrix();
    assert!(
        *elapsed < Duration::from_secs(900),
        "matrix took {elapsed:?}, budget is 15 minutes"
    );

    let task = "zero_shot_classification";
    let mode2 = per_seed_values(records, "mode-2", task);
    let dense = per_seed_values(records, "full-1", task);
    assert_eq!(mode2.len(), 5);
    assert_eq!(dense.len(), 5);
    let wins = mode2
        .iter()
        .zip(&dense)
        .filter(|((s2, v2), (s1, v1))| {
            assert_eq!(s2, s1);
            v2 > v1
        })
        .count();
    let p = sign_test_p(wins, 5);
    let mean2 = mean_for(records, "mode-2", task);
    let mean4 = mean_for(records, "mode-4", task);
    let mean_dense = mean_for(records, "full-1", task);
    assert!(
        mean2 > mean_dense,
        "mode-2 mean {mean2:.4} does not exceed dense mean {mean_dense:.4}"
    );
    assert!(p < 0.1, "sign test p = {p:.4} (wins {wins}/5) is not below 0.1");
    assert!(
        mean4 >= mean2,
        "mode-4 mean {mean4:.4} fell below mode-2 mean {mean2:.4}"
    );
    println!(
        "criterion 07 (mode-2 {mean2:.4} > dense {mean_dense:.4}, p={p:.4}; mode-4 {mean4:.4} >= mode-2; matrix {elapsed:?}): PASS"
    );
}

#[test]
fn criterion_08_mode_leads_every_ablation_arm() {
    let (records, _) = ablation_matrix();
    let task = "zero_shot_classification";
    let mode2 = mean_for(records, "mode-2", task);
    for rival in ["full-2", "random-2", "one-step-2", "coarse-cluster-2"] {
        let other = mean_for(records, rival, task);
        assert!(
            mode2 >= other,
            "mode-2 mean {mode2:.4} fell below {rival} mean {other:.4}"
        );
    }
    println!("criterion 08 (mode-2 mean tops full-2, random-2, one-step-2, coarse-cluster-2): PASS");
}

#[test]
fn criterion_09_concatenated_probe_matches_dense_probe() {
    let (records, _) = ablation_matrix();
    let mode4 = mean_for(records, "mode-4", "linear_probe");
    let dense = mean_for(records, "full-1", "linear_probe");
    assert!(
        mode4 >= dense,
        "mode-4 concat probe {mode4:.4} fell below dense probe {dense:.4}"
    );
    println!("criterion 09 (mode-4 concat probe {mode4:.4} >= dense probe {dense:.4}): PASS");
}

#[test]
fn criterion_10_formats_round_trip_and_corruptions_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let read_bytes = |p: &Path| std::fs::read(p).unwrap();
    let write_bytes = |p: &Path, b: &[u8]| std::fs::write(p, b).unwrap();

    // Embeddings round-trip bitwise.
    let emb = unit_matrix(110, 0, 40, 6).with_source(2);
    let p1 = dir.path().join("a.mode");
    emb.write_file(&p1).unwrap();
    let emb2 = EmbeddingMatrix::read_file(&p1).unwrap();
    let p1b = dir.path().join("a2.mode");
    emb2.write_file(&p1b).unwrap();
    assert_eq!(read_bytes(&p1), read_bytes(&p1b));

    // Cluster model round-trips bitwise.
    let sample = unit_matrix(110, 1, 120, 6).with_source(2);
    let model = two_step_cluster(&sample, &TwoStepConfig::new(8, 2)).unwrap().model;
    let p2 = dir.path().join("m.modc");
    model.write_file(&p2).unwrap();
    let model2 = mode_core::clustering::ClusterModel::read_file(&p2).unwrap();
    let p2b = dir.path().join("m2.modc");
    model2.write_file(&p2b).unwrap();
    assert_eq!(read_bytes(&p2), read_bytes(&p2b));

    // Checkpoint round-trips bitwise.
    let shape = TowerShape { image_dim: 6, caption_dim: 6, hidden_dim: 4, embed_dim: 3 };
    let expert = DataExpert {
        params: TowerParams::init(shape, 9, 2.0).unwrap(),
        condition_id: Some(1),
        fine_set: vec![],
        steps_trained: 17,
        provenance: [7u8; 32],
    };
    let p3 = dir.path().join("e.modx");
    expert.write_file(&p3).unwrap();
    let expert2 = DataExpert::read_file(&p3).unwrap();
    let p3b = dir.path().join("e2.modx");
    expert2.write_file(&p3b).unwrap();
    assert_eq!(read_bytes(&p3), read_bytes(&p3b));

    // Header corruptions: each class of damage yields its own error, all
    // mapping to the artifact exit code.
    enum Reader {
        Emb,
        Model,
        Expert,
    }
    let cases: [(&str, &Path, Reader, Box<dyn Fn(&mut Vec<u8>)>); 5] = [
        ("magic", &p1, Reader::Emb, Box::new(|b| b[0] ^= 0xff)),
        ("version", &p2, Reader::Model, Box::new(|b| b[4] = b[4].wrapping_add(1))),
        ("truncate", &p3, Reader::Expert, Box::new(|b| b.truncate(b.len() - 3))),
        ("trailing", &p2, Reader::Model, Box::new(|b| b.extend_from_slice(&[0, 0]))),
        ("magic2", &p3, Reader::Expert, Box::new(|b| b[1] ^= 0xff)),
    ];
    let mut seen = Vec::new();
    for (name, path, reader, mutate) in cases {
        let mut bytes = read_bytes(path);
        mutate(&mut bytes);
        let corrupt = dir.path().join(format!("corrupt-{name}"));
        write_bytes(&corrupt, &bytes);
        let err = match reader {
            Reader::Emb => EmbeddingMatrix::read_file(&corrupt).unwrap_err(),
            Reader::Model => {
                mode_core::clustering::ClusterModel::read_file(&corrupt).unwrap_err()
            }
            Reader::Expert => DataExpert::read_file(&corrupt).unwrap_err(),
        };
        assert_eq!(err.exit_code(), 3, "{name}: wrong exit code");
        let variant = match err {
            ModeError::BadMagic { .. } => "BadMagic",
            ModeError::VersionMismatch { .. } => "VersionMismatch",
            ModeError::TruncatedPayload { .. } => "TruncatedPayload",
            ModeError::TrailingBytes { .. } => "TrailingBytes",
            other => panic!("{name}: unexpected error {other:?}"),
        };
        seen.push(variant);
    }
    assert_eq!(
        seen,
        vec!["BadMagic", "VersionMismatch", "TruncatedPayload", "TrailingBytes", "BadMagic"],
        "corruption classes must map to distinct errors"
    );
    println!("criterion 10 (formats round-trip bitwise; corruptions yield distinct errors): PASS");
}

#[test]
fn criterion_11_identical_configs_produce_identical_artifact_digests() {
    let make_cfg = |dir: &Path| RunConfig {
        paths: PathsConfig { out_dir: dir.to_path_buf(), images: None, captions: None },
        corpus: SyntheticCorpusSpec {
            topics: 4,
            modes_per_topic: 3,
            image_dim: 12,
            caption_dim: 12,
            noise_sigma: 0.25,
            false_negative_knob: 0.3,
            corpus_size: 240,
            seed: 5,
        },
        clustering: ClusteringSection { m: 6, n: 2, sample_size: 0, ..Default::default() },
        training: TrainConfig {
            batch_size: 16,
            total_steps: 40,
            hidden_dim: 8,
            embed_dim: 8,
            seed: 5,
            ..TrainConfig::default()
        },
        routing: Default::default(),
        evaluation: EvaluationSection {
            arms: vec![Arm::new(ArmKind::Mode, 2)],
            seeds: vec![5],
            eval_size: 60,
            ks: vec![1],
            probe: None,
        },
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut manifests = Vec::new();
    for dir in [dir_a.path(), dir_b.path()] {
        let mut p = Pipeline::open(make_cfg(dir)).unwrap();
        p.gen_corpus().unwrap();
        p.cluster().unwrap();
        p.train_experts(&TrainOrder::Priority).unwrap();
        p.evaluate().unwrap();
        manifests.push(p.manifest().artifacts.clone());
    }
    assert_eq!(manifests[0].len(), 11, "expected every stage artifact to be recorded");
    assert_eq!(
        manifests[0], manifests[1],
        "identical configs must produce identical artifact digests"
    );
    println!("criterion 11 (two identical pipeline runs produce identical digests): PASS");
}
