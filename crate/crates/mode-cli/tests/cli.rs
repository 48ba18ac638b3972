//! End-to-end runs of the `mode` binary: staged pipeline, idempotent
//! reruns, flag overrides, exit codes, and expert selection.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mode(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mode"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
[paths]
out_dir = "{}"

[corpus]
topics = 4
modes_per_topic = 3
image_dim = 12
caption_dim = 12
corpus_size = 240
noise_sigma = 0.25
false_negative_knob = 0.3
seed = 5

[clustering]
m = 6
n = 2
sample_size = 0

[training]
batch_size = 16
total_steps = 40
hidden_dim = 8
embed_dim = 8
seed = 5

[evaluation]
arms = ["mode-2"]
seeds = [5]
eval_size = 60
ks = [1]
"#,
        out_dir.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn staged_run_is_idempotent_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &run);
    let cfg = cfg.to_str().unwrap();

    for stage in ["gen-corpus", "cluster", "train-experts", "evaluate"] {
        let out = mode(&[stage, "--config", cfg], &[("MODE_THREADS", "2")]);
        assert!(
            out.status.success(),
            "{stage} failed: {}{}",
            stdout(&out),
            stderr(&out)
        );
    }

    let manifest_before = fs::read_to_string(run.join("manifest.json")).unwrap();
    let records_before = fs::read(run.join("reports/records.jsonl")).unwrap();

    // Rerunning completed stages is a no-op and leaves artifacts untouched.
    for stage in ["gen-corpus", "cluster", "train-experts", "evaluate"] {
        let out = mode(&[stage, "--config", cfg], &[]);
        assert!(out.status.success());
        assert!(
            stdout(&out).contains("skipped"),
            "{stage} did not skip: {}",
            stdout(&out)
        );
    }
    assert_eq!(
        manifest_before,
        fs::read_to_string(run.join("manifest.json")).unwrap(),
        "manifest changed on a no-op rerun"
    );
    assert_eq!(records_before, fs::read(run.join("reports/records.jsonl")).unwrap());

    let out = mode(&["report", "--config", cfg], &[]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("zero_shot_classification"));
    assert!(text.contains("primary"));
    assert!(text.contains("mode-2"));
}

#[test]
fn identical_configs_build_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let cfg_dir = dir.path().join(name.to_owned() + "-cfg");
        fs::create_dir_all(&cfg_dir).unwrap();
        let cfg = write_config(&cfg_dir, &run);
        let cfgs = cfg.to_str().unwrap().to_owned();
        for stage in ["gen-corpus", "cluster", "train-experts"] {
            let out = mode(&[stage, "--config", &cfgs], &[]);
            assert!(out.status.success(), "{stage}: {}", stderr(&out));
        }
        let mut files: Vec<_> = ["corpus/images.mode", "cluster/model.modc", "checkpoints/expert_0000.modx", "checkpoints/expert_0001.modx"]
            .iter()
            .map(|rel| fs::read(run.join(rel)).unwrap())
            .collect();
        digests.append(&mut files);
    }
    let (a, b) = digests.split_at(digests.len() / 2);
    assert_eq!(a, b, "two runs of one config produced different artifacts");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[clustering]\nm = 2\nn = 5\n").unwrap();
    let out = mode(&["cluster", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("m >= n"));

    let unparsable = dir.path().join("junk.toml");
    fs::write(&unparsable, "this is not toml [").unwrap();
    let out = mode(&["report", "--config", unparsable.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));

    // Clap rejects unknown flags with the same code.
    let out = mode(&["cluster", "--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(2));

    // A malformed thread count is a configuration error.
    let out = mode(
        &["report", "--out-dir", dir.path().to_str().unwrap()],
        &[("MODE_THREADS", "many")],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("MODE_THREADS"));
}

#[test]
fn missing_and_stale_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg_path = write_config(dir.path(), &run);
    let cfg = cfg_path.to_str().unwrap();

    // Evaluating an empty run directory names the missing cluster model.
    let out = mode(&["evaluate", "--config", cfg], &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("model.modc"), "{}", stderr(&out));

    for stage in ["gen-corpus", "cluster", "train-experts"] {
        assert!(mode(&[stage, "--config", cfg], &[]).status.success());
    }

    // Tampering with a checkpoint is refused as a digest mismatch.
    let victim = run.join("checkpoints/expert_0000.modx");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let out = mode(&["evaluate", "--config", cfg], &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));
}

#[test]
fn select_expert_ranks_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg_path = write_config(dir.path(), &run);
    let cfg = cfg_path.to_str().unwrap();
    assert!(mode(&["gen-corpus", "--config", cfg], &[]).status.success());
    assert!(mode(&["cluster", "--config", cfg], &[]).status.success());

    // Metadata equal to one fine center hits exactly its condition once.
    let model =
        mode_core::clustering::ClusterModel::read_file(&run.join("cluster/model.modc")).unwrap();
    let meta = model.fine_centers().gather(&[0]);
    let meta_path = dir.path().join("meta.mode");
    meta.write_file(&meta_path).unwrap();
    let out = mode(
        &["select-expert", "--config", cfg, "--metadata", meta_path.to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let expected = format!("condition {}: 1 hits", model.fine_to_coarse()[0]);
    assert_eq!(stdout(&out).trim(), expected);

    // Selection without a fitted cluster model is a missing artifact.
    let other = dir.path().join("empty-run");
    let cfg2_dir = dir.path().join("cfg2");
    fs::create_dir_all(&cfg2_dir).unwrap();
    let cfg2 = write_config(&cfg2_dir, &other);
    let out = mode(
        &[
            "select-expert",
            "--config",
            cfg2.to_str().unwrap(),
            "--metadata",
            meta_path.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
}
