mod common;

use std::path::Path;

use common::{read_json, sem, sem_ok, tree_hashes, SYNTH_FLAGS, TRAIN_FLAGS};
use sem_core::format::{write_embedding_matrix, EmbeddingMatrix};

fn synth(dir: &Path, seed: &str, entanglement: &str) {
    let mut args = vec!["synth-gen", "--out", "corpus", "--seed", seed, "--entanglement", entanglement];
    args.extend_from_slice(SYNTH_FLAGS);
    sem_ok(dir, &args);
}

#[test]
fn synth_gen_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        sem_ok(dir, &["synth-gen", "--seed", "7", "--out", "corpus"]);
    }
    let (ha, hb) = (tree_hashes(a.path()), tree_hashes(b.path()));
    assert!(ha.contains_key("corpus/manifest.json"));
    assert_eq!(ha, hb);
}

#[test]
fn full_pipeline_lowers_retrieval_skew() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "0", "0.5");
    let mut train = vec!["sae-train", "--manifest", "corpus/manifest.json", "--out", "sae.semw", "--report", "train.json"];
    train.extend_from_slice(TRAIN_FLAGS);
    sem_ok(dir, &train);
    sem_ok(dir, &["steer", "--sae", "sae.semw", "--manifest", "corpus/manifest.json", "--variant", "sem_b", "--out", "steered.seme"]);
    sem_ok(dir, &["retrieve-eval", "--manifest", "corpus/manifest.json", "--out", "base.json"]);
    sem_ok(dir, &["retrieve-eval", "--manifest", "corpus/manifest.json", "--queries", "steered.seme", "--out", "steered.json"]);

    let base = read_json(&dir.join("base.json"));
    let steered = read_json(&dir.join("steered.json"));
    let kl = |r: &serde_json::Value| r["results"]["kl_at_k"].as_f64().unwrap();
    let skew = |r: &serde_json::Value| r["results"]["maxskew_at_k"].as_f64().unwrap();
    assert!(kl(&steered) < kl(&base), "kl {} -> {}", kl(&base), kl(&steered));
    assert!(skew(&steered) < skew(&base));
    assert_eq!(base["results"]["k"], 40);

    // Reports carry the resolved configuration and file hashes.
    assert_eq!(steered["config"]["queries"], "steered.seme");
    let inputs = steered["inputs"].as_object().unwrap();
    assert_eq!(inputs["steered.seme"].as_str().unwrap().len(), 64);
    let trained = read_json(&dir.join("train.json"));
    assert_eq!(trained["results"]["train_config"]["granularities"], serde_json::json!([4, 8]));
    assert_eq!(trained["outputs"].as_object().unwrap().len(), 1);
}

#[test]
fn bias_aware_steering_without_bias_roles_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "1", "0.5");
    let mut train = vec!["sae-train", "--manifest", "corpus/manifest.json", "--out", "sae.semw", "--steps", "20"];
    train.extend_from_slice(&TRAIN_FLAGS[..2]);
    sem_ok(dir, &train);

    let path = dir.join("corpus/manifest.json");
    let mut m = read_json(&path);
    m["entries"].as_array_mut().unwrap().retain(|e| !e["role"].as_str().unwrap().starts_with("bias:"));
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();

    let out = sem(dir, &["steer", "--sae", "sae.semw", "--manifest", "corpus/manifest.json", "--variant", "sem_b", "--out", "x.seme"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bias:"));
    assert!(!dir.join("x.seme").exists());

    // The bias-agnostic variant does not need them.
    sem_ok(dir, &["steer", "--sae", "sae.semw", "--manifest", "corpus/manifest.json", "--variant", "sem_i", "--out", "x.seme"]);
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(sem(dir, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(sem(dir, &["synth-gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(sem(dir, &["--help"]).status.code(), Some(0));

    std::fs::write(dir.join("junk.semw"), b"not a weights file").unwrap();
    std::fs::write(dir.join("in.seme"), EmbeddingMatrix::new(1, 2, vec![1.0, 0.0]).unwrap().to_bytes()).unwrap();
    let out = sem(dir, &["encode", "--sae", "junk.semw", "--input", "in.seme", "--out", "h.seme"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.join("h.seme").exists());

    synth(dir, "2", "0.5");
    let zeros = EmbeddingMatrix::new(6, 32, vec![0.0; 6 * 32]).unwrap();
    write_embedding_matrix(&zeros, dir.join("zeros.seme")).unwrap();
    let out = sem(dir, &["retrieve-eval", "--manifest", "corpus/manifest.json", "--queries", "zeros.seme", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.join("r.json").exists());

    let out = sem(dir, &["retrieve-eval", "--manifest", "corpus/manifest.json", "--eval-role", "bias:nothing:x", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bias:nothing:x"));
}

#[test]
fn evaluation_commands_emit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "3", "0.0");
    sem_ok(dir, &["zeroshot-eval", "--manifest", "corpus/manifest.json", "--out", "zs.json"]);
    let zs = read_json(&dir.join("zs.json"));
    let metrics = &zs["results"]["metrics"];
    let (acc, wg, gap) = (
        metrics["accuracy"].as_f64().unwrap(),
        metrics["worst_group_accuracy"].as_f64().unwrap(),
        metrics["gap"].as_f64().unwrap(),
    );
    assert!((gap - (acc - wg)).abs() < 1e-12);
    assert!(acc > 0.9, "accuracy {acc}");

    sem_ok(dir, &["disentangle", "--manifest", "corpus/manifest.json", "--folds", "3", "--out", "dis.json"]);
    let dis = read_json(&dir.join("dis.json"));
    assert_eq!(dis["results"]["study"]["folds"].as_array().unwrap().len(), 3);

    sem_ok(dir, &["baseline-orthproj", "--manifest", "corpus/manifest.json", "--out", "op.seme"]);
    sem_ok(
        dir,
        &[
            "report", "--inputs", "zs.json", "dis.json", "--out", "summary.csv", "--pca", "corpus/images.seme",
            "--pca-labels", "corpus/images.csv", "--pca-out", "pca.csv",
        ],
    );
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("report,command,metric,value\n"));
    assert!(summary.contains("zs.json,zeroshot-eval,metrics.gap,"));
    let pca = std::fs::read_to_string(dir.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 6 * 2 * 40);
}
