#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

/// Runs the `sem` binary with `args` inside `cwd`.
pub fn sem(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sem"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "off")
        .output()
        .expect("sem binary runs")
}

pub fn sem_ok(cwd: &Path, args: &[&str]) {
    let out = sem(cwd, args);
    assert!(
        out.status.success(),
        "sem {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// SHA-256 of every file below `dir`, keyed by relative path.
pub fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Corpus and SAE settings used by the end-to-end checks.
pub const SYNTH_FLAGS: &[&str] = &["--d", "32", "--n-contents", "6", "--noise-std", "0.1", "--samples-per-cell", "40"];
pub const TRAIN_FLAGS: &[&str] = &[
    "--latent-dim", "64", "--steps", "1000", "--lr", "1e-3", "--batch-size", "256", "--granularities", "4,8",
];
