#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use ard_core::report::PipelineReport;
use ard_core::store::{concept_embedding_id, ActivationStore, SemanticEmbedding};
use ard_core::synthetic::{write_synthetic_store, SyntheticStoreSpec};

pub fn ard_bin() -> &'static str {
    env!("CARGO_BIN_EXE_ard")
}

/// Run `ard` in `cwd` with a private cache directory.
pub fn ard(cwd: &Path, args: &[&str]) -> Output {
    Command::new(ard_bin())
        .args(args)
        .current_dir(cwd)
        .env("ARD_CACHE_DIR", cwd.join("cache"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ard")
}

pub fn ard_ok(cwd: &Path, args: &[&str]) -> Output {
    let out = ard(cwd, args);
    assert!(
        out.status.success(),
        "ard {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn pipeline_store_spec() -> SyntheticStoreSpec {
    SyntheticStoreSpec {
        clips: 32,
        tokens_per_clip: 12,
        d_x: 16,
        atoms: 32,
        themes: 4,
        seed: 11,
        ..Default::default()
    }
}

/// Write the synthetic store into `dir/store` and run train, score, rank
/// and name in `dir`. Returns the report path.
pub fn run_pipeline(dir: &Path) -> PathBuf {
    write_synthetic_store(dir.join("store"), &pipeline_store_spec()).unwrap();
    ard_ok(
        dir,
        &[
            "train", "--store", "store", "--expansion", "4", "--topk", "4", "--steps", "300",
            "--batch", "64", "--lr", "1e-2", "--seed", "5", "--out", "sae.bin", "--loss-csv",
            "loss.csv",
        ],
    );
    ard_ok(dir, &["score", "--store", "store", "--model", "sae.bin", "--p", "4", "--out", "scores.json"]);
    ard_ok(dir, &["rank", "--store", "store", "--scores", "scores.json", "--top-c", "10", "--out", "mono.json"]);
    ard_ok(
        dir,
        &[
            "name", "--store", "store", "--model", "sae.bin", "--scores", "scores.json", "--ranking",
            "mono.json", "--provider", "mock", "--out", "report.json",
        ],
    );
    dir.join("report.json")
}

pub fn read_report(path: &Path) -> PipelineReport {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Stand-in for a text embedder: each concept's embedding is the mean of
/// its high-set clip embeddings.
pub fn write_concept_embeddings(store_dir: &Path, report: &PipelineReport) {
    let store = ActivationStore::open(store_dir).unwrap();
    for c in &report.concepts {
        let mut acc: Vec<f32> = Vec::new();
        for r in &c.representatives {
            let e = store.load_embedding(&r.clip_id).unwrap();
            if acc.is_empty() {
                acc = vec![0.0; e.values.len()];
            }
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        store
            .write_embedding(&SemanticEmbedding::new(concept_embedding_id(c.feature), acc))
            .unwrap();
    }
}

/// A running `ard serve`; killed on drop.
pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn spawn(cwd: &Path, extra: &[&str]) -> Self {
        let mut child = Command::new(ard_bin())
            .arg("serve")
            .args(["--port", "0"])
            .args(extra)
            .current_dir(cwd)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn ard serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected server banner {line:?}"))
            .to_string();
        Self { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn stop(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
