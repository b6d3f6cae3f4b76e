//! Helpers shared by the integration targets of the command-line crate.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trigrid::config::{DataConfig, DiscriminatorConfig, RunConfig};
use trigrid::io::sha256_hex;
use trigrid_core::config::{ModelConfig, TrainConfig};

/// A run small enough to push every command through in a few seconds.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 11;
    c.model = ModelConfig::tiny();
    c.pretrain.steps = 8;
    c.pretrain.batch_size = 2;
    c.pretrain.critic_channels = [2, 2, 2, 2];
    c.data = DataConfig { train_images: 4, test_images: 3 };
    c.e1 = TrainConfig { learning_rate: 1e-3, batch_size: 2, total_steps: 6, ..TrainConfig::default() };
    // long enough for three penalty steps of the critic
    c.e2 = TrainConfig { total_steps: 34, ..c.e1 };
    c.discriminator = Some(DiscriminatorConfig { channels: [2, 3, 3, 3] });
    c.eval.n_views = 4;
    c.eval.reference_samples = 4;
    c.eval.mesh_resolution = 8;
    c
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

pub fn trigrid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trigrid")).args(args).output().expect("spawn trigrid")
}

/// Runs the binary with `--config` and `--out`, panicking with its stderr on failure.
pub fn run_ok(config: &Path, out: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--quiet", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    let o = trigrid(&full);
    assert!(o.status.success(), "trigrid {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

/// The verbs that produce the model files, in dependency order.
pub const TRAINING_VERBS: [&[&str]; 4] = [&["pretrain-gen"], &["gen-data"], &["train-e1"], &["train-e2"]];

pub fn train_all(config: &Path, out: &Path) {
    for verb in TRAINING_VERBS {
        run_ok(config, out, verb);
    }
}

/// SHA-256 of every file below `dir`, keyed by relative path.
pub fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_hex(&fs::read(&p).unwrap()));
            }
        }
    }
    out
}

/// Parsed line-delimited JSON log.
pub fn read_log(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}
