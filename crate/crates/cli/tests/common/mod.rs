#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use ssr_core::config::ExperimentConfig;
use ssr_core::datasets::synthetic;
use ssr_core::imaging::{degrade, save_png};
use ssr_core::study::{export_study, StudyImage, StudyMethod};
use ssr_core::trainer::Trainer;
use ssr_core::Device;

/// A run small enough for a debug-profile test: 8×8 → 32×32, one RRDB block.
pub const MICRO_TOML: &str = r#"
[data.synthetic]
n_paired = 4
n_unpaired = 4
n_validation = 2
hr_size = 32
channels = 3
seed = 1

[model.generator]
n_rrdb_blocks = 1
base_channels = 8
growth_channels = 4

[model.discriminator]
input_size = 32
base_channels = 8
n_downsample_stages = 3
dense_units = 16

[model.features]
tap = { pool_index = 3, conv_index = 4 }
width_divisor = 16

[trainer]
warmup_batches = 1
max_batches = 2
batch = { n_sup = 2, n_unsup = 2 }
checkpoint_every = 0
validate_every = 1
early_stop_patience = 0
validation_fid = false
workers = 0
"#;

pub struct Run {
    pub code: i32,
    pub json: Value,
    pub stdout: String,
}

pub fn ssr(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_ssr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ssr");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let last = stdout.lines().last().unwrap_or("null").to_string();
    Run {
        code: out.status.code().unwrap_or(-1),
        json: serde_json::from_str(&last).unwrap_or(Value::Null),
        stdout,
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Untrained generator checkpoints, one per seed.
pub fn checkpoints(dir: &Path, n: usize) -> Vec<StudyMethod> {
    (0..n)
        .map(|i| {
            let mut cfg = ExperimentConfig::from_toml_str(MICRO_TOML).unwrap();
            cfg.trainer.seed = 10 + i as u64;
            let path = dir.join(format!("method{i}.safetensors"));
            Trainer::new(&cfg, &Device::Cpu).unwrap().save(&path).unwrap();
            StudyMethod {
                name: format!("method-{i}"),
                checkpoint: path,
            }
        })
        .collect()
}

pub fn study_bundle(dir: &Path, n_methods: usize, n_images: usize) -> (PathBuf, Vec<StudyMethod>) {
    let methods = checkpoints(dir, n_methods);
    let cfg = ExperimentConfig::from_toml_str(MICRO_TOML).unwrap();
    let images: Vec<_> = synthetic::shapes(n_images, 32, 3, 3)
        .into_iter()
        .enumerate()
        .map(|(i, hr)| StudyImage {
            image_id: format!("img{i}"),
            lr: degrade(&hr, &cfg.degradation).unwrap(),
            hr,
        })
        .collect();
    let out = dir.join("bundle");
    export_study(&methods, &images, &out, 5, None).unwrap();
    (out, methods)
}

/// Writes `n` synthetic PNGs of `size`×`size` into `dir`.
pub fn png_dir(dir: &Path, n: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, img) in synthetic::shapes(n, size, 3, seed).iter().enumerate() {
        save_png(img, &dir.join(format!("im{i:03}.png"))).unwrap();
    }
}
