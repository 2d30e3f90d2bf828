#![allow(dead_code)]

use std::sync::Arc;

use ssr_core::config::{ExperimentConfig, Precision};
use ssr_core::datasets::{synthetic, BatchSpec, TrainingData};

/// Desk-scale setup: 8×8 → 32×32, two RRDB blocks, narrow D and feature net.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let g = &mut cfg.model.generator;
    g.n_rrdb_blocks = 2;
    g.base_channels = 16;
    g.growth_channels = 8;
    let d = &mut cfg.model.discriminator;
    d.input_size = 32;
    d.base_channels = 16;
    d.n_downsample_stages = 3;
    d.dense_units = 64;
    cfg.model.features = cfg.model.features.clone().with_tap(3, 4).with_width_divisor(8);
    cfg.fid = ssr_core::metrics::FidConfig::small();
    let t = &mut cfg.trainer;
    t.batch = BatchSpec {
        n_sup: 4,
        n_unsup: 4,
        lr_patch: None,
    };
    t.checkpoint_every = 0;
    t.validate_every = 0;
    t.early_stop_patience = 0;
    t.validation_fid = false;
    t.workers = 0;
    cfg
}

/// Even smaller and in f64, for exact comparisons.
pub fn micro_config() -> ExperimentConfig {
    let mut cfg = tiny_config();
    cfg.model.generator.n_rrdb_blocks = 1;
    cfg.model.generator.base_channels = 8;
    cfg.model.generator.growth_channels = 4;
    cfg.model.discriminator.base_channels = 8;
    cfg.model.discriminator.dense_units = 16;
    cfg.model.features = cfg.model.features.clone().with_width_divisor(16);
    cfg.trainer.precision = Precision::F64;
    cfg.trainer.batch.n_sup = 2;
    cfg.trainer.batch.n_unsup = 2;
    cfg
}

/// Synthetic shapes data degraded with `cfg.degradation`.
pub fn shapes_data(
    cfg: &ExperimentConfig,
    n_paired: usize,
    n_unpaired: usize,
    n_validation: usize,
    seed: u64,
) -> Arc<TrainingData> {
    let hr = synthetic::shapes(n_paired + n_unpaired + n_validation, 32, 3, seed);
    Arc::new(
        TrainingData::synthesize(
            &hr[..n_paired],
            &hr[n_paired..n_paired + n_unpaired],
            &hr[n_paired + n_unpaired..],
            &cfg.degradation,
        )
        .unwrap(),
    )
}
