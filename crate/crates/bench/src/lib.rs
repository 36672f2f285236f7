//! Fixtures shared by the kernel benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempmix::network::{build_model, NetworkConfig, SignalBatch, LOCATION_FEATURES};
use tempmix::ModelGraph;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The reduced network used for desk-scale runs.
pub fn desk_network() -> NetworkConfig {
    NetworkConfig {
        conv_channels: vec![4, 8],
        dense_widths: vec![64, 64],
        dropout_rate: 0.1,
        ..Default::default()
    }
}

/// A model with random weights and a batch of random standardized inputs.
pub fn model_and_batch(cfg: &NetworkConfig, n: usize, seed: u64) -> (ModelGraph, SignalBatch) {
    let mut r = rng(seed);
    let model = build_model(cfg, 8, &mut r).expect("valid config");
    let p = cfg.patch_size * cfg.patch_size;
    let patch: Vec<f32> = (0..n * p).map(|_| r.random_range(-1.0..1.0)).collect();
    let loc: Vec<f32> = (0..n * LOCATION_FEATURES).map(|_| r.random_range(-1.0..1.0)).collect();
    let batch = model.signal_batch_from_standardized(patch, loc).expect("shapes match");
    (model, batch)
}
