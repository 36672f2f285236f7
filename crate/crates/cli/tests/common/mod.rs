#![allow(dead_code)]

use std::path::Path;

use tempmix_cli::RunConfig;

/// A world and network small enough for a full pipeline in seconds.
pub const TINY: &[(&str, &str)] = &[
    ("synth.extent_m", "40000"),
    ("synth.dem_cells", "80"),
    ("synth.n_sites", "30"),
    ("synth.days", "1"),
    ("synth.contamination_rate", "0.1"),
    ("net.conv_channels", "2"),
    ("net.dense_widths", "8"),
    ("net.outlier_hidden", "4"),
    ("net.patch_size", "8"),
    ("net.patch_cell_m", "1000"),
    ("net.dropout_rate", "0.2"),
    ("train.epochs", "2"),
    ("train.batch_size", "64"),
    ("train.checkpoint_every", "1"),
    ("folds.k", "5"),
    ("folds.train", "1,2,3"),
    ("folds.eval", "4"),
    ("folds.test", "5"),
    ("mc.passes", "4"),
    ("mc.draws_per_pass", "5"),
    ("grid.resolution", "4000"),
];

pub fn tiny_config(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let sets: Vec<(String, String)> = TINY.iter().chain(extra).map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::resolve(None, &sets, Some(3), Some(out)).unwrap()
}

pub fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

pub fn key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
