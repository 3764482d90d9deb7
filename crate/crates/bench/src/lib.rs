//! Shared fixtures for the criterion benchmarks.

use harvest_core::{GridOverrides, ModelParams, SimConfig};

/// Small grid used where the full baseline would take minutes per sample.
pub fn bench_grid() -> GridOverrides {
    GridOverrides {
        n_r: Some(41),
        n_s: Some(25),
        n_e: Some(5),
        n_t: Some(10),
        ..GridOverrides::default()
    }
}

pub fn bench_params() -> ModelParams {
    ModelParams::baseline()
}

pub fn bench_sim(n_paths: usize) -> SimConfig {
    SimConfig {
        n_paths,
        ..SimConfig::default()
    }
}
