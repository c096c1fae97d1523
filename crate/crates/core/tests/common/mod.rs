#![allow(dead_code)]

use mctrace_core::pipeline::{algorithm1_fit, LabeledCounts, TrainConfig, TrainedModel};
use mctrace_core::synth::{generate_synthetic, SyntheticSpec};
use mctrace_core::LambdaGrid;

pub fn fast_config(seed: u64) -> TrainConfig {
    TrainConfig {
        inner_folds: 3,
        rho3_grid: vec![0.2, 0.8],
        lambda_grid: LambdaGrid::Auto { n: 15, min_ratio: 1e-3 },
        seed,
        ..Default::default()
    }
}

pub fn labeled(spec: &SyntheticSpec) -> Vec<LabeledCounts> {
    generate_synthetic(spec)
        .unwrap()
        .iter()
        .map(|p| p.labeled_counts(spec.c).unwrap())
        .collect()
}

pub fn small_model(seed: u64) -> TrainedModel {
    let data = labeled(&SyntheticSpec::contrast(8, &[0, 1], 40, 3000, seed));
    algorithm1_fit(&data, &fast_config(seed)).unwrap()
}
