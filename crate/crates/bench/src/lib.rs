//! Fixtures shared by the benchmarks.

use offload_core::dataset::{generate, sample_scenario, GenConfig};
use offload_core::mtfnn::train;
use offload_core::rng::stream;
use offload_core::{MtfnnArch, MtfnnModel, Scenario, TrainConfig};

/// `count` scenarios at `n` devices, drawn from the default ranges.
pub fn scenarios(n: usize, count: usize, seed: u64) -> Vec<Scenario> {
    let cfg = GenConfig::new(n, 1, seed);
    (0..count as u64)
        .map(|k| sample_scenario(&cfg, &mut stream(seed, "bench", k)))
        .collect()
}

/// A briefly trained model, so the decoded decisions look like real ones.
pub fn model(n: usize) -> MtfnnModel {
    let ds = generate(&GenConfig::new(n, 2_000, 1)).expect("default ranges are feasible");
    let tc = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    train(&ds, &MtfnnArch::for_scaler(&ds.scaler), &tc).expect("valid training config")
}
