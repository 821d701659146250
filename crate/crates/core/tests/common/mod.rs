#![allow(dead_code)]

use offload_core::dataset::{sample_scenario, GenConfig};
use offload_core::rng;
use offload_core::solver::{exact_enum, SolverConfig};
use offload_core::{Scenario, Solution};

pub fn scenario(seed: u64, n: usize) -> Scenario {
    let cfg = GenConfig::new(n, 1, seed);
    sample_scenario(&cfg, &mut rng::stream(seed, "tests", n as u64))
}

/// First scenario at or after `seed` that the exact solver can satisfy.
pub fn feasible(seed: u64, n: usize) -> (Scenario, Solution) {
    (0..)
        .find_map(|k| {
            let s = scenario(seed.wrapping_add(k * 7919), n);
            exact_enum(&s, &SolverConfig::default()).unwrap().map(|sol| (s, sol))
        })
        .unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
