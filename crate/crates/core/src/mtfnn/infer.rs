use std::time::Instant;

use super::{MtfnnModel, Scratch};
use crate::cost::{Allocation, Decision, Scenario};
use crate::error::Result;
use crate::solver::{Method, Solution};

/// Lower clamp applied to an offloader's predicted ratio.
pub const MIN_OFFLOAD_RATIO: f64 = 1e-3;

/// Index of the largest value; ties go to the smaller index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Turns raw regression outputs into an allocation consistent with `decision`.
///
/// Locals get 0. Offloaders are clamped to `[MIN_OFFLOAD_RATIO, 1]` and, when
/// their sum exceeds 1, divided by it, so C3 and C4 hold by construction.
pub fn postprocess_ratios(raw: &[f64], decision: &Decision) -> Allocation {
    let mut ratios: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if !decision.offloads(i) {
                0.0
            } else if r.is_nan() {
                MIN_OFFLOAD_RATIO
            } else {
                r.clamp(MIN_OFFLOAD_RATIO, 1.0)
            }
        })
        .collect();
    let sum: f64 = ratios.iter().sum();
    if sum > 1.0 {
        ratios.iter_mut().for_each(|r| *r /= sum);
        // division can leave the sum an ulp or two above 1
        if ratios.iter().sum::<f64>() > 1.0 {
            let shrink = 1.0 - 4.0 * f64::EPSILON * ratios.len() as f64;
            ratios.iter_mut().for_each(|r| *r *= shrink);
        }
    }
    Allocation(ratios)
}

/// Prediction for one scenario, reusing `scratch` across calls.
pub fn infer_with(model: &MtfnnModel, scenario: &Scenario, scratch: &mut Scratch) -> Result<Solution> {
    let start = Instant::now();
    let mut features = std::mem::take(&mut scratch.features);
    model.scaler.encode_into(scenario, &mut features)?;
    let result = model.forward_with(&features, scratch).map(|(logits, ratios)| {
        let decision = Decision::from_class(argmax(logits), model.arch.n_devices);
        let allocation = postprocess_ratios(ratios, &decision);
        (decision, allocation)
    });
    scratch.features = features;
    let (decision, allocation) = result?;
    let mut sol = Solution::evaluate(scenario, decision, allocation, Method::Mtfnn)?;
    sol.wall_time_s = start.elapsed().as_secs_f64();
    Ok(sol)
}

/// Scales the scenario, runs the network and decodes a [`Solution`].
///
/// C1, C3 and C4 always hold; C2 may not, and is reported in
/// [`Solution::feasible`].
pub fn infer(model: &MtfnnModel, scenario: &Scenario) -> Result<Solution> {
    infer_with(model, scenario, &mut Scratch::default())
}
