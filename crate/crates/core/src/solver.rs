//! Ground-truth solvers for the joint offloading / allocation problem.
//!
//! * [`grid_exhaustive`] walks every decision vector and every allocation on
//!   an ω-spaced grid, evaluating each candidate through the cost model. It is
//!   the labeling oracle for training data.
//! * [`exact_enum`] walks every decision vector and solves the continuous
//!   allocation for each one in closed form with [`inner_allocation`].
//!
//! Both return `Ok(None)` when no candidate satisfies C1–C4.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{
    check_feasibility, local_cost, total_cost, upload_delay, uplink_rates, Allocation, Decision,
    Scenario,
};
use crate::error::{Error, Result};

pub const GRID_MAX_DEVICES: usize = 8;
pub const EXACT_MAX_DEVICES: usize = 16;

/// Relative cost difference below which two candidates count as tied.
pub const COST_TIE_TOL: f64 = 1e-12;

/// Where a [`Solution`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grid,
    Exact,
    Mtfnn,
    AllLocal,
    AllOffloadEqual,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Grid => "grid",
            Method::Exact => "exact",
            Method::Mtfnn => "mtfnn",
            Method::AllLocal => "all_local",
            Method::AllOffloadEqual => "all_offload_equal",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grid" => Method::Grid,
            "exact" => Method::Exact,
            "mtfnn" => Method::Mtfnn,
            "all_local" => Method::AllLocal,
            "all_offload_equal" => Method::AllOffloadEqual,
            other => return Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        })
    }
}

/// Ordering applied among candidates whose costs tie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Lower cost, then fewer offloaders, then lexicographically smaller
    /// decision, then lexicographically smaller allocation.
    #[default]
    FewerOffloadersThenLex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Allocation grid spacing ω.
    pub granularity: f64,
    pub tie_break: TieBreak,
    /// Minimum slack `ϑ − T_u` (seconds) an offloader needs in [`exact_enum`].
    pub feasibility_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            granularity: 0.1,
            tie_break: TieBreak::default(),
            feasibility_tol: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn with_granularity(granularity: f64) -> Self {
        SolverConfig {
            granularity,
            ..Self::default()
        }
    }

    /// Number of grid steps `1/ω`; the grid must land on 1.0.
    pub fn grid_steps(&self) -> Result<usize> {
        let w = self.granularity;
        if !(w > 0.0 && w < 1.0) {
            return Err(Error::InvalidConfig(format!("granularity {w} outside (0, 1)")));
        }
        let inv = 1.0 / w;
        let steps = inv.round();
        if (inv - steps).abs() > 1e-6 * inv {
            return Err(Error::InvalidConfig(format!(
                "granularity {w} does not divide 1 into whole steps"
            )));
        }
        Ok(steps as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_steps()?;
        if !(self.feasibility_tol >= 0.0) {
            return Err(Error::InvalidConfig("feasibility tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub decision: Decision,
    pub allocation: Allocation,
    pub total_cost: f64,
    pub feasible: bool,
    pub method: Method,
    pub wall_time_s: f64,
}

impl Solution {
    /// Builds a solution record for an arbitrary decision and allocation,
    /// checking it against C1–C4.
    pub fn evaluate(
        scenario: &Scenario,
        decision: Decision,
        allocation: Allocation,
        method: Method,
    ) -> Result<Self> {
        let (total_cost, feasible) = crate::cost::cost_and_feasibility(scenario, &decision, &allocation)?;
        Ok(Solution {
            decision,
            allocation,
            total_cost,
            feasible,
            method,
            wall_time_s: 0.0,
        })
    }

    /// Same record with the timing field cleared.
    pub fn without_timing(mut self) -> Self {
        self.wall_time_s = 0.0;
        self
    }
}

struct Candidate {
    cost: f64,
    decision: Decision,
    allocation: Allocation,
}

fn lex_f64(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// `true` when `a` should replace the incumbent `b`.
fn prefer(a: &Candidate, b: &Candidate, rule: TieBreak) -> bool {
    let scale = a.cost.abs().max(b.cost.abs());
    if (a.cost - b.cost).abs() > COST_TIE_TOL * scale {
        return a.cost < b.cost;
    }
    match rule {
        TieBreak::FewerOffloadersThenLex => a
            .decision
            .offload_count()
            .cmp(&b.decision.offload_count())
            .then_with(|| a.decision.cmp(&b.decision))
            .then_with(|| lex_f64(&a.allocation.0, &b.allocation.0))
            .is_lt(),
    }
}

fn consider(best: &mut Option<Candidate>, cand: Candidate, rule: TieBreak) {
    match best {
        Some(b) if !prefer(&cand, b, rule) => {}
        _ => *best = Some(cand),
    }
}

fn locals_meet_deadline(scenario: &Scenario, decision: &Decision) -> bool {
    scenario.devices.iter().enumerate().all(|(i, d)| {
        decision.offloads(i)
            || local_cost(d).delay_s <= d.task.max_delay_s * (1.0 + crate::cost::FEASIBILITY_TOL)
    })
}

/// Calls `visit` with every vector in `[1, steps]^k` whose sum is at most
/// `steps`, in lexicographic order.
fn for_each_grid_point(k: usize, steps: usize, visit: &mut impl FnMut(&[usize])) {
    fn rec(buf: &mut Vec<usize>, k: usize, left: usize, visit: &mut impl FnMut(&[usize])) {
        if buf.len() == k {
            visit(buf);
            return;
        }
        // reserve one step for every offloader still to be placed
        let remaining_slots = k - buf.len() - 1;
        if left < remaining_slots + 1 {
            return;
        }
        for j in 1..=left - remaining_slots {
            buf.push(j);
            rec(buf, k, left - j, visit);
            buf.pop();
        }
    }
    rec(&mut Vec::with_capacity(k), k, steps, visit);
}

fn finish(best: Option<Candidate>, method: Method, start: Instant) -> Option<Solution> {
    best.map(|c| Solution {
        decision: c.decision,
        allocation: c.allocation,
        total_cost: c.cost,
        feasible: true,
        method,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Exhaustive search over decisions and ω-grid allocations.
///
/// Offloaders take `Θ ∈ {ω, 2ω, …, 1}` and locals take 0, subject to
/// `ΣΘ ≤ 1`. Every candidate is checked and costed independently.
pub fn grid_exhaustive(scenario: &Scenario, config: &SolverConfig) -> Result<Option<Solution>> {
    let start = Instant::now();
    let n = scenario.len();
    if n > GRID_MAX_DEVICES {
        return Err(Error::TooManyDevices {
            solver: "grid",
            n,
            max: GRID_MAX_DEVICES,
        });
    }
    let steps = config.grid_steps()?;
    let mut best = None;
    let mut failure = None;

    for class in 0..1usize << n {
        let decision = Decision::from_class(class, n);
        if !locals_meet_deadline(scenario, &decision) {
            continue;
        }
        let offloaders: Vec<usize> = decision.offloaders().collect();
        for_each_grid_point(offloaders.len(), steps, &mut |point| {
            let mut ratios = vec![0.0; n];
            for (&i, &j) in offloaders.iter().zip(point) {
                ratios[i] = j as f64 / steps as f64;
            }
            let allocation = Allocation(ratios);
            if !check_feasibility(scenario, &decision, &allocation).is_feasible() {
                return;
            }
            match total_cost(scenario, &decision, &allocation) {
                Ok(b) => consider(
                    &mut best,
                    Candidate {
                        cost: b.total_cost,
                        decision: decision.clone(),
                        allocation,
                    },
                    config.tie_break,
                ),
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure.take() {
            return Err(e);
        }
    }
    Ok(finish(best, Method::Grid, start))
}

/// Continuous allocation for a fixed decision, with the devices pinned at
/// their delay floor.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerAllocation {
    pub allocation: Allocation,
    /// `true` for offloaders held at `f_min = c/(ϑ − T_u)`.
    pub clamped: Vec<bool>,
    /// `a_i = (α_i + β_i·P_I^i)·c_i`, zero for locals.
    pub marginal_weight: Vec<f64>,
}

/// Minimizes the processing part of the cost for a fixed decision.
///
/// Only `Σ a_i/f_i` depends on the allocation, and it falls in every `f_i`,
/// so the whole budget `F` is spent. Offloaders start at
/// `f_i = F·√a_i / Σ√a_j`; any that land below their delay floor are pinned
/// there and the rest of the budget is spread again over the others.
pub fn inner_allocation(scenario: &Scenario, decision: &Decision) -> Option<Allocation> {
    inner_allocation_detail(scenario, decision, SolverConfig::default().feasibility_tol)
        .map(|d| d.allocation)
}

pub fn inner_allocation_detail(
    scenario: &Scenario,
    decision: &Decision,
    slack_tol: f64,
) -> Option<InnerAllocation> {
    let n = scenario.len();
    let budget = scenario.mes_cpu_hz;
    let offloaders: Vec<usize> = decision.offloaders().collect();
    let mut clamped = vec![false; n];
    let mut weight = vec![0.0; n];
    if offloaders.is_empty() {
        return Some(InnerAllocation {
            allocation: Allocation::zeros(n),
            clamped,
            marginal_weight: weight,
        });
    }

    let rates = uplink_rates(scenario);
    let mut floor = vec![0.0; n];
    for &i in &offloaders {
        let d = &scenario.devices[i];
        let slack = d.task.max_delay_s - upload_delay(d, rates[i]);
        if !(slack > slack_tol) {
            return None;
        }
        floor[i] = d.task.cpu_cycles / slack;
        weight[i] = (d.weight_delay + d.weight_energy * scenario.radio.idle_power_w[i])
            * d.task.cpu_cycles;
    }
    let floor_sum: f64 = offloaders.iter().map(|&i| floor[i]).sum();
    if floor_sum > budget {
        return None;
    }

    let mut f = vec![0.0; n];
    // each pass pins at least one more device, so |S| passes suffice
    for _ in 0..offloaders.len() {
        let pinned: f64 = offloaders.iter().filter(|&&i| clamped[i]).map(|&i| floor[i]).sum();
        let residual = (budget - pinned).max(0.0);
        let root_sum: f64 = offloaders
            .iter()
            .filter(|&&i| !clamped[i])
            .map(|&i| weight[i].sqrt())
            .sum();
        let mut changed = false;
        for &i in &offloaders {
            if clamped[i] {
                f[i] = floor[i];
            } else {
                f[i] = residual * weight[i].sqrt() / root_sum;
                if f[i] < floor[i] {
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        for &i in &offloaders {
            if !clamped[i] && f[i] < floor[i] {
                clamped[i] = true;
            }
        }
    }
    for &i in &offloaders {
        if clamped[i] {
            f[i] = floor[i];
        }
    }

    let ratios = (0..n)
        .map(|i| if decision.offloads(i) { (f[i] / budget).min(1.0) } else { 0.0 })
        .collect();
    Some(InnerAllocation {
        allocation: Allocation(ratios),
        clamped,
        marginal_weight: weight,
    })
}

/// Enumerates every decision and solves each inner allocation exactly.
pub fn exact_enum(scenario: &Scenario, config: &SolverConfig) -> Result<Option<Solution>> {
    let start = Instant::now();
    let n = scenario.len();
    if n > EXACT_MAX_DEVICES {
        return Err(Error::TooManyDevices {
            solver: "exact",
            n,
            max: EXACT_MAX_DEVICES,
        });
    }
    let mut best = None;
    for class in 0..1usize << n {
        let decision = Decision::from_class(class, n);
        if !locals_meet_deadline(scenario, &decision) {
            continue;
        }
        let Some(inner) = inner_allocation_detail(scenario, &decision, config.feasibility_tol)
        else {
            continue;
        };
        let allocation = inner.allocation;
        if !check_feasibility(scenario, &decision, &allocation).is_feasible() {
            continue;
        }
        let cost = total_cost(scenario, &decision, &allocation)?.total_cost;
        consider(
            &mut best,
            Candidate {
                cost,
                decision,
                allocation,
            },
            config.tie_break,
        );
    }
    Ok(finish(best, Method::Exact, start))
}

/// Dispatches to the solver named by `method` (`Grid` or `Exact`).
pub fn solve(method: Method, scenario: &Scenario, config: &SolverConfig) -> Result<Option<Solution>> {
    match method {
        Method::Grid => grid_exhaustive(scenario, config),
        Method::Exact => exact_enum(scenario, config),
        other => Err(Error::InvalidConfig(format!("`{other}` is not an optimization solver"))),
    }
}

/// Solves independent scenarios in parallel; results keep the input order.
pub fn solve_batch(
    method: Method,
    scenarios: &[Scenario],
    config: &SolverConfig,
) -> Result<Vec<Option<Solution>>> {
    config.validate()?;
    scenarios.par_iter().map(|s| solve(method, s, config)).collect()
}

/// One line of a batch solve output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRow {
    pub scenario_id: usize,
    pub method: Method,
    pub feasible: bool,
    /// Decision bits, device 0 first.
    pub decision: Option<String>,
    pub ratios: Option<Vec<f64>>,
    pub total_cost: Option<f64>,
    pub wall_time_s: f64,
}

impl SolutionRow {
    pub fn new(scenario_id: usize, method: Method, solution: Option<&Solution>) -> Self {
        SolutionRow {
            scenario_id,
            method,
            feasible: solution.is_some_and(|s| s.feasible),
            decision: solution.map(|s| s.decision.bit_string()),
            ratios: solution.map(|s| s.allocation.0.clone()),
            total_cost: solution.map(|s| s.total_cost),
            wall_time_s: solution.map_or(0.0, |s| s.wall_time_s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::fixtures::scenario;
    use crate::cost::{offload_cost, Feasibility};

    #[test]
    fn grid_points_enumerated_in_order() {
        let mut seen = Vec::new();
        for_each_grid_point(2, 3, &mut |p| seen.push(p.to_vec()));
        assert_eq!(seen, vec![vec![1, 1], vec![1, 2], vec![2, 1]]);

        let mut count = 0;
        for_each_grid_point(0, 10, &mut |p| {
            assert!(p.is_empty());
            count += 1;
        });
        assert_eq!(count, 1);

        let mut count3 = 0;
        for_each_grid_point(3, 10, &mut |_| count3 += 1);
        // compositions of at most 10 into 3 positive parts: C(10, 3)
        assert_eq!(count3, 120);
    }

    #[test]
    fn grid_steps_validation() {
        assert_eq!(SolverConfig::default().grid_steps().unwrap(), 10);
        assert_eq!(SolverConfig::with_granularity(0.01).grid_steps().unwrap(), 100);
        assert!(SolverConfig::with_granularity(0.3).grid_steps().is_err());
        assert!(SolverConfig::with_granularity(1.0).grid_steps().is_err());
    }

    #[test]
    fn bad_channel_forces_local() {
        let mut s = scenario(&[1e-30]);
        s.devices[0].task.max_delay_s = 1.0;
        let sol = grid_exhaustive(&s, &SolverConfig::default()).unwrap().unwrap();
        assert_eq!(sol.decision, Decision(vec![0]));
        assert_eq!(sol.allocation, Allocation(vec![0.0]));
    }

    #[test]
    fn slow_cpu_forces_offload() {
        let mut s = scenario(&[1e-10]);
        s.devices[0].local_cpu_hz = 1e6;
        let sol = grid_exhaustive(&s, &SolverConfig::default()).unwrap().unwrap();
        assert_eq!(sol.decision, Decision(vec![1]));
        // cost falls in Θ, so the grid minimizer is the full budget
        assert_eq!(sol.allocation, Allocation(vec![1.0]));
        let expected = offload_cost(&s, 0, s.mes_cpu_hz).unwrap().weighted_cost;
        assert_eq!(sol.total_cost, expected);
    }

    #[test]
    fn infeasible_scenario_is_none() {
        let mut s = scenario(&[1e-30, 1e-30]);
        for d in &mut s.devices {
            d.local_cpu_hz = 1e3;
        }
        assert!(grid_exhaustive(&s, &SolverConfig::default()).unwrap().is_none());
        assert!(exact_enum(&s, &SolverConfig::default()).unwrap().is_none());
    }

    #[test]
    fn inner_single_offloader_gets_all() {
        let s = scenario(&[1e-10, 1e-11]);
        let a = inner_allocation(&s, &Decision(vec![0, 1])).unwrap();
        assert_eq!(a, Allocation(vec![0.0, 1.0]));
    }

    #[test]
    fn inner_symmetric_split() {
        let s = scenario(&[1e-10, 1e-10]);
        let a = inner_allocation(&s, &Decision(vec![1, 1])).unwrap();
        assert!((a.0[0] - 0.5).abs() < 1e-15 && (a.0[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inner_sqrt_ratio() {
        // a_1 = 4·a_2 via cycles, everything else equal
        let mut s = scenario(&[1e-10, 1e-10]);
        s.devices[0].task.cpu_cycles = 4e8;
        s.devices[1].task.cpu_cycles = 1e8;
        for d in &mut s.devices {
            d.task.max_delay_s = 50.0;
        }
        let a = inner_allocation(&s, &Decision(vec![1, 1])).unwrap();
        assert!((a.0[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((a.0[1] - 1.0 / 3.0).abs() < 1e-12);

        // fine-grid search over Θ_1 with Θ_2 = 1 − Θ_1
        let cost = |t: f64| {
            total_cost(&s, &Decision(vec![1, 1]), &Allocation(vec![t, 1.0 - t]))
                .unwrap()
                .total_cost
        };
        let best = (1..1000)
            .map(|j| j as f64 / 1000.0)
            .min_by(|x, y| cost(*x).total_cmp(&cost(*y)))
            .unwrap();
        assert!((best - 2.0 / 3.0).abs() <= 1e-3);
    }

    #[test]
    fn inner_clamp_respects_floor() {
        let mut s = scenario(&[1e-10, 1e-10]);
        // device 1 is light but needs most of the budget to make its deadline
        s.devices[0].task.cpu_cycles = 1e9;
        s.devices[1].task.cpu_cycles = 1e8;
        s.devices[1].task.max_delay_s = 0.06;
        s.devices[0].task.max_delay_s = 100.0;
        let d = inner_allocation_detail(&s, &Decision(vec![1, 1]), 1e-9).unwrap();
        assert_eq!(d.clamped, vec![false, true]);
        let sum: f64 = d.allocation.0.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(
            check_feasibility(&s, &Decision(vec![1, 1]), &d.allocation),
            Feasibility::Feasible
        );
    }

    #[test]
    fn exact_dominates_grid_and_agrees_when_local() {
        let s = scenario(&[1e-10, 3e-12, 4e-11]);
        let cfg = SolverConfig::default();
        let g = grid_exhaustive(&s, &cfg).unwrap().unwrap();
        let e = exact_enum(&s, &cfg).unwrap().unwrap();
        assert!(e.total_cost <= g.total_cost + 1e-9);

        let mut local = scenario(&[1e-30, 1e-30]);
        for d in &mut local.devices {
            d.task.max_delay_s = 1.0;
        }
        let g = grid_exhaustive(&local, &cfg).unwrap().unwrap();
        let e = exact_enum(&local, &cfg).unwrap().unwrap();
        assert_eq!(g.decision, e.decision);
        assert_eq!(g.allocation, e.allocation);
        assert_eq!(g.total_cost, e.total_cost);
    }

    #[test]
    fn tie_prefers_fewer_offloaders() {
        let mk = |d: Vec<u8>, a: Vec<f64>| Candidate {
            cost: 1.0,
            decision: Decision(d),
            allocation: Allocation(a),
        };
        let rule = TieBreak::default();
        assert!(prefer(&mk(vec![1, 0], vec![1.0, 0.0]), &mk(vec![1, 1], vec![0.5, 0.5]), rule));
        assert!(prefer(&mk(vec![0, 1], vec![0.0, 1.0]), &mk(vec![1, 0], vec![1.0, 0.0]), rule));
        assert!(prefer(&mk(vec![1, 1], vec![0.4, 0.6]), &mk(vec![1, 1], vec![0.5, 0.5]), rule));
        let mut cheaper = mk(vec![1, 1], vec![0.5, 0.5]);
        cheaper.cost = 0.5;
        assert!(prefer(&cheaper, &mk(vec![0, 0], vec![0.0, 0.0]), rule));
    }

    #[test]
    fn too_many_devices_rejected() {
        let s = scenario(&[1e-11; 9]);
        assert!(matches!(
            grid_exhaustive(&s, &SolverConfig::default()),
            Err(Error::TooManyDevices { .. })
        ));
    }
}
