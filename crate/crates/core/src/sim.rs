//! Frame-based policy replay. Each frame draws one scenario, static for the
//! frame, and every policy decides on that same scenario.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{check_feasibility, Allocation, Decision, Feasibility, Scenario};
use crate::dataset::{sample_scenario, GenConfig, ParamRanges, StaticParams, MAX_REDRAWS_PER_SAMPLE};
use crate::error::{Error, Result};
use crate::eval::repair;
use crate::mtfnn::{infer, MtfnnModel};
use crate::rng;
use crate::solver::{exact_enum, Method, Solution, SolverConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PolicySpec {
    Oracle,
    Mtfnn(PathBuf),
    AllLocal,
    AllOffloadEqual,
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Oracle => f.write_str("oracle"),
            PolicySpec::Mtfnn(p) => write!(f, "mtfnn:{}", p.display()),
            PolicySpec::AllLocal => f.write_str("all_local"),
            PolicySpec::AllOffloadEqual => f.write_str("all_offload_equal"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "oracle" => Ok(PolicySpec::Oracle),
            "all_local" => Ok(PolicySpec::AllLocal),
            "all_offload_equal" => Ok(PolicySpec::AllOffloadEqual),
            other => match other.strip_prefix("mtfnn:") {
                Some(path) if !path.is_empty() => Ok(PolicySpec::Mtfnn(PathBuf::from(path))),
                _ => Err(Error::InvalidConfig(format!(
                    "unknown policy `{other}` (expected oracle, mtfnn:<model file>, all_local or all_offload_equal)"
                ))),
            },
        }
    }
}

impl From<PolicySpec> for String {
    fn from(p: PolicySpec) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for PolicySpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Parses a comma-separated policy list.
pub fn parse_policies(list: &str) -> Result<Vec<PolicySpec>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone)]
pub enum Policy {
    Oracle,
    Mtfnn { name: String, model: Arc<MtfnnModel> },
    AllLocal,
    AllOffloadEqual,
}

impl Policy {
    pub fn load(spec: &PolicySpec) -> Result<Self> {
        Ok(match spec {
            PolicySpec::Oracle => Policy::Oracle,
            PolicySpec::Mtfnn(path) => Policy::Mtfnn {
                name: spec.to_string(),
                model: Arc::new(MtfnnModel::load(path)?),
            },
            PolicySpec::AllLocal => Policy::AllLocal,
            PolicySpec::AllOffloadEqual => Policy::AllOffloadEqual,
        })
    }

    pub fn name(&self) -> String {
        match self {
            Policy::Oracle => "oracle".into(),
            Policy::Mtfnn { name, .. } => name.clone(),
            Policy::AllLocal => "all_local".into(),
            Policy::AllOffloadEqual => "all_offload_equal".into(),
        }
    }

    fn decide(&self, scenario: &Scenario, solver: &SolverConfig) -> Result<Solution> {
        let n = scenario.len();
        let sol = match self {
            Policy::Oracle => exact_enum(scenario, solver)?
                .ok_or_else(|| Error::InvalidScenario("oracle found no feasible solution".into()))?,
            Policy::Mtfnn { model, .. } => infer(model, scenario)?,
            Policy::AllLocal => {
                Solution::evaluate(scenario, Decision::all_local(n), Allocation::zeros(n), Method::AllLocal)?
            }
            Policy::AllOffloadEqual => policy_all_offload_equal(scenario)?,
        };
        Ok(sol.without_timing())
    }
}

/// Every device offloads and the MES splits its capacity evenly.
pub fn policy_all_offload_equal(scenario: &Scenario) -> Result<Solution> {
    let n = scenario.len();
    Solution::evaluate(
        scenario,
        Decision::all_offload(n),
        Allocation(vec![1.0 / n as f64; n]),
        Method::AllOffloadEqual,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_frames: usize,
    pub n_devices: usize,
    pub seed: u64,
    /// Per-frame task and channel distributions.
    pub ranges: ParamRanges,
    pub statics: StaticParams,
    pub policies: Vec<PolicySpec>,
}

impl SimConfig {
    pub fn new(n_frames: usize, n_devices: usize, seed: u64, policies: Vec<PolicySpec>) -> Self {
        SimConfig {
            n_frames,
            n_devices,
            seed,
            ranges: ParamRanges::default(),
            statics: StaticParams::default(),
            policies,
        }
    }

    fn gen_config(&self) -> GenConfig {
        let mut g = GenConfig::new(self.n_devices, self.n_frames.max(1), self.seed);
        g.ranges = self.ranges;
        g.statics = self.statics;
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::InvalidConfig("at least one frame is required".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::InvalidConfig("at least one policy is required".into()));
        }
        self.gen_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub policy: String,
    /// The policy's own decision, as emitted.
    pub solution: Solution,
    pub violation: Option<String>,
    /// Whether the emitted solution was replaced by all-local for costing.
    pub repaired: bool,
    pub realized_cost: f64,
    pub realized_feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    /// Scenarios drawn and rejected before this one because no feasible
    /// solution existed.
    pub redraws: usize,
    pub scenario: Scenario,
    pub outcomes: Vec<PolicyOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub frames: usize,
    /// Mean realized cost over every frame.
    pub mean_cost: f64,
    /// Share of frames whose emitted solution satisfied C1–C4.
    pub feasibility_rate: f64,
    pub repaired_frames: usize,
    /// Frames whose realized solution still misses a deadline.
    pub infeasible_frames: usize,
    /// Mean realized-to-oracle cost ratio over frames with a feasible
    /// realized solution; present when the oracle ran.
    pub mean_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub frames: Vec<FrameRecord>,
    pub summary: Vec<PolicySummary>,
}

fn outcome(policy: &Policy, scenario: &Scenario, solver: &SolverConfig) -> Result<PolicyOutcome> {
    let solution = policy.decide(scenario, solver)?;
    let violation = match check_feasibility(scenario, &solution.decision, &solution.allocation) {
        Feasibility::Feasible => None,
        Feasibility::Violated { constraint, device } => Some(match device {
            Some(d) => format!("{constraint}@{d}"),
            None => constraint.to_string(),
        }),
    };
    let (realized, repaired) = repair(scenario, &solution)?;
    Ok(PolicyOutcome {
        policy: policy.name(),
        violation,
        repaired,
        realized_cost: realized.total_cost,
        realized_feasible: realized.feasible,
        solution,
    })
}

/// Replays `policies` over the configured frames.
///
/// Frames where even the exact solver finds nothing feasible are redrawn,
/// so every frame has an oracle cost to compare against.
pub fn run(config: &SimConfig, policies: &[Policy]) -> Result<SimTrace> {
    config.validate()?;
    if policies.is_empty() {
        return Err(Error::InvalidConfig("at least one policy is required".into()));
    }
    for p in policies {
        if let Policy::Mtfnn { model, .. } = p {
            if model.arch.n_devices != config.n_devices {
                return Err(Error::DimensionMismatch {
                    what: "model device count",
                    expected: config.n_devices,
                    actual: model.arch.n_devices,
                });
            }
        }
    }
    let gen = config.gen_config();
    let solver = SolverConfig::default();
    let mut frames = Vec::with_capacity(config.n_frames);
    for frame in 0..config.n_frames {
        let mut rng = rng::stream(config.seed, "sim", frame as u64);
        let mut redraws = 0;
        let scenario = loop {
            let s = sample_scenario(&gen, &mut rng);
            if exact_enum(&s, &solver)?.is_some() {
                break s;
            }
            redraws += 1;
            if redraws >= MAX_REDRAWS_PER_SAMPLE {
                return Err(Error::PathologicalRanges {
                    discarded: redraws,
                    drawn: redraws,
                });
            }
        };
        let outcomes = policies
            .par_iter()
            .map(|p| outcome(p, &scenario, &solver))
            .collect::<Result<Vec<_>>>()?;
        frames.push(FrameRecord {
            frame,
            redraws,
            scenario,
            outcomes,
        });
    }
    let summary = summarize(&frames, policies);
    Ok(SimTrace { frames, summary })
}

fn summarize(frames: &[FrameRecord], policies: &[Policy]) -> Vec<PolicySummary> {
    let oracle = policies.iter().position(|p| matches!(p, Policy::Oracle));
    let q = frames.len() as f64;
    (0..policies.len())
        .map(|k| {
            let outs = frames.iter().map(|f| &f.outcomes[k]);
            let mean_cost = outs.clone().map(|o| o.realized_cost).sum::<f64>() / q;
            let feasible = outs.clone().filter(|o| o.solution.feasible).count();
            let mean_gap = oracle.and_then(|j| {
                let ratios: Vec<f64> = frames
                    .iter()
                    .filter(|f| f.outcomes[k].realized_feasible)
                    .map(|f| f.outcomes[k].realized_cost / f.outcomes[j].realized_cost)
                    .collect();
                (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
            });
            PolicySummary {
                policy: policies[k].name(),
                frames: frames.len(),
                mean_cost,
                feasibility_rate: feasible as f64 / q,
                repaired_frames: outs.clone().filter(|o| o.repaired).count(),
                infeasible_frames: outs.filter(|o| !o.realized_feasible).count(),
                mean_gap,
            }
        })
        .collect()
}

impl SimTrace {
    pub fn summary_for(&self, policy: &str) -> Option<&PolicySummary> {
        self.summary.iter().find(|s| s.policy == policy)
    }

    /// One row per frame and policy, then a `# summary` block with one row per
    /// policy. Ratio vectors are `;`-separated within their cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "frame,policy,decision,ratios,total_cost,feasible,violation,repaired,realized_cost,realized_feasible\n",
        );
        for f in &self.frames {
            for o in &f.outcomes {
                let ratios: Vec<String> = o.solution.allocation.0.iter().map(|r| r.to_string()).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    f.frame,
                    o.policy,
                    o.solution.decision.bit_string(),
                    ratios.join(";"),
                    o.solution.total_cost,
                    o.solution.feasible,
                    o.violation.as_deref().unwrap_or(""),
                    o.repaired,
                    o.realized_cost,
                    o.realized_feasible
                ));
            }
        }
        out.push_str("# summary\n");
        out.push_str("policy,frames,mean_cost,feasibility_rate,repaired_frames,infeasible_frames,mean_gap\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.policy,
                s.frames,
                s.mean_cost,
                s.feasibility_rate,
                s.repaired_frames,
                s.infeasible_frames,
                s.mean_gap.map_or(String::new(), |g| g.to_string())
            ));
        }
        out
    }
}
