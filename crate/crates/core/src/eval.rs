//! Accuracy, regression error, latency and cost-gap metrics, plus the
//! regression-surface sweep used for plotting predicted ratios.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{Allocation, Decision, Scenario};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::mtfnn::{infer, infer_with, MtfnnModel, Scratch};
use crate::solver::{exact_enum, grid_exhaustive, Method, Solution, SolverConfig};

pub const REPORT_SCHEMA: &str = "offload-eval";
pub const REPORT_VERSION: u32 = 1;

/// Fewest samples [`latency`] will time.
pub const MIN_TIMING_SAMPLES: usize = 100;

/// Fraction of predicted classes equal to the label class.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: predictions.len(),
            actual: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("accuracy needs at least one sample".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// `1/(mN) · ΣΣ (y − x)²` over `m` samples of `n` ratios each.
pub fn regression_mse(predicted: &[Vec<f64>], labels: &[Vec<f64>], n: usize) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "ratio labels",
            expected: predicted.len(),
            actual: labels.len(),
        });
    }
    if predicted.is_empty() || n == 0 {
        return Err(Error::InvalidConfig("regression MSE needs at least one sample".into()));
    }
    let mut sum = 0.0;
    for (y, x) in predicted.iter().zip(labels) {
        if y.len() != n || x.len() != n {
            return Err(Error::DimensionMismatch {
                what: "ratio vector",
                expected: n,
                actual: y.len().min(x.len()),
            });
        }
        sum += y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / (predicted.len() * n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub method: Method,
    pub per_sample_s: f64,
    pub samples: usize,
    pub environment: String,
}

fn environment() -> String {
    format!(
        "{}-{}, {} logical cpus, single-threaded timing",
        std::env::consts::ARCH,
        std::env::consts::OS,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

/// Wall-clock time per scenario of `run`, after one untimed warm-up pass.
pub fn latency<F>(method: Method, scenarios: &[Scenario], mut run: F) -> Result<Latency>
where
    F: FnMut(&Scenario) -> Result<()>,
{
    if scenarios.len() < MIN_TIMING_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "timing needs at least {MIN_TIMING_SAMPLES} samples, got {}",
            scenarios.len()
        )));
    }
    for s in scenarios.iter().take(MIN_TIMING_SAMPLES) {
        run(s)?;
    }
    let start = Instant::now();
    for s in scenarios {
        run(s)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(Latency {
        method,
        // a zero reading only means the timer is coarser than the run
        per_sample_s: (elapsed / scenarios.len() as f64).max(f64::MIN_POSITIVE),
        samples: scenarios.len(),
        environment: environment(),
    })
}

/// Per-sample inference time of `model`, including feature scaling and
/// post-processing.
pub fn model_latency(model: &MtfnnModel, scenarios: &[Scenario]) -> Result<Latency> {
    let mut scratch = Scratch::default();
    latency(Method::Mtfnn, scenarios, |s| {
        std::hint::black_box(infer_with(model, s, &mut scratch)?);
        Ok(())
    })
}

pub fn solver_latency(method: Method, scenarios: &[Scenario], config: &SolverConfig) -> Result<Latency> {
    latency(method, scenarios, |s| {
        std::hint::black_box(crate::solver::solve(method, s, config)?);
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostGap {
    /// Mean realized-to-oracle cost ratio over samples whose realized
    /// solution is feasible.
    pub mean_ratio: Option<f64>,
    pub costed: usize,
    /// Predictions that violated a constraint and were replaced by all-local.
    pub infeasible_predictions: usize,
    /// Of those, repairs that still miss a deadline.
    pub infeasible_repairs: usize,
    /// Mean ratio over every sample, infeasible repairs included.
    pub mean_ratio_all: f64,
}

/// Realized solution: the prediction when feasible, otherwise all-local.
pub fn repair(scenario: &Scenario, prediction: &Solution) -> Result<(Solution, bool)> {
    if prediction.feasible {
        return Ok((prediction.clone(), false));
    }
    let n = scenario.len();
    let local = Solution::evaluate(scenario, Decision::all_local(n), Allocation::zeros(n), Method::AllLocal)?;
    Ok((local, true))
}

/// Compares predicted solutions against oracle costs for the same scenarios.
pub fn cost_gap(predictions: &[Solution], scenarios: &[Scenario], oracle_costs: &[f64]) -> Result<CostGap> {
    if predictions.len() != scenarios.len() || oracle_costs.len() != scenarios.len() {
        return Err(Error::DimensionMismatch {
            what: "cost gap inputs",
            expected: scenarios.len(),
            actual: predictions.len().min(oracle_costs.len()),
        });
    }
    if scenarios.is_empty() {
        return Err(Error::InvalidConfig("cost gap needs at least one sample".into()));
    }
    let mut feasible_sum = 0.0;
    let mut all_sum = 0.0;
    let mut costed = 0;
    let mut infeasible_predictions = 0;
    let mut infeasible_repairs = 0;
    for ((p, s), &oracle) in predictions.iter().zip(scenarios).zip(oracle_costs) {
        let (realized, repaired) = repair(s, p)?;
        infeasible_predictions += usize::from(repaired);
        let ratio = realized.total_cost / oracle;
        all_sum += ratio;
        if realized.feasible {
            feasible_sum += ratio;
            costed += 1;
        } else {
            infeasible_repairs += 1;
        }
    }
    Ok(CostGap {
        mean_ratio: (costed > 0).then(|| feasible_sum / costed as f64),
        costed,
        infeasible_predictions,
        infeasible_repairs,
        mean_ratio_all: all_sum / scenarios.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub samples: usize,
    /// Exact-match rate of the decision class against the dataset labels.
    pub accuracy: f64,
    /// Mean squared error of the emitted ratios against the dataset labels.
    pub mse: f64,
    /// Same error for the regression head's output before masking and
    /// normalization; only models have one.
    pub mse_raw: Option<f64>,
    /// Share of emitted solutions that satisfy C1–C4.
    pub feasibility_rate: f64,
    pub cost_gap: CostGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: u32,
    pub n_devices: usize,
    pub test_samples: usize,
    pub label_method: Method,
    pub methods: Vec<MethodReport>,
    /// Per-sample execution times; absent from deterministic reports.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latency: Vec<Latency>,
    pub notes: String,
}

const REPORT_NOTES: &str = "accuracy: exact-match rate of decision class vs label; mse: mean over m*N \
squared ratio errors of emitted (post-processed) ratios vs labels; mse_raw: same for the \
regression head output before post-processing; cost ratios are vs the exact \
enumeration oracle, infeasible predictions repaired to all-local; latency covers feature scaling, \
forward pass and post-processing, excluding file I/O";

fn method_report(
    method: Method,
    samples: &[&Sample],
    solutions: &[Solution],
    raw_ratios: Option<&[Vec<f64>]>,
    oracle_costs: &[f64],
) -> Result<MethodReport> {
    let n = samples.first().map_or(0, |s| s.scenario.len());
    let predicted: Vec<usize> = solutions.iter().map(|s| s.decision.class_index()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    let ratios: Vec<Vec<f64>> = solutions.iter().map(|s| s.allocation.0.clone()).collect();
    let label_ratios: Vec<Vec<f64>> = samples.iter().map(|s| s.theta_labels.clone()).collect();
    let scenarios: Vec<Scenario> = samples.iter().map(|s| s.scenario.clone()).collect();
    let feasible = solutions.iter().filter(|s| s.feasible).count();
    Ok(MethodReport {
        method,
        samples: samples.len(),
        accuracy: accuracy(&predicted, &labels)?,
        mse: regression_mse(&ratios, &label_ratios, n)?,
        mse_raw: raw_ratios.map(|r| regression_mse(r, &label_ratios, n)).transpose()?,
        feasibility_rate: feasible as f64 / samples.len() as f64,
        cost_gap: cost_gap(solutions, &scenarios, oracle_costs)?,
    })
}

/// Scores the model, and the exact baseline, on the test split.
pub fn evaluate(model: &MtfnnModel, dataset: &Dataset) -> Result<EvalReport> {
    let test: Vec<&Sample> = dataset.test().collect();
    if test.is_empty() {
        return Err(Error::InvalidConfig("dataset has no test samples".into()));
    }
    let solver = dataset.config.solver_config();
    let exact: Vec<Solution> = test
        .par_iter()
        .map(|s| {
            exact_enum(&s.scenario, &solver)?
                .map(Solution::without_timing)
                .ok_or_else(|| Error::InvalidScenario(format!("test sample {} has no exact solution", s.id)))
        })
        .collect::<Result<_>>()?;
    let oracle: Vec<f64> = exact.iter().map(|s| s.total_cost).collect();
    let predicted: Vec<Solution> = test
        .par_iter()
        .map(|s| infer(model, &s.scenario).map(Solution::without_timing))
        .collect::<Result<_>>()?;
    let raw: Vec<Vec<f64>> = test
        .par_iter()
        .map(|s| model.forward(&s.features).map(|o| o.ratios))
        .collect::<Result<_>>()?;

    Ok(EvalReport {
        schema: REPORT_SCHEMA.to_string(),
        version: REPORT_VERSION,
        n_devices: dataset.config.n_devices,
        test_samples: test.len(),
        label_method: dataset.config.label_method,
        methods: vec![
            method_report(Method::Mtfnn, &test, &predicted, Some(&raw), &oracle)?,
            method_report(Method::Exact, &test, &exact, None, &oracle)?,
        ],
        latency: Vec::new(),
        notes: REPORT_NOTES.to_string(),
    })
}

/// Times the model and both solvers on the test split's scenarios.
pub fn time_methods(model: &MtfnnModel, dataset: &Dataset) -> Result<Vec<Latency>> {
    let scenarios: Vec<Scenario> = dataset.test().map(|s| s.scenario.clone()).collect();
    let solver = dataset.config.solver_config();
    Ok(vec![
        model_latency(model, &scenarios)?,
        solver_latency(Method::Grid, &scenarios, &solver)?,
        solver_latency(Method::Exact, &scenarios, &solver)?,
    ])
}

impl EvalReport {
    pub fn to_text(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::parse(1, format!("unknown report schema `{}`", r.schema)));
        }
        if r.version != REPORT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "report",
                found: r.version,
                expected: REPORT_VERSION,
            });
        }
        Ok(r)
    }

    /// Flat comma-separated table, one row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,samples,accuracy,mse,mse_raw,feasibility_rate,cost_ratio_feasible,cost_ratio_all,\
             infeasible_predictions,infeasible_repairs,latency_s_per_sample\n",
        );
        for m in &self.methods {
            let t = self
                .latency
                .iter()
                .find(|l| l.method == m.method)
                .map_or(String::new(), |l| format!("{:e}", l.per_sample_s));
            let g = &m.cost_gap;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                m.method,
                m.samples,
                m.accuracy,
                m.mse,
                m.mse_raw.map_or(String::new(), |v| v.to_string()),
                m.feasibility_rate,
                g.mean_ratio.map_or(String::new(), |v| v.to_string()),
                g.mean_ratio_all,
                g.infeasible_predictions,
                g.infeasible_repairs,
                t
            ));
        }
        out
    }
}

/// Scenario field varied by [`regression_surface`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepField {
    DataBits,
    CpuCycles,
    LocalCpuHz,
    ChannelGain,
    /// Sets α and β = 1 − α.
    WeightDelay,
    MaxDelay,
}

impl SweepField {
    /// Field name as used in scenario files.
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepField::DataBits => "s_bits",
            SweepField::CpuCycles => "c_cycles",
            SweepField::LocalCpuHz => "f_l_hz",
            SweepField::ChannelGain => "h_sq",
            SweepField::WeightDelay => "alpha",
            SweepField::MaxDelay => "theta_s",
        }
    }
}

impl std::str::FromStr for SweepField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "s_bits" | "data_bits" => SweepField::DataBits,
            "c_cycles" | "cpu_cycles" => SweepField::CpuCycles,
            "f_l_hz" | "local_cpu_hz" => SweepField::LocalCpuHz,
            "h_sq" | "channel_gain" => SweepField::ChannelGain,
            "alpha" | "weight_delay" => SweepField::WeightDelay,
            "theta_s" | "max_delay" => SweepField::MaxDelay,
            other => return Err(Error::InvalidConfig(format!("unknown sweep field `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub device: usize,
    pub field: SweepField,
}

impl Sweep {
    pub fn apply(&self, base: &Scenario, value: f64) -> Scenario {
        let mut s = base.clone();
        let d = &mut s.devices[self.device];
        match self.field {
            SweepField::DataBits => d.task.data_bits = value,
            SweepField::CpuCycles => d.task.cpu_cycles = value,
            SweepField::LocalCpuHz => d.local_cpu_hz = value,
            SweepField::ChannelGain => d.channel_gain = value,
            SweepField::WeightDelay => {
                d.weight_delay = value;
                d.weight_energy = 1.0 - value;
            }
            SweepField::MaxDelay => d.task.max_delay_s = value,
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub value: f64,
    pub predicted: Vec<f64>,
    /// Grid-oracle ratios; `None` where the swept scenario is infeasible.
    pub oracle: Option<Vec<f64>>,
}

/// Predicted and grid-oracle ratios along one swept scenario field.
pub fn regression_surface(
    model: &MtfnnModel,
    base: &Scenario,
    sweep: Sweep,
    values: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<SurfaceRow>> {
    if sweep.device >= base.len() {
        return Err(Error::InvalidConfig(format!("sweep device {} out of range", sweep.device)));
    }
    values
        .iter()
        .map(|&v| {
            let s = sweep.apply(base, v);
            let predicted = infer(model, &s)?.allocation.0;
            let oracle = grid_exhaustive(&s, solver)?.map(|sol| sol.allocation.0);
            Ok(SurfaceRow {
                value: v,
                predicted,
                oracle,
            })
        })
        .collect()
}

/// `<field>_<device>,pred_theta_1..N,oracle_theta_1..N` with empty oracle cells for
/// infeasible rows.
pub fn surface_csv(sweep: Sweep, rows: &[SurfaceRow], n: usize) -> String {
    let mut header = vec![format!("{}_{}", sweep.field.as_str(), sweep.device + 1)];
    header.extend((1..=n).map(|i| format!("pred_theta_{i}")));
    header.extend((1..=n).map(|i| format!("oracle_theta_{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let mut cells = vec![format!("{:e}", r.value)];
        cells.extend(r.predicted.iter().map(|v| v.to_string()));
        match &r.oracle {
            Some(o) => cells.extend(o.iter().map(|v| v.to_string())),
            None => cells.extend(std::iter::repeat_n(String::new(), n)),
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};
    use crate::mtfnn::MtfnnArch;

    #[test]
    fn accuracy_definition() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let mut pred = labels.clone();
        assert_eq!(accuracy(&pred, &labels).unwrap(), 1.0);
        for p in pred.iter_mut().take(4) {
            *p = (*p + 1) % 4;
        }
        assert_eq!(accuracy(&pred, &labels).unwrap(), 0.96);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn mse_definition() {
        let e = regression_mse(&[vec![0.5, 0.5]], &[vec![0.4, 0.6]], 2).unwrap();
        assert!((e - 0.01).abs() < 1e-15);
        assert_eq!(regression_mse(&[vec![0.3, 0.7]], &[vec![0.3, 0.7]], 2).unwrap(), 0.0);
    }

    #[test]
    fn metrics_match_hand_recomputation() {
        // ten-sample fixture, recomputed by straight loops
        let pred = [0usize, 1, 2, 3, 1, 1, 0, 2, 3, 3];
        let lab = [0usize, 1, 2, 2, 1, 0, 0, 2, 3, 1];
        let y: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 * i as f64, 1.0 - 0.1 * i as f64]).collect();
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![0.05 * i as f64, 0.5]).collect();
        let mut hits = 0;
        let mut sq = 0.0;
        for i in 0..10 {
            if pred[i] == lab[i] {
                hits += 1;
            }
            for j in 0..2 {
                sq += (y[i][j] - x[i][j]).powi(2);
            }
        }
        assert_eq!(accuracy(&pred, &lab).unwrap(), hits as f64 / 10.0);
        assert_eq!(regression_mse(&y, &x, 2).unwrap(), sq / 20.0);
    }

    #[test]
    fn latency_rejects_small_batches_and_is_positive() {
        let ds = generate(&GenConfig::new(2, 150, 3)).unwrap();
        let scen: Vec<Scenario> = ds.samples.iter().map(|s| s.scenario.clone()).collect();
        assert!(latency(Method::Grid, &scen[..50], |_| Ok(())).is_err());
        let t = solver_latency(Method::Exact, &scen, &SolverConfig::default()).unwrap();
        assert!(t.per_sample_s > 0.0 && t.per_sample_s.is_finite());
        assert_eq!(t.samples, 150);
    }

    #[test]
    fn evaluate_and_round_trip() {
        let ds = generate(&GenConfig::new(2, 60, 5)).unwrap();
        let model = MtfnnModel::init(MtfnnArch::for_scaler(&ds.scaler), ds.scaler.clone(), 1).unwrap();
        let report = evaluate(&model, &ds).unwrap();
        assert_eq!(report.test_samples, 12);
        for m in &report.methods {
            assert!((0.0..=1.0).contains(&m.accuracy));
            assert!(m.mse >= 0.0);
            if let Some(r) = m.cost_gap.mean_ratio {
                assert!(r >= 1.0 - 1e-9);
            }
        }
        let exact = &report.methods[1];
        assert_eq!(exact.feasibility_rate, 1.0);
        assert!((exact.cost_gap.mean_ratio.unwrap() - 1.0).abs() < 1e-12);
        let back = EvalReport::parse(&report.to_text().unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.to_csv().lines().count(), 3);
    }

    #[test]
    fn constant_model_surface() {
        let ds = generate(&GenConfig::new(3, 10, 2)).unwrap();
        let model = MtfnnModel::zeroed(MtfnnArch::for_scaler(&ds.scaler), ds.scaler.clone()).unwrap();
        let sweep = Sweep {
            device: 0,
            field: SweepField::CpuCycles,
        };
        let values: Vec<f64> = (1..=5).map(|k| k as f64 * 2e8).collect();
        let rows = regression_surface(&model, &ds.samples[0].scenario, sweep, &values, &SolverConfig::default()).unwrap();
        assert!(rows.windows(2).all(|w| w[0].predicted == w[1].predicted));
        for r in &rows {
            if let Some(o) = &r.oracle {
                assert!(o.iter().sum::<f64>() <= 1.0 + 1e-9);
            }
        }
        let csv = surface_csv(sweep, &rows, 3);
        assert_eq!(csv.lines().count(), 6);
    }
}
