//! Labeled data: scenario sampling, feature scaling, oracle labeling and the
//! on-disk dataset format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{Decision, Device, RadioConfig, Scenario, Task, DEFAULT_IDLE_POWER_W, DEFAULT_TX_POWER_W};
use crate::error::{Error, Result};
use crate::rng;
use crate::solver::{solve, Method, SolverConfig};

pub const DATASET_SCHEMA: &str = "offload-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const TRAIN_FRACTION: f64 = 0.8;

/// A sample is redrawn at most this many times before generation gives up.
pub(crate) const MAX_REDRAWS_PER_SAMPLE: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn uniform(&self, rng: &mut impl Rng) -> f64 {
        self.lo + (self.hi - self.lo) * rng.gen::<f64>()
    }

    fn log_uniform(&self, rng: &mut impl Rng) -> f64 {
        let (a, b) = (self.lo.log10(), self.hi.log10());
        10f64.powf(a + (b - a) * rng.gen::<f64>())
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub data_bits: Range,
    pub cpu_cycles: Range,
    pub local_cpu_hz: Range,
    pub weight_delay: Range,
    /// Sampled log-uniformly.
    pub channel_gain: Range,
    pub max_delay_s: Range,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            data_bits: Range::new(1e3, 5e5),
            cpu_cycles: Range::new(3e6, 1.5e9),
            local_cpu_hz: Range::new(1.0, 1e9),
            weight_delay: Range::new(0.0, 1.0),
            channel_gain: Range::new(1e-13, 1e-9),
            max_delay_s: Range::new(0.5, 5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticParams {
    pub bandwidth_hz: f64,
    pub noise_power_w: f64,
    pub energy_coeff: f64,
    pub mes_cpu_hz: f64,
    pub tx_power_w: f64,
    pub idle_power_w: f64,
}

impl Default for StaticParams {
    fn default() -> Self {
        StaticParams {
            bandwidth_hz: 1e6,
            noise_power_w: 7.9e-13,
            energy_coeff: 1e-28,
            mes_cpu_hz: 2.5e9,
            tx_power_w: DEFAULT_TX_POWER_W,
            idle_power_w: DEFAULT_IDLE_POWER_W,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_devices: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub ranges: ParamRanges,
    pub statics: StaticParams,
    pub label_method: Method,
    pub granularity: f64,
    /// Append the tolerable delay as a seventh per-device feature.
    pub delay_feature: bool,
}

impl GenConfig {
    pub fn new(n_devices: usize, n_samples: usize, seed: u64) -> Self {
        GenConfig {
            n_devices,
            n_samples,
            seed,
            ranges: ParamRanges::default(),
            statics: StaticParams::default(),
            label_method: Method::Grid,
            granularity: 0.1,
            delay_feature: false,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig::with_granularity(self.granularity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_devices == 0 || self.n_devices > crate::cost::MAX_DEVICES {
            return bad(format!("n_devices {} out of range", self.n_devices));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        let r = &self.ranges;
        for (name, range) in [
            ("data_bits", r.data_bits),
            ("cpu_cycles", r.cpu_cycles),
            ("local_cpu_hz", r.local_cpu_hz),
            ("weight_delay", r.weight_delay),
            ("channel_gain", r.channel_gain),
            ("max_delay_s", r.max_delay_s),
        ] {
            if !(range.lo.is_finite() && range.hi.is_finite() && range.lo <= range.hi) {
                return bad(format!("range {name} [{}, {}] is empty", range.lo, range.hi));
            }
        }
        if r.weight_delay.lo < 0.0 || r.weight_delay.hi > 1.0 {
            return bad("weight_delay range must lie in [0, 1]".into());
        }
        for (name, range) in [
            ("data_bits", r.data_bits),
            ("cpu_cycles", r.cpu_cycles),
            ("local_cpu_hz", r.local_cpu_hz),
            ("channel_gain", r.channel_gain),
            ("max_delay_s", r.max_delay_s),
        ] {
            if range.lo <= 0.0 {
                return bad(format!("range {name} must be strictly positive"));
            }
        }
        if !matches!(self.label_method, Method::Grid | Method::Exact) {
            return bad(format!("label method `{}` is not a solver", self.label_method));
        }
        self.solver_config().validate()
    }
}

/// Draws one scenario from the configured ranges.
pub fn sample_scenario(config: &GenConfig, rng: &mut impl Rng) -> Scenario {
    let r = &config.ranges;
    let st = &config.statics;
    let devices = (0..config.n_devices)
        .map(|id| {
            let data_bits = r.data_bits.uniform(rng);
            let cpu_cycles = r.cpu_cycles.uniform(rng);
            let local_cpu_hz = r.local_cpu_hz.uniform(rng);
            let weight_delay = r.weight_delay.uniform(rng);
            let channel_gain = r.channel_gain.log_uniform(rng);
            let max_delay_s = r.max_delay_s.uniform(rng);
            Device {
                id,
                task: Task {
                    data_bits,
                    cpu_cycles,
                    max_delay_s,
                },
                local_cpu_hz,
                channel_gain,
                weight_delay,
                weight_energy: 1.0 - weight_delay,
                energy_coeff: st.energy_coeff,
            }
        })
        .collect();
    let n = config.n_devices;
    Scenario {
        devices,
        radio: RadioConfig {
            bandwidth_hz: st.bandwidth_hz,
            noise_power_w: st.noise_power_w,
            tx_power_w: vec![st.tx_power_w; n],
            idle_power_w: vec![st.idle_power_w; n],
        },
        mes_cpu_hz: st.mes_cpu_hz,
    }
}

pub fn encode_decision(decision: &Decision) -> usize {
    decision.class_index()
}

pub fn decode_class(class: usize, n: usize) -> Result<Decision> {
    if n >= usize::BITS as usize || class >= 1usize << n {
        return Err(Error::ClassOutOfRange { class, n });
    }
    Ok(Decision::from_class(class, n))
}

/// Min-max scaling of one per-device feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    /// Scale `log10(x)` instead of `x`.
    pub log: bool,
}

impl FeatureScale {
    fn new(name: &str, range: Range, log: bool) -> Self {
        FeatureScale {
            name: name.to_string(),
            lo: range.lo,
            hi: range.hi,
            log,
        }
    }

    fn bounds(&self) -> (f64, f64) {
        if self.log {
            (self.lo.log10(), self.hi.log10())
        } else {
            (self.lo, self.hi)
        }
    }

    pub fn scale(&self, x: f64) -> f64 {
        self.scale_within(self.bounds(), x)
    }

    fn scale_within(&self, (a, b): (f64, f64), x: f64) -> f64 {
        let v = if self.log { x.log10() } else { x };
        if b > a {
            (v - a) / (b - a)
        } else {
            0.0
        }
    }

    pub fn unscale(&self, y: f64) -> f64 {
        let (a, b) = self.bounds();
        let v = a + y * (b - a);
        if self.log {
            10f64.powf(v)
        } else {
            v
        }
    }
}

/// Maps scenarios to network inputs using fixed range endpoints, so scaling
/// never depends on the batch being scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub n_devices: usize,
    /// Per-device feature layout; the input vector is device-major.
    pub per_device: Vec<FeatureScale>,
}

impl FeatureScaler {
    pub fn from_config(config: &GenConfig) -> Self {
        let r = &config.ranges;
        let mut per_device = vec![
            FeatureScale::new("s_bits", r.data_bits, false),
            FeatureScale::new("c_cycles", r.cpu_cycles, false),
            FeatureScale::new("f_l_hz", r.local_cpu_hz, false),
            FeatureScale::new("h_sq", r.channel_gain, true),
            FeatureScale::new("alpha", r.weight_delay, false),
            FeatureScale::new("beta", Range::new(1.0 - r.weight_delay.hi, 1.0 - r.weight_delay.lo), false),
        ];
        if config.delay_feature {
            per_device.push(FeatureScale::new("theta_s", r.max_delay_s, false));
        }
        FeatureScaler {
            n_devices: config.n_devices,
            per_device,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.n_devices * self.per_device.len()
    }

    fn raw_values(&self, d: &Device) -> impl Iterator<Item = f64> + '_ {
        let all = [
            d.task.data_bits,
            d.task.cpu_cycles,
            d.local_cpu_hz,
            d.channel_gain,
            d.weight_delay,
            d.weight_energy,
            d.task.max_delay_s,
        ];
        (0..self.per_device.len()).map(move |k| all[k])
    }

    pub fn raw_features(&self, scenario: &Scenario) -> Result<Vec<f64>> {
        self.check(scenario)?;
        Ok(scenario.devices.iter().flat_map(|d| self.raw_values(d)).collect())
    }

    pub fn encode_into(&self, scenario: &Scenario, out: &mut Vec<f64>) -> Result<()> {
        self.check(scenario)?;
        out.clear();
        let mut bounds = [(0.0, 0.0); 7];
        for (slot, fs) in bounds.iter_mut().zip(&self.per_device) {
            *slot = fs.bounds();
        }
        for d in &scenario.devices {
            for ((fs, &ab), v) in self.per_device.iter().zip(&bounds).zip(self.raw_values(d)) {
                out.push(fs.scale_within(ab, v));
            }
        }
        Ok(())
    }

    pub fn encode(&self, scenario: &Scenario) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.input_dim());
        self.encode_into(scenario, &mut out)?;
        Ok(out)
    }

    pub fn scale(&self, raw: &[f64]) -> Vec<f64> {
        let k = self.per_device.len();
        raw.iter().enumerate().map(|(j, &x)| self.per_device[j % k].scale(x)).collect()
    }

    pub fn unscale(&self, scaled: &[f64]) -> Vec<f64> {
        let k = self.per_device.len();
        scaled.iter().enumerate().map(|(j, &y)| self.per_device[j % k].unscale(y)).collect()
    }

    fn check(&self, scenario: &Scenario) -> Result<()> {
        if scenario.len() != self.n_devices {
            return Err(Error::DimensionMismatch {
                what: "scenario devices",
                expected: self.n_devices,
                actual: scenario.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub split: Split,
    pub scenario: Scenario,
    pub features: Vec<f64>,
    pub class_label: usize,
    pub theta_labels: Vec<f64>,
    pub oracle_cost: f64,
}

impl Sample {
    pub fn decision(&self) -> Decision {
        Decision::from_class(self.class_label, self.scenario.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
    config: GenConfig,
    scaler: FeatureScaler,
    samples: usize,
    discarded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub scaler: FeatureScaler,
    pub samples: Vec<Sample>,
    /// Infeasible scenarios drawn and thrown away during generation.
    pub discarded: usize,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    pub fn to_text(&self) -> Result<String> {
        let header = Header {
            schema: DATASET_SCHEMA.to_string(),
            version: DATASET_VERSION,
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            samples: self.samples.len(),
            discarded: self.discarded,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::parse(1, "empty dataset file"))?;
        let header: Header =
            serde_json::from_str(first).map_err(|e| Error::parse(1, format!("header: {e}")))?;
        if header.schema != DATASET_SCHEMA {
            return Err(Error::parse(1, format!("unknown schema `{}`", header.schema)));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "dataset",
                found: header.version,
                expected: DATASET_VERSION,
            });
        }
        let mut samples = Vec::with_capacity(header.samples);
        for (idx, line) in lines {
            let s: Sample =
                serde_json::from_str(line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
            if s.scenario.len() != header.config.n_devices
                || s.features.len() != header.scaler.input_dim()
                || s.theta_labels.len() != header.config.n_devices
            {
                return Err(Error::parse(idx + 1, "sample dimensions disagree with header"));
            }
            samples.push(s);
        }
        if samples.len() != header.samples {
            return Err(Error::parse(
                text.lines().count(),
                format!("header announces {} samples, found {}", header.samples, samples.len()),
            ));
        }
        Ok(Dataset {
            config: header.config,
            scaler: header.scaler,
            samples,
            discarded: header.discarded,
        })
    }
}

pub(crate) fn is_dataset_text(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.starts_with(&format!("{{\"schema\":\"{DATASET_SCHEMA}\"")))
}

struct Labeled {
    scenario: Scenario,
    class_label: usize,
    theta_labels: Vec<f64>,
    oracle_cost: f64,
    discarded: usize,
}

fn label_one(config: &GenConfig, solver: &SolverConfig, index: usize) -> Result<Labeled> {
    let mut rng = rng::stream(config.seed, "dataset", index as u64);
    for discarded in 0..MAX_REDRAWS_PER_SAMPLE {
        let scenario = sample_scenario(config, &mut rng);
        if let Some(sol) = solve(config.label_method, &scenario, solver)? {
            return Ok(Labeled {
                class_label: sol.decision.class_index(),
                theta_labels: sol.allocation.0,
                oracle_cost: sol.total_cost,
                scenario,
                discarded,
            });
        }
    }
    Err(Error::PathologicalRanges {
        discarded: MAX_REDRAWS_PER_SAMPLE,
        drawn: MAX_REDRAWS_PER_SAMPLE,
    })
}

/// Row indices that land in the training split for `n` samples.
pub fn train_membership(seed: u64, n: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split", 0));
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut member = vec![false; n];
    for &i in &order[..n_train] {
        member[i] = true;
    }
    member
}

/// Draws, labels and splits `n_samples` feasible scenarios.
///
/// Infeasible draws are discarded and redrawn; if more than half of all
/// draws were infeasible the configured ranges are rejected.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let solver = config.solver_config();
    let scaler = FeatureScaler::from_config(config);
    let labeled: Vec<Labeled> = (0..config.n_samples)
        .into_par_iter()
        .map(|k| label_one(config, &solver, k))
        .collect::<Result<_>>()?;

    let discarded: usize = labeled.iter().map(|l| l.discarded).sum();
    let drawn = discarded + config.n_samples;
    if 2 * discarded > drawn {
        return Err(Error::PathologicalRanges { discarded, drawn });
    }

    let train = train_membership(config.seed, config.n_samples);
    let samples = labeled
        .into_iter()
        .enumerate()
        .map(|(id, l)| {
            Ok(Sample {
                id,
                split: if train[id] { Split::Train } else { Split::Test },
                features: scaler.encode(&l.scenario)?,
                scenario: l.scenario,
                class_label: l.class_label,
                theta_labels: l.theta_labels,
                oracle_cost: l.oracle_cost,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        scaler,
        samples,
        discarded,
    })
}
