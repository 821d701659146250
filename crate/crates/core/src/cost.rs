//! Delay, energy and weighted cost of local and offloaded execution under
//! uplink NOMA, and the feasibility check for constraints C1–C4.
//!
//! Everything is in SI base units: bits, cycles, Hz, seconds, joules, watts.
//! Channel gains are power gains `|h|²`; SINR is computed directly on powers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TX_POWER_W: f64 = 0.3;
pub const DEFAULT_IDLE_POWER_W: f64 = 0.1;

/// Relative slack allowed on the delay constraint and the C4 budget sum.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Largest device count a [`Scenario`] may carry.
pub const MAX_DEVICES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    pub bandwidth_hz: f64,
    pub noise_power_w: f64,
    /// Transmit power per device, indexed like [`Scenario::devices`].
    pub tx_power_w: Vec<f64>,
    /// Idle power per device while waiting on the MES.
    pub idle_power_w: Vec<f64>,
}

impl RadioConfig {
    /// Radio constants with the same transmit and idle power for `n` devices.
    pub fn uniform(bandwidth_hz: f64, noise_power_w: f64, n: usize) -> Self {
        RadioConfig {
            bandwidth_hz,
            noise_power_w,
            tx_power_w: vec![DEFAULT_TX_POWER_W; n],
            idle_power_w: vec![DEFAULT_IDLE_POWER_W; n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub data_bits: f64,
    pub cpu_cycles: f64,
    pub max_delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: usize,
    pub task: Task,
    pub local_cpu_hz: f64,
    /// `|h|²`, dimensionless.
    pub channel_gain: f64,
    pub weight_delay: f64,
    pub weight_energy: f64,
    /// Effective switched capacitance κ of the device CPU.
    pub energy_coeff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub devices: Vec<Device>,
    pub radio: RadioConfig,
    pub mes_cpu_hz: f64,
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidScenario(format!("{what} must be positive and finite, got {v}")))
    }
}

impl Scenario {
    pub fn new(devices: Vec<Device>, radio: RadioConfig, mes_cpu_hz: f64) -> Result<Self> {
        let s = Scenario {
            devices,
            radio,
            mes_cpu_hz,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || n > MAX_DEVICES {
            return Err(Error::InvalidScenario(format!(
                "device count {n} outside 1..={MAX_DEVICES}"
            )));
        }
        if self.radio.tx_power_w.len() != n || self.radio.idle_power_w.len() != n {
            return Err(Error::InvalidScenario(
                "per-device power lists must match the device count".into(),
            ));
        }
        positive("bandwidth", self.radio.bandwidth_hz)?;
        positive("noise power", self.radio.noise_power_w)?;
        positive("MES CPU", self.mes_cpu_hz)?;
        for (i, d) in self.devices.iter().enumerate() {
            positive("data size", d.task.data_bits)?;
            positive("cpu cycles", d.task.cpu_cycles)?;
            positive("max delay", d.task.max_delay_s)?;
            positive("local CPU", d.local_cpu_hz)?;
            positive("channel gain", d.channel_gain)?;
            positive("energy coefficient", d.energy_coeff)?;
            positive("transmit power", self.radio.tx_power_w[i])?;
            positive("idle power", self.radio.idle_power_w[i])?;
            let (a, b) = (d.weight_delay, d.weight_energy);
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || (a + b - 1.0).abs() > 1e-9
            {
                return Err(Error::InvalidScenario(format!(
                    "device {i}: weights ({a}, {b}) must lie in [0,1] and sum to 1"
                )));
            }
            if d.energy_coeff != self.devices[0].energy_coeff {
                return Err(Error::InvalidScenario(
                    "all devices must share one energy coefficient".into(),
                ));
            }
        }
        Ok(())
    }

    /// Received power `P_t·|h|²` of device `i` at the AP.
    fn rx_power(&self, i: usize) -> f64 {
        self.radio.tx_power_w[i] * self.devices[i].channel_gain
    }
}

/// Binary offloading decision; entry `i` is 1 when device `i` offloads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Decision(pub Vec<u8>);

impl Decision {
    pub fn all_local(n: usize) -> Self {
        Decision(vec![0; n])
    }

    pub fn all_offload(n: usize) -> Self {
        Decision(vec![1; n])
    }

    /// Decision whose bit `i` is the `i`-th least-significant bit of `class`.
    pub fn from_class(class: usize, n: usize) -> Self {
        Decision((0..n).map(|i| ((class >> i) & 1) as u8).collect())
    }

    pub fn class_index(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | (usize::from(b != 0) << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn offloads(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn offloaders(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }

    pub fn offload_count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn bit_string(&self) -> String {
        self.0.iter().map(|b| char::from(b'0' + b)).collect()
    }
}

/// Fractions Θ of the MES CPU budget granted to each device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation(pub Vec<f64>);

impl Allocation {
    pub fn zeros(n: usize) -> Self {
        Allocation(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Σ D_i·Θ_i`.
    pub fn offloaded_sum(&self, decision: &Decision) -> f64 {
        decision.offloaders().map(|i| self.0[i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub delay_s: f64,
    pub energy_j: f64,
    pub weighted_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub delay_s: Vec<f64>,
    pub energy_j: Vec<f64>,
    pub weighted_cost: Vec<f64>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    C1,
    C2,
    C3,
    C4,
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feasibility {
    Feasible,
    Violated {
        constraint: Constraint,
        device: Option<usize>,
    },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible)
    }
}

fn order_into(scenario: &Scenario, order: &mut [usize]) {
    for (i, slot) in order.iter_mut().enumerate() {
        *slot = i;
    }
    // sort_by is stable, so equal gains keep index order
    order.sort_by(|&a, &b| {
        scenario.devices[b]
            .channel_gain
            .total_cmp(&scenario.devices[a].channel_gain)
    });
}

fn sinr_into(scenario: &Scenario, out: &mut [f64]) {
    let n = scenario.len();
    let mut stack = [0usize; MAX_DEVICES];
    let mut heap = Vec::new();
    let order = if n <= MAX_DEVICES {
        &mut stack[..n]
    } else {
        heap.resize(n, 0);
        &mut heap[..]
    };
    order_into(scenario, order);
    let mut residual = 0.0;
    // walk from the last-decoded device back to the first
    for &i in order.iter().rev() {
        let p = scenario.rx_power(i);
        out[i] = p / (scenario.radio.noise_power_w + residual);
        residual += p;
    }
}

/// Fills `out` with every device's uplink rate without allocating.
pub(crate) fn rates_into(scenario: &Scenario, out: &mut [f64]) {
    sinr_into(scenario, out);
    let w = scenario.radio.bandwidth_hz;
    for r in out.iter_mut() {
        *r = w * r.ln_1p() / std::f64::consts::LN_2;
    }
}

/// SIC decode order: descending received channel gain, ties by device index.
pub fn sic_order(scenario: &Scenario) -> Vec<usize> {
    let mut order = vec![0; scenario.len()];
    order_into(scenario, &mut order);
    order
}

/// SINR of every device, each seeing only the devices decoded after it.
pub fn sinr_all(scenario: &Scenario) -> Vec<f64> {
    let mut out = vec![0.0; scenario.len()];
    sinr_into(scenario, &mut out);
    out
}

pub fn sinr(scenario: &Scenario, device: usize) -> f64 {
    sinr_all(scenario)[device]
}

pub fn uplink_rates(scenario: &Scenario) -> Vec<f64> {
    let mut out = vec![0.0; scenario.len()];
    rates_into(scenario, &mut out);
    out
}

pub fn uplink_rate(scenario: &Scenario, device: usize) -> f64 {
    uplink_rates(scenario)[device]
}

pub fn local_cost(device: &Device) -> CostTerms {
    let c = device.task.cpu_cycles;
    let f = device.local_cpu_hz;
    let delay_s = c / f;
    let energy_j = device.energy_coeff * f * f * c;
    CostTerms {
        delay_s,
        energy_j,
        weighted_cost: device.weight_delay * delay_s + device.weight_energy * energy_j,
    }
}

/// Upload delay `s/r` for a device with uplink rate `rate`.
pub(crate) fn upload_delay(device: &Device, rate: f64) -> f64 {
    device.task.data_bits / rate
}

fn offload_terms(
    device: &Device,
    index: usize,
    tx_power: f64,
    idle_power: f64,
    rate: f64,
    f_alloc_hz: f64,
) -> Result<CostTerms> {
    if !(f_alloc_hz > 0.0) {
        return Err(Error::ZeroAllocation { device: index });
    }
    let upload = upload_delay(device, rate);
    let process = device.task.cpu_cycles / f_alloc_hz;
    let delay_s = upload + process;
    let energy_j = tx_power * upload + idle_power * process;
    Ok(CostTerms {
        delay_s,
        energy_j,
        weighted_cost: device.weight_delay * delay_s + device.weight_energy * energy_j,
    })
}

/// Cost of offloading device `device` with `f_alloc_hz` MES cycles per second.
/// Download time and energy are neglected.
pub fn offload_cost(scenario: &Scenario, device: usize, f_alloc_hz: f64) -> Result<CostTerms> {
    let rate = uplink_rate(scenario, device);
    offload_terms(
        &scenario.devices[device],
        device,
        scenario.radio.tx_power_w[device],
        scenario.radio.idle_power_w[device],
        rate,
        f_alloc_hz,
    )
}

fn check_lengths(scenario: &Scenario, decision: &Decision, allocation: &Allocation) -> Result<()> {
    let n = scenario.len();
    if decision.len() != n {
        return Err(Error::DimensionMismatch {
            what: "decision",
            expected: n,
            actual: decision.len(),
        });
    }
    if allocation.len() != n {
        return Err(Error::DimensionMismatch {
            what: "allocation",
            expected: n,
            actual: allocation.len(),
        });
    }
    Ok(())
}

fn per_device_terms(
    scenario: &Scenario,
    decision: &Decision,
    allocation: &Allocation,
) -> Result<Vec<CostTerms>> {
    check_lengths(scenario, decision, allocation)?;
    let rates = uplink_rates(scenario);
    scenario
        .devices
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if decision.offloads(i) {
                offload_terms(
                    d,
                    i,
                    scenario.radio.tx_power_w[i],
                    scenario.radio.idle_power_w[i],
                    rates[i],
                    allocation.0[i] * scenario.mes_cpu_hz,
                )
            } else {
                Ok(local_cost(d))
            }
        })
        .collect()
}

/// Sum cost over all devices for a decision and allocation.
pub fn total_cost(
    scenario: &Scenario,
    decision: &Decision,
    allocation: &Allocation,
) -> Result<CostBreakdown> {
    let terms = per_device_terms(scenario, decision, allocation)?;
    let weighted_cost: Vec<f64> = terms.iter().map(|t| t.weighted_cost).collect();
    Ok(CostBreakdown {
        delay_s: terms.iter().map(|t| t.delay_s).collect(),
        energy_j: terms.iter().map(|t| t.energy_j).collect(),
        total_cost: weighted_cost.iter().sum(),
        weighted_cost,
    })
}

/// `total_cost(..).total_cost` and `check_feasibility(..).is_feasible()` from a
/// single pass over the devices.
pub(crate) fn cost_and_feasibility(
    scenario: &Scenario,
    decision: &Decision,
    allocation: &Allocation,
) -> Result<(f64, bool)> {
    check_lengths(scenario, decision, allocation)?;
    let static_ok = decision.0.iter().all(|&b| b <= 1)
        && allocation.0.iter().all(|t| (0.0..=1.0).contains(t))
        && allocation.offloaded_sum(decision) <= 1.0 + FEASIBILITY_TOL;
    let n = scenario.len();
    let mut stack = [0.0; MAX_DEVICES];
    let mut heap = Vec::new();
    let rates = if n <= MAX_DEVICES {
        &mut stack[..n]
    } else {
        heap.resize(n, 0.0);
        &mut heap[..]
    };
    rates_into(scenario, rates);
    let mut total = 0.0;
    let mut deadlines_ok = true;
    for (i, d) in scenario.devices.iter().enumerate() {
        let terms = if decision.offloads(i) {
            offload_terms(
                d,
                i,
                scenario.radio.tx_power_w[i],
                scenario.radio.idle_power_w[i],
                rates[i],
                allocation.0[i] * scenario.mes_cpu_hz,
            )?
        } else {
            local_cost(d)
        };
        deadlines_ok &= terms.delay_s <= d.task.max_delay_s * (1.0 + FEASIBILITY_TOL);
        total += terms.weighted_cost;
    }
    Ok((total, static_ok && deadlines_ok))
}

/// Checks C1, C3, C4 and then C2, returning the first violation found.
///
/// Panics if the decision or allocation length differs from the device count.
pub fn check_feasibility(
    scenario: &Scenario,
    decision: &Decision,
    allocation: &Allocation,
) -> Feasibility {
    if let Err(e) = check_lengths(scenario, decision, allocation) {
        panic!("check_feasibility: {e}");
    }
    let violated = |constraint, device| Feasibility::Violated { constraint, device };

    if let Some(i) = decision.0.iter().position(|&b| b > 1) {
        return violated(Constraint::C1, Some(i));
    }
    if let Some(i) = allocation
        .0
        .iter()
        .position(|&t| !(0.0..=1.0).contains(&t))
    {
        return violated(Constraint::C3, Some(i));
    }
    if allocation.offloaded_sum(decision) > 1.0 + FEASIBILITY_TOL {
        return violated(Constraint::C4, None);
    }

    let rates = uplink_rates(scenario);
    for (i, d) in scenario.devices.iter().enumerate() {
        let delay = if decision.offloads(i) {
            let f = allocation.0[i] * scenario.mes_cpu_hz;
            if f <= 0.0 {
                return violated(Constraint::C2, Some(i));
            }
            upload_delay(d, rates[i]) + d.task.cpu_cycles / f
        } else {
            local_cost(d).delay_s
        };
        if !(delay <= d.task.max_delay_s * (1.0 + FEASIBILITY_TOL)) {
            return violated(Constraint::C2, Some(i));
        }
    }
    Feasibility::Feasible
}
