//! Scenario serialization.
//!
//! The structured (JSON) form and the line-oriented text form share one
//! field order: `N`, then per device `(s_bits, c_cycles, theta_s, f_l_hz,
//! h_sq, alpha, beta)`, then `W, delta_sq, F`, the `N` transmit powers, the
//! `N` idle powers and `kappa`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{Device, RadioConfig, Scenario, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub s_bits: f64,
    pub c_cycles: f64,
    pub theta_s: f64,
    pub f_l_hz: f64,
    pub h_sq: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub n: usize,
    pub devices: Vec<DeviceRecord>,
    pub w_hz: f64,
    pub delta_sq: f64,
    pub f_hz: f64,
    pub p_t: Vec<f64>,
    pub p_i: Vec<f64>,
    pub kappa: f64,
}

impl From<&Scenario> for ScenarioRecord {
    fn from(s: &Scenario) -> Self {
        ScenarioRecord {
            n: s.len(),
            devices: s
                .devices
                .iter()
                .map(|d| DeviceRecord {
                    s_bits: d.task.data_bits,
                    c_cycles: d.task.cpu_cycles,
                    theta_s: d.task.max_delay_s,
                    f_l_hz: d.local_cpu_hz,
                    h_sq: d.channel_gain,
                    alpha: d.weight_delay,
                    beta: d.weight_energy,
                })
                .collect(),
            w_hz: s.radio.bandwidth_hz,
            delta_sq: s.radio.noise_power_w,
            f_hz: s.mes_cpu_hz,
            p_t: s.radio.tx_power_w.clone(),
            p_i: s.radio.idle_power_w.clone(),
            kappa: s.devices.first().map_or(0.0, |d| d.energy_coeff),
        }
    }
}

impl TryFrom<ScenarioRecord> for Scenario {
    type Error = Error;

    fn try_from(r: ScenarioRecord) -> Result<Self> {
        if r.devices.len() != r.n {
            return Err(Error::InvalidScenario(format!(
                "n = {} but {} device records",
                r.n,
                r.devices.len()
            )));
        }
        let devices = r
            .devices
            .into_iter()
            .enumerate()
            .map(|(id, d)| Device {
                id,
                task: Task {
                    data_bits: d.s_bits,
                    cpu_cycles: d.c_cycles,
                    max_delay_s: d.theta_s,
                },
                local_cpu_hz: d.f_l_hz,
                channel_gain: d.h_sq,
                weight_delay: d.alpha,
                weight_energy: d.beta,
                energy_coeff: r.kappa,
            })
            .collect();
        Scenario::new(
            devices,
            RadioConfig {
                bandwidth_hz: r.w_hz,
                noise_power_w: r.delta_sq,
                tx_power_w: r.p_t,
                idle_power_w: r.p_i,
            },
            r.f_hz,
        )
    }
}

impl Serialize for Scenario {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ScenarioRecord::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Scenario {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let record = ScenarioRecord::deserialize(deserializer)?;
        Scenario::try_from(record).map_err(serde::de::Error::custom)
    }
}

/// One scenario as a single line of whitespace-separated numbers.
pub fn to_text_line(s: &Scenario) -> String {
    let r = ScenarioRecord::from(s);
    let mut fields = vec![r.n.to_string()];
    for d in &r.devices {
        for v in [d.s_bits, d.c_cycles, d.theta_s, d.f_l_hz, d.h_sq, d.alpha, d.beta] {
            fields.push(format!("{v:e}"));
        }
    }
    for v in [r.w_hz, r.delta_sq, r.f_hz] {
        fields.push(format!("{v:e}"));
    }
    fields.extend(r.p_t.iter().chain(&r.p_i).map(|v| format!("{v:e}")));
    fields.push(format!("{:e}", r.kappa));
    fields.join(" ")
}

/// Parses one text line; `line_no` is used only for error messages.
pub fn from_text_line(line: &str, line_no: usize) -> Result<Scenario> {
    let mut tokens = line.split_whitespace().enumerate();
    let mut next = |what: &str| -> Result<f64> {
        let (pos, tok) = tokens
            .next()
            .ok_or_else(|| Error::parse(line_no, format!("missing field `{what}`")))?;
        tok.parse::<f64>().map_err(|_| {
            Error::parse(line_no, format!("field {} (`{what}`): cannot parse `{tok}`", pos + 1))
        })
    };
    let n_raw = next("n")?;
    if n_raw.fract() != 0.0 || !(1.0..=crate::cost::MAX_DEVICES as f64).contains(&n_raw) {
        return Err(Error::parse(line_no, format!("field 1 (`n`): invalid device count {n_raw}")));
    }
    let n = n_raw as usize;
    let mut devices = Vec::with_capacity(n);
    for _ in 0..n {
        devices.push(DeviceRecord {
            s_bits: next("s_bits")?,
            c_cycles: next("c_cycles")?,
            theta_s: next("theta_s")?,
            f_l_hz: next("f_l_hz")?,
            h_sq: next("h_sq")?,
            alpha: next("alpha")?,
            beta: next("beta")?,
        });
    }
    let w_hz = next("w_hz")?;
    let delta_sq = next("delta_sq")?;
    let f_hz = next("f_hz")?;
    let p_t = (0..n).map(|_| next("p_t")).collect::<Result<Vec<_>>>()?;
    let p_i = (0..n).map(|_| next("p_i")).collect::<Result<Vec<_>>>()?;
    let kappa = next("kappa")?;
    if tokens.next().is_some() {
        return Err(Error::parse(line_no, "trailing fields after `kappa`"));
    }
    Scenario::try_from(ScenarioRecord {
        n,
        devices,
        w_hz,
        delta_sq,
        f_hz,
        p_t,
        p_i,
        kappa,
    })
    .map_err(|e| Error::parse(line_no, e.to_string()))
}

/// Reads scenarios from a file in any supported layout: a dataset file
/// (its per-sample scenarios are returned in order), JSON lines, or text lines.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path)?;
    parse_scenarios(&text)
}

pub fn parse_scenarios(text: &str) -> Result<Vec<Scenario>> {
    if crate::dataset::is_dataset_text(text) {
        let ds = crate::dataset::Dataset::parse(text)?;
        return Ok(ds.samples.into_iter().map(|s| s.scenario).collect());
    }
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let scenario = if trimmed.starts_with('{') {
            let record: ScenarioRecord = serde_json::from_str(trimmed)
                .map_err(|e| Error::parse(line_no, e.to_string()))?;
            Scenario::try_from(record).map_err(|e| Error::parse(line_no, e.to_string()))?
        } else {
            from_text_line(trimmed, line_no)?
        };
        out.push(scenario);
    }
    Ok(out)
}
