//! Multi-task feedforward network: a shared dense trunk feeding a softmax
//! head over the `2^N` offloading decisions and a regression head over the
//! `N` allocation ratios.

mod infer;
mod train;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureScaler;
use crate::error::{Error, Result};
use crate::rng;

pub use infer::{argmax, infer, infer_with, postprocess_ratios, MIN_OFFLOAD_RATIO};
pub use train::{
    backprop, joint_loss, train, training_loss, Gradients, JointLoss, TrainConfig,
};

pub const MODEL_FORMAT: &str = "offload-mtfnn";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and output `y = apply(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtfnnArch {
    pub n_devices: usize,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_dim: usize,
    pub reg_dim: usize,
    pub hidden_activation: Activation,
    pub regression_activation: Activation,
}

impl MtfnnArch {
    /// Default layout for `n` devices: hidden widths `[5N, 3N+1]`, which is
    /// 15 and 10 for three devices.
    pub fn for_devices(n_devices: usize, input_dim: usize) -> Self {
        MtfnnArch {
            n_devices,
            input_dim,
            hidden_dims: vec![5 * n_devices, 3 * n_devices + 1],
            class_dim: 1 << n_devices,
            reg_dim: n_devices,
            hidden_activation: Activation::Relu,
            regression_activation: Activation::Sigmoid,
        }
    }

    pub fn for_scaler(scaler: &FeatureScaler) -> Self {
        Self::for_devices(scaler.n_devices, scaler.input_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_devices == 0 || self.n_devices > crate::cost::MAX_DEVICES {
            return bad(format!("n_devices {} out of range", self.n_devices));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be at least 1".into());
        }
        if !self.input_dim.is_multiple_of(self.n_devices) {
            return bad(format!(
                "input_dim {} is not a whole number of features per device",
                self.input_dim
            ));
        }
        if self.class_dim != 1 << self.n_devices || self.reg_dim != self.n_devices {
            return bad(format!(
                "heads ({}, {}) inconsistent with {} devices",
                self.class_dim, self.reg_dim, self.n_devices
            ));
        }
        Ok(())
    }

    fn trunk_width(&self) -> usize {
        *self.hidden_dims.last().unwrap_or(&self.input_dim)
    }
}

/// Fully connected layer; `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `±√(6/(fan_in + fan_out))`, zero bias.
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.gen_range(-limit..=limit)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v);
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_class_loss: f64,
    pub final_reg_loss: f64,
    /// Mean joint loss over each epoch's mini-batches.
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtfnnModel {
    pub arch: MtfnnArch,
    pub trunk: Vec<Dense>,
    pub class_head: Dense,
    pub reg_head: Dense,
    pub scaler: FeatureScaler,
    pub meta: TrainMeta,
}

/// Raw network outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub logits: Vec<f64>,
    /// Regression head after its activation.
    pub ratios: Vec<f64>,
}

/// Reusable activation buffers for [`MtfnnModel::forward_with`].
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    hidden: Vec<Vec<f64>>,
    pub(crate) features: Vec<f64>,
    pub logits: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl MtfnnModel {
    /// Freshly initialized network with seeded Glorot-uniform weights.
    pub fn init(arch: MtfnnArch, scaler: FeatureScaler, seed: u64) -> Result<Self> {
        arch.validate()?;
        if scaler.input_dim() != arch.input_dim || scaler.n_devices != arch.n_devices {
            return Err(Error::DimensionMismatch {
                what: "scaler input width",
                expected: arch.input_dim,
                actual: scaler.input_dim(),
            });
        }
        let mut rng = rng::stream(seed, "init", 0);
        let mut trunk = Vec::with_capacity(arch.hidden_dims.len());
        let mut width = arch.input_dim;
        for &h in &arch.hidden_dims {
            trunk.push(Dense::glorot(width, h, &mut rng));
            width = h;
        }
        Ok(MtfnnModel {
            class_head: Dense::glorot(width, arch.class_dim, &mut rng),
            reg_head: Dense::glorot(width, arch.reg_dim, &mut rng),
            trunk,
            arch,
            scaler,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        })
    }

    /// Same shapes with every weight and bias zero.
    pub fn zeroed(arch: MtfnnArch, scaler: FeatureScaler) -> Result<Self> {
        let mut m = Self::init(arch, scaler, 0)?;
        for layer in m.layers_mut() {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        Ok(m)
    }

    /// Trunk layers followed by the class head and the regression head.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.class_head, &self.reg_head])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain([&mut self.class_head, &mut self.reg_head])
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward_with<'s>(&self, features: &[f64], scratch: &'s mut Scratch) -> Result<(&'s [f64], &'s [f64])> {
        if features.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: self.arch.input_dim,
                actual: features.len(),
            });
        }
        scratch.hidden.resize_with(self.trunk.len(), Vec::new);
        let act = self.arch.hidden_activation;
        for (k, layer) in self.trunk.iter().enumerate() {
            let (done, rest) = scratch.hidden.split_at_mut(k);
            let out = &mut rest[0];
            out.resize(layer.outputs, 0.0);
            let input = if k == 0 { features } else { &done[k - 1] };
            layer.forward_into(input, out);
            out.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        let last: &[f64] = scratch.hidden.last().map_or(features, |v| v.as_slice());
        scratch.logits.resize(self.arch.class_dim, 0.0);
        scratch.ratios.resize(self.arch.reg_dim, 0.0);
        self.class_head.forward_into(last, &mut scratch.logits);
        self.reg_head.forward_into(last, &mut scratch.ratios);
        let ract = self.arch.regression_activation;
        scratch.ratios.iter_mut().for_each(|v| *v = ract.apply(*v));
        Ok((&scratch.logits, &scratch.ratios))
    }

    /// Runs already-scaled features through the network.
    pub fn forward(&self, features: &[f64]) -> Result<Output> {
        let mut scratch = Scratch::default();
        let (logits, ratios) = self.forward_with(features, &mut scratch)?;
        Ok(Output {
            logits: logits.to_vec(),
            ratios: ratios.to_vec(),
        })
    }

    fn check_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        let mut width = self.arch.input_dim;
        let expect = |l: &Dense, i: usize, o: usize| {
            l.inputs == i && l.outputs == o && l.weights.len() == i * o && l.bias.len() == o
        };
        if self.trunk.len() != self.arch.hidden_dims.len() {
            return Err(Error::InvalidConfig("trunk depth disagrees with arch".into()));
        }
        for (l, &h) in self.trunk.iter().zip(&self.arch.hidden_dims) {
            if !expect(l, width, h) {
                return Err(Error::InvalidConfig("trunk layer shape disagrees with arch".into()));
            }
            width = h;
        }
        if !expect(&self.class_head, width, self.arch.class_dim)
            || !expect(&self.reg_head, width, self.arch.reg_dim)
        {
            return Err(Error::InvalidConfig("head shape disagrees with arch".into()));
        }
        if !self.layers().all(Dense::is_finite) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        if self.scaler.input_dim() != self.arch.input_dim {
            return Err(Error::InvalidConfig("scaler width disagrees with arch".into()));
        }
        debug_assert_eq!(width, self.arch.trunk_width());
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let file = ModelFileRef {
            format: MODEL_FORMAT,
            version: MODEL_VERSION,
            model: self,
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let probe: ModelProbe = serde_json::from_str(text)?;
        if probe.format != MODEL_FORMAT {
            return Err(Error::parse(1, format!("unknown model format `{}`", probe.format)));
        }
        if probe.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "model",
                found: probe.version,
                expected: MODEL_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(text)?;
        file.model.check_shapes()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a MtfnnModel,
}

#[derive(Deserialize)]
struct ModelProbe {
    format: String,
    version: u32,
}

#[derive(Deserialize)]
struct ModelFile {
    model: MtfnnModel,
}

/// Probabilities from logits, shifted by the maximum for stability.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
