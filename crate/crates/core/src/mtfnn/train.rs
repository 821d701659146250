use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dense, MtfnnArch, MtfnnModel, TrainMeta};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Smallest true-class probability fed to `ln` in the cross-entropy term.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the classification loss.
    pub chi1: f64,
    /// Weight of the regression loss.
    pub chi2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            chi1: 1.0,
            chi2: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.chi1 >= 0.0
            && self.chi2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub class: f64,
    pub regression: f64,
}

/// `χ1·CE + χ2·MSE` for one sample's raw outputs.
pub fn joint_loss(
    logits: &[f64],
    ratios: &[f64],
    class_label: usize,
    theta_labels: &[f64],
    chi1: f64,
    chi2: f64,
) -> JointLoss {
    let probs = super::softmax(logits);
    let class = -probs[class_label].max(PROB_FLOOR).ln();
    let regression = ratios
        .iter()
        .zip(theta_labels)
        .map(|(r, t)| (r - t) * (r - t))
        .sum::<f64>()
        / ratios.len() as f64;
    JointLoss {
        total: chi1 * class + chi2 * regression,
        class,
        regression,
    }
}

/// Parameter gradients, one entry per layer in [`MtfnnModel::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &MtfnnModel) -> Self {
        Gradients {
            layers: model.layers().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

struct Workspace {
    /// Post-activation outputs per trunk layer.
    post: Vec<Vec<f64>>,
    /// Pre-activation values per trunk layer.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
    reg_pre: Vec<f64>,
    ratios: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(arch: &MtfnnArch) -> Self {
        Workspace {
            post: arch.hidden_dims.iter().map(|&h| vec![0.0; h]).collect(),
            pre: arch.hidden_dims.iter().map(|&h| vec![0.0; h]).collect(),
            logits: vec![0.0; arch.class_dim],
            reg_pre: vec![0.0; arch.reg_dim],
            ratios: vec![0.0; arch.reg_dim],
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }
}

fn accumulate_outer(grad: &mut Dense, delta: &[f64], input: &[f64], scale: f64) {
    for (row, &d) in grad.weights.chunks_exact_mut(grad.inputs).zip(delta) {
        let g = d * scale;
        if g != 0.0 {
            for (w, &x) in row.iter_mut().zip(input) {
                *w += g * x;
            }
        }
    }
    for (b, &d) in grad.bias.iter_mut().zip(delta) {
        *b += d * scale;
    }
}

/// `out += Wᵀ·delta`.
fn add_transpose_product(layer: &Dense, delta: &[f64], out: &mut [f64]) {
    for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(delta) {
        if d != 0.0 {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * d;
            }
        }
    }
}

fn backprop_into(
    model: &MtfnnModel,
    sample_features: &[f64],
    class_label: usize,
    theta_labels: &[f64],
    chi1: f64,
    chi2: f64,
    scale: f64,
    ws: &mut Workspace,
    grads: &mut Gradients,
) -> JointLoss {
    let arch = &model.arch;
    let act = arch.hidden_activation;
    for k in 0..model.trunk.len() {
        let (done, rest) = ws.post.split_at_mut(k);
        let input: &[f64] = if k == 0 { sample_features } else { &done[k - 1] };
        let (pre, post) = (&mut ws.pre[k], &mut rest[0]);
        model.trunk[k].forward_into(input, pre);
        for (p, &z) in post.iter_mut().zip(pre.iter()) {
            *p = act.apply(z);
        }
    }
    let last: &[f64] = ws.post.last().map_or(sample_features, |v| v.as_slice());
    model.class_head.forward_into(last, &mut ws.logits);
    model.reg_head.forward_into(last, &mut ws.reg_pre);
    let ract = arch.regression_activation;
    for (r, &z) in ws.ratios.iter_mut().zip(&ws.reg_pre) {
        *r = ract.apply(z);
    }
    let loss = joint_loss(&ws.logits, &ws.ratios, class_label, theta_labels, chi1, chi2);

    let n_heads = model.trunk.len();
    let probs = super::softmax(&ws.logits);
    let d_logits: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(j, &p)| chi1 * (p - if j == class_label { 1.0 } else { 0.0 }))
        .collect();
    let reg_scale = 2.0 * chi2 / arch.reg_dim as f64;
    let d_reg: Vec<f64> = ws
        .ratios
        .iter()
        .zip(theta_labels)
        .zip(&ws.reg_pre)
        .map(|((&r, &t), &z)| reg_scale * (r - t) * ract.derivative(z, r))
        .collect();

    accumulate_outer(&mut grads.layers[n_heads], &d_logits, last, scale);
    accumulate_outer(&mut grads.layers[n_heads + 1], &d_reg, last, scale);

    ws.delta.clear();
    ws.delta.resize(last.len(), 0.0);
    add_transpose_product(&model.class_head, &d_logits, &mut ws.delta);
    add_transpose_product(&model.reg_head, &d_reg, &mut ws.delta);

    for k in (0..model.trunk.len()).rev() {
        for (d, (&z, &y)) in ws.delta.iter_mut().zip(ws.pre[k].iter().zip(&ws.post[k])) {
            *d *= act.derivative(z, y);
        }
        let input: &[f64] = if k == 0 { sample_features } else { &ws.post[k - 1] };
        accumulate_outer(&mut grads.layers[k], &ws.delta, input, scale);
        if k > 0 {
            ws.delta_prev.clear();
            ws.delta_prev.resize(model.trunk[k].inputs, 0.0);
            add_transpose_product(&model.trunk[k], &ws.delta, &mut ws.delta_prev);
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
    loss
}

/// Analytic gradient of the joint loss for one sample.
pub fn backprop(
    model: &MtfnnModel,
    features: &[f64],
    class_label: usize,
    theta_labels: &[f64],
    chi1: f64,
    chi2: f64,
) -> Result<(JointLoss, Gradients)> {
    check_sample(model, features, class_label, theta_labels)?;
    let mut grads = Gradients::zeros_like(model);
    let mut ws = Workspace::new(&model.arch);
    let loss = backprop_into(
        model,
        features,
        class_label,
        theta_labels,
        chi1,
        chi2,
        1.0,
        &mut ws,
        &mut grads,
    );
    Ok((loss, grads))
}

fn check_sample(model: &MtfnnModel, features: &[f64], class: usize, theta: &[f64]) -> Result<()> {
    let arch = &model.arch;
    if features.len() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            what: "features",
            expected: arch.input_dim,
            actual: features.len(),
        });
    }
    if theta.len() != arch.reg_dim {
        return Err(Error::DimensionMismatch {
            what: "theta labels",
            expected: arch.reg_dim,
            actual: theta.len(),
        });
    }
    if class >= arch.class_dim {
        return Err(Error::ClassOutOfRange {
            class,
            n: arch.n_devices,
        });
    }
    Ok(())
}

/// Mean joint loss of `model` over `samples`.
pub fn training_loss<'a>(
    model: &MtfnnModel,
    samples: impl IntoIterator<Item = &'a Sample>,
    chi1: f64,
    chi2: f64,
) -> Result<JointLoss> {
    let mut acc = JointLoss {
        total: 0.0,
        class: 0.0,
        regression: 0.0,
    };
    let mut count = 0usize;
    for s in samples {
        let out = model.forward(&s.features)?;
        let l = joint_loss(&out.logits, &out.ratios, s.class_label, &s.theta_labels, chi1, chi2);
        acc.total += l.total;
        acc.class += l.class;
        acc.regression += l.regression;
        count += 1;
    }
    let m = count.max(1) as f64;
    Ok(JointLoss {
        total: acc.total / m,
        class: acc.class / m,
        regression: acc.regression / m,
    })
}

struct Adam {
    m: Vec<Dense>,
    v: Vec<Dense>,
    step: i32,
}

impl Adam {
    fn new(model: &MtfnnModel) -> Self {
        let zeros = || model.layers().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut MtfnnModel, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((layer, g), m), v) in model
            .layers_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weights.iter().chain(&g.bias);
            let ms = m.weights.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weights.iter_mut().chain(v.bias.iter_mut());
            for (((p, &g), m), v) in params.zip(gs).zip(ms).zip(vs) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Mini-batch Adam on the joint loss over the dataset's training split.
///
/// The batch order of every epoch comes from a seeded shuffle, so the same
/// data, architecture and configuration always produce the same weights.
pub fn train(dataset: &Dataset, arch: &MtfnnArch, config: &TrainConfig) -> Result<MtfnnModel> {
    config.validate()?;
    let train: Vec<&Sample> = dataset.train().collect();
    if train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let mut model = MtfnnModel::init(arch.clone(), dataset.scaler.clone(), config.seed)?;
    for s in &train {
        check_sample(&model, &s.features, s.class_label, &s.theta_labels)?;
    }

    let initial = training_loss(&model, train.iter().copied(), config.chi1, config.chi2)?;
    let mut adam = Adam::new(&model);
    let mut grads = Gradients::zeros_like(&model);
    let mut ws = Workspace::new(arch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut last = initial;

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, "train-shuffle", epoch as u64));
        let mut sums = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = train[i];
                let l = backprop_into(
                    &model,
                    &s.features,
                    s.class_label,
                    &s.theta_labels,
                    config.chi1,
                    config.chi2,
                    scale,
                    &mut ws,
                    &mut grads,
                );
                sums.0 += l.total;
                sums.1 += l.class;
                sums.2 += l.regression;
            }
            adam.update(&mut model, &grads, config);
        }
        let m = train.len() as f64;
        last = JointLoss {
            total: sums.0 / m,
            class: sums.1 / m,
            regression: sums.2 / m,
        };
        if !last.total.is_finite() || !model.layers().all(Dense::is_finite) {
            return Err(Error::Diverged { epoch });
        }
        epoch_loss.push(last.total);
    }

    model.meta = TrainMeta {
        epochs: config.epochs,
        seed: config.seed,
        train_samples: train.len(),
        initial_loss: initial.total,
        final_loss: last.total,
        final_class_loss: last.class,
        final_reg_loss: last.regression,
        epoch_loss,
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, GenConfig};
    use crate::mtfnn::Activation;

    #[test]
    fn loss_closed_forms() {
        let l = joint_loss(&[0.0; 8], &[0.5, 0.5, 0.5], 3, &[0.5, 0.5, 0.5], 1.0, 1.0);
        assert!((l.class - 8f64.ln()).abs() < 1e-12);
        assert_eq!(l.regression, 0.0);

        let perfect = joint_loss(&[0.0, 1e4], &[0.25], 1, &[0.25], 1.0, 1.0);
        assert_eq!(perfect.total, 0.0);

        let only_class = joint_loss(&[0.3, -0.2], &[0.9], 0, &[0.1], 1.0, 0.0);
        assert_eq!(only_class.total, only_class.class);

        let floored = joint_loss(&[0.0, 1e4], &[0.0], 0, &[0.0], 1.0, 1.0);
        assert!((floored.class - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    fn flat_params(m: &MtfnnModel) -> Vec<f64> {
        m.layers().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    fn set_param(m: &mut MtfnnModel, mut idx: usize, v: f64) {
        for l in m.layers_mut() {
            let n = l.weights.len();
            if idx < n {
                l.weights[idx] = v;
                return;
            }
            idx -= n;
            if idx < l.bias.len() {
                l.bias[idx] = v;
                return;
            }
            idx -= l.bias.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = generate(&GenConfig::new(2, 10, 3)).unwrap();
        let mut arch = MtfnnArch::for_scaler(&ds.scaler);
        arch.hidden_activation = Activation::Tanh;
        let model = MtfnnModel::init(arch, ds.scaler.clone(), 5).unwrap();
        let s = &ds.samples[0];
        let (_, g) = backprop(&model, &s.features, s.class_label, &s.theta_labels, 1.0, 1.0).unwrap();
        let analytic = g.flat();
        let base = flat_params(&model);
        let h = 1e-5;
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            set_param(&mut plus, k, base[k] + h);
            let mut minus = model.clone();
            set_param(&mut minus, k, base[k] - h);
            let f = |m: &MtfnnModel| {
                let o = m.forward(&s.features).unwrap();
                joint_loss(&o.logits, &o.ratios, s.class_label, &s.theta_labels, 1.0, 1.0).total
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {k}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn zero_loss_weights_freeze_parameters() {
        let ds = generate(&GenConfig::new(2, 30, 4)).unwrap();
        let arch = MtfnnArch::for_scaler(&ds.scaler);
        let cfg = TrainConfig {
            epochs: 1,
            chi1: 0.0,
            chi2: 0.0,
            seed: 8,
            ..TrainConfig::default()
        };
        let trained = train(&ds, &arch, &cfg).unwrap();
        let fresh = MtfnnModel::init(arch, ds.scaler.clone(), 8).unwrap();
        assert_eq!(flat_params(&trained), flat_params(&fresh));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate(&GenConfig::new(2, 60, 4)).unwrap();
        let arch = MtfnnArch::for_scaler(&ds.scaler);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 2,
            ..TrainConfig::default()
        };
        let a = train(&ds, &arch, &cfg).unwrap();
        let b = train(&ds, &arch, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_rejected() {
        let ds = generate(&GenConfig::new(2, 10, 4)).unwrap();
        let arch = MtfnnArch::for_scaler(&ds.scaler);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&ds, &arch, &cfg).is_err());
    }
}
