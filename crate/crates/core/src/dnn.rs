//! Fully connected feedforward networks trained with Adam.
//!
//! Hidden layers use the rectifier, the output layer is linear. Batches are
//! stored column-wise (one sample per column) so each layer is a single
//! matrix product.

use std::io::{BufRead, BufReader, Read, Write};

use log::debug;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::fmt_real;
use crate::sampling::CounterRng;

#[derive(Debug, Error)]
pub enum DnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("metric undefined: reference outputs are all zero")]
    UndefinedMetric,
    #[error("model file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const FORMAT_TAG: &str = "convect-uq-mlp";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, y: f64) -> f64 {
        match self {
            Activation::Relu => y.max(0.0),
            Activation::Identity => y,
        }
    }

    /// Derivative; the rectifier's at exactly zero is taken as zero.
    fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Per-feature affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaling {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Column statistics of `data` (rows are samples). Columns with zero
    /// spread keep a unit scale.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let m = data.nrows() as f64;
        let mut mean = Vec::with_capacity(data.ncols());
        let mut std = Vec::with_capacity(data.ncols());
        for col in data.column_iter() {
            let mu = col.sum() / m;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
            mean.push(mu);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Applies to every row of `data`.
    pub fn standardize(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |r, c| (data[(r, c)] - self.mean[c]) / self.std[c])
    }

    pub fn destandardize(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |r, c| data[(r, c)] * self.std[c] + self.mean[c])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    pub layers: Vec<Layer>,
    pub input_scaling: Scaling,
    pub output_scaling: Scaling,
}

/// Activations of one forward pass. `pre[j]` and `post[j]` belong to layer
/// `j + 1`; `post` additionally starts with the input.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pre: Vec<DMatrix<f64>>,
    pub post: Vec<DMatrix<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &DMatrix<f64> {
        self.post.last().expect("at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl MlpNetwork {
    /// Network with layer sizes `sizes` (input first), He-normal weights and
    /// zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, DnnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(DnnError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = CounterRng::new(seed, 0);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(j, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| std * rng.next_normal());
                let last = j + 2 == sizes.len();
                Layer {
                    weights,
                    bias: DVector::zeros(fan_out),
                    activation: if last { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Self {
            layers,
            input_scaling: Scaling::identity(sizes[0]),
            output_scaling: Scaling::identity(sizes[sizes.len() - 1]),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].weights.ncols()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map(|l| l.weights.nrows()).unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Squared Frobenius norm of all weight matrices.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.norm_squared()).sum()
    }

    /// Forward propagation of a batch (`n_inputs x batch`).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<ForwardPass, DnnError> {
        if x.nrows() != self.n_inputs() {
            return Err(DnnError::Shape(format!(
                "input has {} features, network expects {}",
                x.nrows(),
                self.n_inputs()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.clone());
        for layer in &self.layers {
            let mut z = &layer.weights * post.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            let a = z.map(|v| layer.activation.apply(v));
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardPass { pre, post })
    }

    /// Forward propagation of a single input vector in network space.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardPass), DnnError> {
        let pass = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok((pass.output().as_slice().to_vec(), pass))
    }

    /// Prediction in physical units: standardize, propagate, destandardize.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, DnnError> {
        let z: Vec<f64> = x
            .iter()
            .zip(self.input_scaling.mean.iter().zip(&self.input_scaling.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let (y, _) = self.forward(&z)?;
        Ok(y.iter()
            .zip(self.output_scaling.mean.iter().zip(&self.output_scaling.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    /// Predictions for every row of `inputs` (physical units).
    pub fn predict_rows(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>, DnnError> {
        let z = self.input_scaling.standardize(inputs).transpose();
        let y = self.forward_batch(&z)?.output().transpose();
        Ok(self.output_scaling.destandardize(&y))
    }

    /// Gradients of the batch mean squared error `(1/B) sum ||y - z||^2`
    /// with respect to every weight and bias.
    pub fn backprop(&self, x: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Gradients, DnnError> {
        let pass = self.forward_batch(x)?;
        self.backprop_pass(&pass, targets)
    }

    pub fn backprop_pass(&self, pass: &ForwardPass, targets: &DMatrix<f64>) -> Result<Gradients, DnnError> {
        let out = pass.output();
        if targets.shape() != out.shape() {
            return Err(DnnError::Shape(format!(
                "targets {:?} vs outputs {:?}",
                targets.shape(),
                out.shape()
            )));
        }
        let batch = out.ncols() as f64;
        let n = self.layers.len();
        let mut weights = vec![DMatrix::zeros(0, 0); n];
        let mut biases = vec![DVector::zeros(0); n];
        let mut delta = (out - targets) * (2.0 / batch);
        for j in (0..n).rev() {
            let layer = &self.layers[j];
            delta.zip_apply(&pass.pre[j], |d, z| *d *= layer.activation.derivative(z));
            weights[j] = &delta * pass.post[j].transpose();
            biases[j] = delta.column_sum();
            if j > 0 {
                delta = layer.weights.transpose() * &delta;
            }
        }
        Ok(Gradients { weights, biases })
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Samples in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self, DnnError> {
        if inputs.nrows() != targets.nrows() {
            return Err(DnnError::Shape(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// The same samples expressed in network space.
    pub fn standardized(&self, input: &Scaling, output: &Scaling) -> Self {
        Self {
            inputs: input.standardize(&self.inputs),
            targets: output.standardize(&self.targets),
        }
    }

    fn columns(&self, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(self.inputs.ncols(), rows.len(), |f, s| self.inputs[(rows[s], f)]);
        let y = DMatrix::from_fn(self.targets.ncols(), rows.len(), |f, s| self.targets[(rows[s], f)]);
        (x, y)
    }
}

/// `(1/m) sum_i ||z_i - zhat_i||^2 + lambda * sum_l ||W_l||_F^2` over a
/// dataset in network space.
pub fn loss(net: &MlpNetwork, data: &Dataset, lambda: f64) -> Result<f64, DnnError> {
    if data.is_empty() {
        return Err(DnnError::Shape("empty dataset".into()));
    }
    let (x, y) = data.columns(&(0..data.len()).collect::<Vec<_>>());
    let pass = net.forward_batch(&x)?;
    if pass.output().shape() != y.shape() {
        return Err(DnnError::Shape("target width differs from network output".into()));
    }
    let mse = (pass.output() - y).norm_squared() / data.len() as f64;
    Ok(mse + lambda * net.weight_norm_sq())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub amsgrad: bool,
    pub epsilon: f64,
    pub lambda: f64,
    pub epochs: usize,
    /// Mini-batch size; 0 means the full training set.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            amsgrad: true,
            epsilon: 1e-8,
            lambda: 0.0,
            epochs: 100,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DnnError> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(DnnError::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if !(self.lambda >= 0.0) || !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(DnnError::Config(
                "lambda must be >= 0, learning rate and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment estimates over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_max: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            v_max: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place. Returns the
    /// denominators used, for inspection.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], config: &TrainConfig) -> Vec<f64> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        let mut denominators = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = config.beta1 * self.m[i] + (1.0 - config.beta1) * g;
            self.v[i] = config.beta2 * self.v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let second = if config.amsgrad {
                self.v_max[i] = self.v_max[i].max(v_hat);
                self.v_max[i]
            } else {
                v_hat
            };
            let denom = second.sqrt() + config.epsilon;
            params[i] -= config.learning_rate * m_hat / denom;
            denominators.push(denom);
        }
        denominators
    }
}

/// Flattened parameter view: each layer's weights (column-major) then bias.
pub fn flatten_params(net: &MlpNetwork) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    for l in &net.layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    out
}

pub fn unflatten_params(net: &mut MlpNetwork, params: &[f64]) {
    let mut at = 0;
    for l in &mut net.layers {
        let nw = l.weights.len();
        l.weights.as_mut_slice().copy_from_slice(&params[at..at + nw]);
        at += nw;
        let nb = l.bias.len();
        l.bias.as_mut_slice().copy_from_slice(&params[at..at + nb]);
        at += nb;
    }
}

pub fn flatten_grads(grads: &Gradients) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in grads.weights.iter().zip(&grads.biases) {
        out.extend_from_slice(w.as_slice());
        out.extend_from_slice(b.as_slice());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

/// Trains `net` on data already in network space. Each epoch visits the
/// training set in a seeded random order, split into mini-batches.
pub fn train(
    mut net: MlpNetwork,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<(MlpNetwork, LossHistory), DnnError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(DnnError::Shape("empty training set".into()));
    }
    if train_set.inputs.ncols() != net.n_inputs() || train_set.targets.ncols() != net.n_outputs() {
        return Err(DnnError::Shape("training data does not match network sizes".into()));
    }
    let m = train_set.len();
    let batch = if config.batch_size == 0 { m } else { config.batch_size.min(m) };
    let mut params = flatten_params(&net);
    let mut adam = AdamState::new(params.len());
    let mut history = LossHistory::default();
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..config.epochs {
        let mut rng = CounterRng::new(config.seed, 1 + epoch as u64);
        for i in (1..m).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let (x, y) = train_set.columns(chunk);
            let grads = net.backprop(&x, &y)?;
            let mut g = flatten_grads(&grads);
            if config.lambda > 0.0 {
                add_weight_decay(&net, &mut g, config.lambda);
            }
            adam.step(&mut params, &g, config);
            unflatten_params(&mut net, &params);
        }
        let tl = loss(&net, train_set, config.lambda)?;
        let vl = if val_set.is_empty() {
            f64::NAN
        } else {
            loss(&net, val_set, config.lambda)?
        };
        if !tl.is_finite() || !(val_set.is_empty() || vl.is_finite()) {
            return Err(DnnError::Diverged { epoch });
        }
        history.train.push(tl);
        history.validation.push(vl);
        if epoch % 25 == 0 {
            debug!("epoch {epoch}: train {tl:.4e} validation {vl:.4e}");
        }
    }
    Ok((net, history))
}

// Adds 2*lambda*W to the weight entries of a flattened gradient.
fn add_weight_decay(net: &MlpNetwork, g: &mut [f64], lambda: f64) {
    let mut at = 0;
    for l in &net.layers {
        for (gi, w) in g[at..at + l.weights.len()].iter_mut().zip(l.weights.iter()) {
            *gi += 2.0 * lambda * w;
        }
        at += l.weights.len() + l.bias.len();
    }
}

/// `100 * mean|true - predicted| / max|true|` over all entries.
pub fn relative_average_percent_error(truth: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<f64, DnnError> {
    if truth.shape() != predicted.shape() {
        return Err(DnnError::Shape(format!("{:?} vs {:?}", truth.shape(), predicted.shape())));
    }
    let scale = truth.amax();
    if !(scale > 0.0) {
        return Err(DnnError::UndefinedMetric);
    }
    let mean = (truth - predicted).abs().sum() / truth.len() as f64;
    Ok(100.0 * mean / scale)
}

/// Output quantity a preset is tuned for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    Nusselt,
    Temperature,
    Velocity,
}

/// Hidden widths and regularization for one quantity. The full presets are
/// the production sizes; the desk presets shrink every hidden layer to 32
/// neurons and use four of them.
pub fn preset(kind: PresetKind, desk: bool) -> (Vec<usize>, f64) {
    let (layers, lambda) = match kind {
        PresetKind::Nusselt => (5, 0.001),
        PresetKind::Temperature => (4, 0.001),
        PresetKind::Velocity => (4, 0.01),
    };
    if desk {
        (vec![32; 4], lambda)
    } else {
        (vec![300; layers], lambda)
    }
}

impl MlpNetwork {
    pub fn write<W: Write>(&self, mut out: W) -> Result<(), DnnError> {
        let join = |v: &[f64]| v.iter().map(|x| fmt_real(*x)).collect::<Vec<_>>().join(" ");
        let mut s = format!("{FORMAT_TAG} {FORMAT_VERSION}\n");
        let sizes: Vec<String> = self.sizes().iter().map(|n| n.to_string()).collect();
        s.push_str(&format!("layers {}\n", sizes.join(" ")));
        let acts: Vec<&str> = self.layers.iter().map(|l| l.activation.name()).collect();
        s.push_str(&format!("activations {}\n", acts.join(" ")));
        s.push_str(&format!("input_mean {}\n", join(&self.input_scaling.mean)));
        s.push_str(&format!("input_std {}\n", join(&self.input_scaling.std)));
        s.push_str(&format!("output_mean {}\n", join(&self.output_scaling.mean)));
        s.push_str(&format!("output_std {}\n", join(&self.output_scaling.std)));
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                let row: Vec<f64> = l.weights.row(r).iter().copied().collect();
                s.push_str(&join(&row));
                s.push('\n');
            }
            s.push_str(&join(l.bias.as_slice()));
            s.push('\n');
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, DnnError> {
        let lines: Vec<String> = BufReader::new(input).lines().collect::<Result<_, _>>()?;
        let err = |line: usize, msg: &str| DnnError::Parse {
            line,
            msg: msg.to_string(),
        };
        let line = |i: usize| lines.get(i).map(String::as_str).ok_or_else(|| err(i + 1, "unexpected end of file"));
        if line(0)? != format!("{FORMAT_TAG} {FORMAT_VERSION}") {
            return Err(err(1, "unsupported model format or version"));
        }
        let tagged = |i: usize, tag: &str| -> Result<Vec<String>, DnnError> {
            let mut parts = line(i)?.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(err(i + 1, &format!("expected `{tag}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let reals = |i: usize, parts: Vec<String>| -> Result<Vec<f64>, DnnError> {
            parts.iter().map(|p| p.parse().map_err(|_| err(i + 1, "bad number"))).collect()
        };
        let sizes: Vec<usize> = tagged(1, "layers")?
            .iter()
            .map(|p| p.parse().map_err(|_| err(2, "bad layer size")))
            .collect::<Result<_, _>>()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(err(2, "need at least two non-empty layers"));
        }
        let acts: Vec<Activation> = tagged(2, "activations")?
            .iter()
            .map(|a| Activation::parse(a).ok_or_else(|| err(3, "unknown activation")))
            .collect::<Result<_, _>>()?;
        if acts.len() != sizes.len() - 1 {
            return Err(err(3, "one activation per layer expected"));
        }
        let input_mean = reals(3, tagged(3, "input_mean")?)?;
        let input_std = reals(4, tagged(4, "input_std")?)?;
        let output_mean = reals(5, tagged(5, "output_mean")?)?;
        let output_std = reals(6, tagged(6, "output_std")?)?;
        let (n_in, n_out) = (sizes[0], sizes[sizes.len() - 1]);
        if input_mean.len() != n_in || input_std.len() != n_in || output_mean.len() != n_out || output_std.len() != n_out
        {
            return Err(err(4, "scaling length differs from layer size"));
        }
        let mut at = 7;
        let mut layers = Vec::with_capacity(acts.len());
        for (j, act) in acts.into_iter().enumerate() {
            let (fan_in, fan_out) = (sizes[j], sizes[j + 1]);
            let mut weights = DMatrix::zeros(fan_out, fan_in);
            for r in 0..fan_out {
                let row = reals(at, line(at)?.split_whitespace().map(str::to_string).collect())?;
                if row.len() != fan_in {
                    return Err(err(at + 1, "weight row length differs from layer input"));
                }
                for (c, v) in row.into_iter().enumerate() {
                    weights[(r, c)] = v;
                }
                at += 1;
            }
            let bias = reals(at, line(at)?.split_whitespace().map(str::to_string).collect())?;
            if bias.len() != fan_out {
                return Err(err(at + 1, "bias length differs from layer output"));
            }
            at += 1;
            layers.push(Layer {
                weights,
                bias: DVector::from_vec(bias),
                activation: act,
            });
        }
        Ok(Self {
            layers,
            input_scaling: Scaling {
                mean: input_mean,
                std: input_std,
            },
            output_scaling: Scaling {
                mean: output_mean,
                std: output_std,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_net() -> MlpNetwork {
        let mut net = MlpNetwork::new(&[2, 2, 1], 0).unwrap();
        for l in &mut net.layers {
            l.weights.fill(1.0);
            l.bias.fill(0.0);
        }
        net
    }

    #[test]
    fn forward_by_hand() {
        let net = ones_net();
        let (y, pass) = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(pass.post[1].as_slice(), &[2.0, 2.0]);
        assert_eq!(y, vec![4.0]);
        let (y, _) = net.forward(&[1.0, -2.0]).unwrap();
        assert_eq!(y, vec![0.0]);
        let mut net = net;
        net.layers[1].weights.fill(0.0);
        net.layers[1].bias.fill(2.5);
        assert_eq!(net.forward(&[7.0, -3.0]).unwrap().0, vec![2.5]);
        assert!(matches!(net.forward(&[1.0]), Err(DnnError::Shape(_))));
    }

    #[test]
    fn loss_cases() {
        let mut net = MlpNetwork::new(&[1, 1], 0).unwrap();
        net.layers[0].weights.fill(0.0);
        let d = Dataset::new(DMatrix::from_element(1, 1, 3.0), DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(loss(&net, &d, 0.0).unwrap(), 1.0);
        assert_eq!(loss(&net, &d, 5.0).unwrap(), 1.0);
        let perfect = Dataset::new(DMatrix::from_element(1, 1, 3.0), DMatrix::from_element(1, 1, 0.0)).unwrap();
        assert_eq!(loss(&net, &perfect, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn linear_neuron_gradient() {
        let mut net = MlpNetwork::new(&[2, 1], 0).unwrap();
        net.layers[0].weights.copy_from_slice(&[0.5, -1.5]);
        let x = DMatrix::from_column_slice(2, 1, &[2.0, 3.0]);
        let z = DMatrix::from_element(1, 1, 1.0);
        let g = net.backprop(&x, &z).unwrap();
        let yhat = 0.5 * 2.0 - 1.5 * 3.0;
        assert!((g.weights[0][(0, 0)] - 2.0 * (yhat - 1.0) * 2.0).abs() < 1e-14);
        assert!((g.weights[0][(0, 1)] - 2.0 * (yhat - 1.0) * 3.0).abs() < 1e-14);
        assert!((g.biases[0][0] - 2.0 * (yhat - 1.0)).abs() < 1e-14);
        let fit = DMatrix::from_element(1, 1, yhat);
        assert_eq!(net.backprop(&x, &fit).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        st.step(&mut p, &[0.3, 0.0], &cfg);
        assert!((1.0 - p[0] - cfg.learning_rate).abs() < 1e-9);
        assert_eq!(p[1], 1.0);
        for _ in 0..10 {
            st.step(&mut p, &[0.0, 0.0], &cfg);
        }
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn amsgrad_denominator_dominates() {
        let ams = TrainConfig::default();
        let plain = TrainConfig {
            amsgrad: false,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (AdamState::new(3), AdamState::new(3));
        let (mut pa, mut pb) = (vec![0.0; 3], vec![0.0; 3]);
        let g = [0.5, -2.0, 1e-3];
        for _ in 0..2 {
            let da = a.step(&mut pa, &g, &ams);
            let db = b.step(&mut pb, &g, &plain);
            for (x, y) in da.iter().zip(&db) {
                assert!(x >= y);
            }
        }
        for i in 0..3 {
            assert!(a.v_max[i] >= a.v[i]);
        }
    }

    #[test]
    fn metric_cases() {
        let t = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]);
        let p = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 1.0]);
        assert!((relative_average_percent_error(&t, &p).unwrap() - 100.0 / 6.0).abs() < 1e-12);
        assert_eq!(relative_average_percent_error(&t, &t).unwrap(), 0.0);
        let scaled = relative_average_percent_error(&(&t * 7.5), &(&p * 7.5)).unwrap();
        assert!((scaled - 100.0 / 6.0).abs() < 1e-12);
        let z = DMatrix::zeros(1, 3);
        assert!(matches!(relative_average_percent_error(&z, &p), Err(DnnError::UndefinedMetric)));
    }

    #[test]
    fn model_round_trip() {
        let mut net = MlpNetwork::new(&[3, 5, 4, 2], 9).unwrap();
        net.input_scaling = Scaling {
            mean: vec![1.05, 1.04, 1.06],
            std: vec![0.003, 0.004, 0.005],
        };
        net.layers[1].bias[2] = -0.125;
        let mut buf = Vec::new();
        net.write(&mut buf).unwrap();
        assert_eq!(MlpNetwork::read(&buf[..]).unwrap(), net);
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let x = DMatrix::from_fn(40, 2, |r, c| ((r * 7 + c * 3) % 11) as f64 / 5.0 - 1.0);
        let y = DMatrix::from_fn(40, 1, |r, _| x[(r, 0)] - 2.0 * x[(r, 1)] + 0.5);
        let d = Dataset::new(x, y).unwrap();
        let net = MlpNetwork::new(&[2, 8, 1], 3).unwrap();
        let before = net.weight_norm_sq();
        let cfg = TrainConfig {
            lambda: 1e3,
            epochs: 200,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (net, _) = train(net, &d, &d, &cfg).unwrap();
        assert!(net.weight_norm_sq() < 1e-2 * before, "{}", net.weight_norm_sq());
        let spread = |m: &DMatrix<f64>| m.max() - m.min();
        let pred = net.predict_rows(&d.inputs).unwrap();
        assert!(spread(&pred) < 0.05 * spread(&d.targets), "{}", spread(&pred));
    }
}
