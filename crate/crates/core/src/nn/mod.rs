//! Small reference networks: dense and im2col convolution layers, ReLU and
//! PACT activations, cross-entropy and MSE losses, analytic gradients.

mod data;
mod quantized;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{decode_f64, encode_f64, FormatSpec};

pub use data::Dataset;
pub use quantized::{evaluate_quantized, forward_quantized, Calibration, LayerRun, LayerScales};
pub use train::{evaluate, qat_train, train, EpochRecord, History, Metrics, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Input laid out as `(channels, height, width)`.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        height: usize,
        width: usize,
        stride: usize,
        padding: usize,
    },
}

impl LayerKind {
    pub fn in_features(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d { in_ch, height, width, .. } => in_ch * height * width,
        }
    }

    pub fn out_features(&self) -> usize {
        self.rows() * self.positions()
    }

    /// Rows of the weight matrix: outputs or output channels.
    pub fn rows(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv2d { out_ch, .. } => out_ch,
        }
    }

    /// Columns of the weight matrix.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
        }
    }

    /// Output spatial size.
    pub fn out_hw(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { .. } => (1, 1),
            LayerKind::Conv2d { kernel, height, width, stride, padding, .. } => (
                (height + 2 * padding - kernel) / stride + 1,
                (width + 2 * padding - kernel) / stride + 1,
            ),
        }
    }

    /// Number of output positions per row (1 for dense layers).
    pub fn positions(&self) -> usize {
        let (h, w) = self.out_hw();
        h * w
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerKind::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerKind::Conv2d { in_ch, out_ch, kernel, height, width, stride, padding } => {
                in_ch > 0
                    && out_ch > 0
                    && kernel > 0
                    && stride > 0
                    && height + 2 * padding >= kernel
                    && width + 2 * padding >= kernel
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("degenerate layer {self:?}")))
        }
    }

    /// Lowers one input sample to a `fan_in x positions` matrix.
    pub fn lower(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            LayerKind::Dense { .. } => x.to_vec(),
            LayerKind::Conv2d { in_ch, kernel, height, width, stride, padding, .. } => {
                let (oh, ow) = self.out_hw();
                let p = oh * ow;
                let mut cols = vec![0.0; self.fan_in() * p];
                for c in 0..in_ch {
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let f = (c * kernel + ki) * kernel + kj;
                            for i in 0..oh {
                                let r = (i * stride + ki) as isize - padding as isize;
                                if r < 0 || r >= height as isize {
                                    continue;
                                }
                                for j in 0..ow {
                                    let s = (j * stride + kj) as isize - padding as isize;
                                    if s < 0 || s >= width as isize {
                                        continue;
                                    }
                                    cols[f * p + i * ow + j] =
                                        x[(c * height + r as usize) * width + s as usize];
                                }
                            }
                        }
                    }
                }
                cols
            }
        }
    }

    /// Adjoint of [`LayerKind::lower`].
    fn raise(&self, dcols: &[f64]) -> Vec<f64> {
        match *self {
            LayerKind::Dense { .. } => dcols.to_vec(),
            LayerKind::Conv2d { in_ch, kernel, height, width, stride, padding, .. } => {
                let (oh, ow) = self.out_hw();
                let p = oh * ow;
                let mut dx = vec![0.0; self.in_features()];
                for c in 0..in_ch {
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let f = (c * kernel + ki) * kernel + kj;
                            for i in 0..oh {
                                let r = (i * stride + ki) as isize - padding as isize;
                                if r < 0 || r >= height as isize {
                                    continue;
                                }
                                for j in 0..ow {
                                    let s = (j * stride + kj) as isize - padding as isize;
                                    if s < 0 || s >= width as isize {
                                        continue;
                                    }
                                    dx[(c * height + r as usize) * width + s as usize] +=
                                        dcols[f * p + i * ow + j];
                                }
                            }
                        }
                    }
                }
                dx
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// `clip(x, 0, α)` with the layer's trainable `alpha`.
    Pact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    /// Mean over outputs of the squared error.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub activation: Activation,
    pub alpha: f64,
    /// `rows x fan_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind, activation: Activation) -> Self {
        Layer {
            id: id.into(),
            kind,
            activation,
            alpha: 4.0,
            weights: vec![0.0; kind.rows() * kind.fan_in()],
            bias: vec![0.0; kind.rows()],
        }
    }

    pub fn dense(id: impl Into<String>, inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self::new(id, LayerKind::Dense { inputs, outputs }, activation)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        id: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        (height, width): (usize, usize),
        stride: usize,
        padding: usize,
        activation: Activation,
    ) -> Self {
        Self::new(
            id,
            LayerKind::Conv2d { in_ch, out_ch, kernel, height, width, stride, padding },
            activation,
        )
    }

    fn activate(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Pact => z.clamp(0.0, self.alpha),
        }
    }
}

/// Per-layer fake quantization used by QAT and by calibration-aware paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct LayerQuant {
    pub format: FormatSpec,
    pub w_scale: f64,
    pub x_scale: f64,
    pub out_scale: f64,
}

/// Rounds `v / scale` into `format` and back; the mask is false where the
/// value saturated.
pub(crate) fn fake_quant(v: &[f64], format: FormatSpec, scale: f64) -> (Vec<f64>, Vec<bool>) {
    let maxval = decode_f64(format.maxpos_bits(), format);
    v.iter()
        .map(|&x| {
            let s = x / scale;
            (decode_f64(encode_f64(s, format), format) * scale, s.abs() <= maxval)
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub loss: Loss,
}

/// Gradients of the loss summed over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
}

impl Grads {
    fn zeros(net: &Network) -> Self {
        Grads {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            alpha: vec![0.0; net.layers.len()],
        }
    }

    fn add(&mut self, other: &Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.alpha.iter_mut().zip(&other.alpha).for_each(|(x, y)| *x += y);
    }
}

struct LayerTrace {
    cols: Vec<f64>,
    cols_mask: Option<Vec<bool>>,
    /// Pre-activation, bias included.
    z: Vec<f64>,
    out_mask: Option<Vec<bool>>,
}

/// Weights as seen by the forward pass.
pub(crate) struct EffectiveWeights {
    w: Vec<Vec<f64>>,
    mask: Vec<Option<Vec<bool>>>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, loss: Loss) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            l.kind.validate()?;
            if l.weights.len() != l.kind.rows() * l.kind.fan_in() || l.bias.len() != l.kind.rows() {
                return Err(Error::ShapeMismatch(format!("layer `{}` parameter sizes", l.id)));
            }
            if l.activation == Activation::Pact && !(l.alpha > 0.0) {
                return Err(Error::InvalidArgument(format!("layer `{}` has PACT alpha {}", l.id, l.alpha)));
            }
            if i > 0 && layers[i - 1].kind.out_features() != l.kind.in_features() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` expects {} inputs, previous layer gives {}",
                    l.id,
                    l.kind.in_features(),
                    layers[i - 1].kind.out_features()
                )));
            }
            if layers[..i].iter().any(|p| p.id == l.id) {
                return Err(Error::InvalidArgument(format!("duplicate layer id `{}`", l.id)));
            }
        }
        Ok(Network { layers, loss })
    }

    /// Dense network with `hidden` activations and an identity output layer,
    /// He-initialized from `seed`.
    pub fn mlp(sizes: &[usize], hidden: Activation, loss: Loss, seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least two sizes".into()));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { hidden };
                Layer::dense(format!("fc{}", i + 1), w[0], w[1], act)
            })
            .collect();
        let mut net = Self::new(layers, loss)?;
        net.init(seed);
        Ok(net)
    }

    /// He-normal weights, zero biases.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut self.layers {
            let std = (2.0 / l.kind.fan_in() as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            l.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn input_features(&self) -> usize {
        self.layers[0].kind.in_features()
    }

    pub fn output_features(&self) -> usize {
        self.layers.last().expect("nonempty").kind.out_features()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_features() {
            return Err(Error::ShapeMismatch(format!(
                "sample has {} features, network takes {}",
                x.len(),
                self.input_features()
            )));
        }
        Ok(())
    }

    pub(crate) fn effective_weights(&self, plan: &[Option<LayerQuant>]) -> EffectiveWeights {
        let (w, mask) = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match plan.get(i).copied().flatten() {
                Some(q) => {
                    let (w, m) = fake_quant(&l.weights, q.format, q.w_scale);
                    (w, Some(m))
                }
                None => (l.weights.clone(), None),
            })
            .unzip();
        EffectiveWeights { w, mask }
    }

    fn trace(&self, x: &[f64], ew: &EffectiveWeights, plan: &[Option<LayerQuant>]) -> (Vec<LayerTrace>, Vec<f64>) {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut y = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let q = plan.get(li).copied().flatten();
            let p = layer.kind.positions();
            let fan = layer.kind.fan_in();
            let rows = layer.kind.rows();
            let mut cols = layer.kind.lower(&y);
            let mut cols_mask = None;
            if let Some(q) = q {
                let (c, m) = fake_quant(&cols, q.format, q.x_scale);
                cols = c;
                cols_mask = Some(m);
            }
            let w = &ew.w[li];
            let mut z = vec![0.0; rows * p];
            for o in 0..rows {
                let zr = &mut z[o * p..(o + 1) * p];
                for f in 0..fan {
                    let wf = w[o * fan + f];
                    let cr = &cols[f * p..(f + 1) * p];
                    for (zv, cv) in zr.iter_mut().zip(cr) {
                        *zv += wf * cv;
                    }
                }
            }
            let mut out_mask = None;
            if let Some(q) = q {
                let (zq, m) = fake_quant(&z, q.format, q.out_scale);
                z = zq;
                out_mask = Some(m);
            }
            for o in 0..rows {
                for zv in &mut z[o * p..(o + 1) * p] {
                    *zv += layer.bias[o];
                }
            }
            y = z.iter().map(|&v| layer.activate(v)).collect();
            traces.push(LayerTrace { cols, cols_mask, z, out_mask });
        }
        (traces, y)
    }

    /// Full-precision output for one sample.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_with(x, &self.effective_weights(&[]), &[]))
    }

    /// Pre-activations (bias included) of every layer for one sample.
    pub fn preactivations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let (traces, _) = self.trace(x, &self.effective_weights(&[]), &[]);
        Ok(traces.into_iter().map(|t| t.z).collect())
    }

    pub(crate) fn forward_with(&self, x: &[f64], ew: &EffectiveWeights, plan: &[Option<LayerQuant>]) -> Vec<f64> {
        self.trace(x, ew, plan).1
    }

    /// Pre-activations (bias excluded) feeding each layer's output, and each
    /// layer's input, for calibration.
    pub(crate) fn layer_io(&self, x: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let ew = self.effective_weights(&[]);
        let (traces, _) = self.trace(x, &ew, &[]);
        traces
            .into_iter()
            .zip(&self.layers)
            .map(|(t, l)| {
                let p = l.kind.positions();
                let raw = t
                    .z
                    .iter()
                    .enumerate()
                    .map(|(i, &z)| z - l.bias[i / p])
                    .collect();
                (t.cols, raw)
            })
            .collect()
    }

    /// Loss of one output against a label. Classification labels are class
    /// indices; MSE compares against the label itself for a single output and
    /// a one-hot vector otherwise.
    pub fn sample_loss(&self, out: &[f64], label: f64) -> f64 {
        self.loss_and_grad(out, label).0
    }

    fn loss_and_grad(&self, out: &[f64], label: f64) -> (f64, Vec<f64>) {
        match self.loss {
            Loss::CrossEntropy => {
                let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = out.iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let c = label as usize;
                let loss = sum.ln() - (out[c] - max);
                let grad = exps
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| e / sum - if i == c { 1.0 } else { 0.0 })
                    .collect();
                (loss, grad)
            }
            Loss::Mse => {
                let m = out.len() as f64;
                let target = |i: usize| {
                    if out.len() == 1 {
                        label
                    } else if i == label as usize {
                        1.0
                    } else {
                        0.0
                    }
                };
                let loss = out.iter().enumerate().map(|(i, &y)| (y - target(i)).powi(2)).sum::<f64>() / m;
                let grad = out.iter().enumerate().map(|(i, &y)| 2.0 * (y - target(i)) / m).collect();
                (loss, grad)
            }
        }
    }

    /// Summed loss of a batch under full precision.
    pub fn batch_loss(&self, xs: &[f64], labels: &[f64]) -> Result<f64> {
        let n = self.input_features();
        if xs.len() != labels.len() * n {
            return Err(Error::ShapeMismatch(format!("{} values for {} samples", xs.len(), labels.len())));
        }
        let ew = self.effective_weights(&[]);
        Ok(xs
            .chunks(n)
            .zip(labels)
            .map(|(x, &t)| self.sample_loss(&self.forward_with(x, &ew, &[]), t))
            .sum())
    }

    /// Summed loss and its exact gradients over a batch.
    pub fn backward(&self, xs: &[f64], labels: &[f64]) -> Result<(f64, Grads)> {
        let n = self.input_features();
        if xs.len() != labels.len() * n {
            return Err(Error::ShapeMismatch(format!("{} values for {} samples", xs.len(), labels.len())));
        }
        let ew = self.effective_weights(&[]);
        let mut g = Grads::zeros(self);
        let mut loss = 0.0;
        for (x, &t) in xs.chunks(n).zip(labels) {
            loss += self.sample_backward(x, t, &ew, &[], &mut g);
        }
        Ok((loss, g))
    }

    /// Accumulates one sample's gradients into `g`; returns its loss.
    pub(crate) fn sample_backward(
        &self,
        x: &[f64],
        label: f64,
        ew: &EffectiveWeights,
        plan: &[Option<LayerQuant>],
        g: &mut Grads,
    ) -> f64 {
        let (traces, out) = self.trace(x, ew, plan);
        let (loss, mut dy) = self.loss_and_grad(&out, label);
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let t = &traces[li];
            let p = layer.kind.positions();
            let fan = layer.kind.fan_in();
            let rows = layer.kind.rows();
            let mut dz = vec![0.0; dy.len()];
            for i in 0..dy.len() {
                let z = t.z[i];
                dz[i] = match layer.activation {
                    Activation::Identity => dy[i],
                    Activation::Relu => {
                        if z > 0.0 {
                            dy[i]
                        } else {
                            0.0
                        }
                    }
                    Activation::Pact => {
                        if z >= layer.alpha {
                            g.alpha[li] += dy[i];
                            0.0
                        } else if z > 0.0 {
                            dy[i]
                        } else {
                            0.0
                        }
                    }
                };
            }
            for o in 0..rows {
                g.bias[li][o] += dz[o * p..(o + 1) * p].iter().sum::<f64>();
            }
            if let Some(m) = &t.out_mask {
                dz.iter_mut().zip(m).for_each(|(d, &keep)| {
                    if !keep {
                        *d = 0.0
                    }
                });
            }
            let w = &ew.w[li];
            let gw = &mut g.weights[li];
            for o in 0..rows {
                let dzr = &dz[o * p..(o + 1) * p];
                for f in 0..fan {
                    let cr = &t.cols[f * p..(f + 1) * p];
                    let s: f64 = dzr.iter().zip(cr).map(|(a, b)| a * b).sum();
                    let keep = ew.mask[li].as_ref().is_none_or(|m| m[o * fan + f]);
                    if keep {
                        gw[o * fan + f] += s;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let mut dcols = vec![0.0; fan * p];
            for o in 0..rows {
                let dzr = &dz[o * p..(o + 1) * p];
                for f in 0..fan {
                    let wf = w[o * fan + f];
                    for (d, &v) in dcols[f * p..(f + 1) * p].iter_mut().zip(dzr) {
                        *d += wf * v;
                    }
                }
            }
            if let Some(m) = &t.cols_mask {
                dcols.iter_mut().zip(m).for_each(|(d, &keep)| {
                    if !keep {
                        *d = 0.0
                    }
                });
            }
            dy = layer.kind.raise(&dcols);
        }
        loss
    }
}
