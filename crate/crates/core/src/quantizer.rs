//! Mixed-precision quantization: uniform integer-code quantization with a
//! mean-magnitude scale, PACT activation clipping, per-layer first-order
//! sensitivity, greedy precision assignment, and model-size accounting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{decode_f64, encode_f64, FormatKind, FormatSpec, ReportNumber};

/// `mean(|W|) * (2^n - 1) / 2^(n-1)`.
pub fn scale_k(w: &[f64], n: u32) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("scale of an empty tensor".into()));
    }
    check_bits(n)?;
    let mean = w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
    Ok(mean * levels(n) / (1u64 << (n - 1)) as f64)
}

fn check_bits(n: u32) -> Result<()> {
    if !(2..=32).contains(&n) {
        return Err(Error::InvalidArgument(format!("bit-width must be in 2..=32, got {n}")));
    }
    Ok(())
}

/// `2^n - 1`.
fn levels(n: u32) -> f64 {
    ((1u64 << n) - 1) as f64
}

/// How saturation thresholds are chosen from `W / k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thresholds {
    /// Percentiles of `W / k`, in percent.
    Percentile { lo: f64, hi: f64 },
    /// `[-1, 1]`.
    Symmetric,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Percentile { lo: 0.1, hi: 99.9 }
    }
}

/// Linearly interpolated percentile of an unsorted sample.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub n: u32,
    pub w_l: f64,
    pub w_h: f64,
    /// Zero marks a degenerate all-zero tensor.
    pub k: f64,
}

impl QuantConfig {
    pub fn new(n: u32, w_l: f64, w_h: f64, k: f64) -> Result<Self> {
        check_bits(n)?;
        if !(w_l < w_h) {
            return Err(Error::InvalidArgument(format!("need W_l < W_h, got {w_l} and {w_h}")));
        }
        Ok(QuantConfig { n, w_l, w_h, k })
    }

    /// Scale and thresholds fitted to `w`.
    pub fn fit(w: &[f64], n: u32, thresholds: Thresholds) -> Result<Self> {
        let k = scale_k(w, n)?;
        if k == 0.0 {
            return Self::new(n, -1.0, 1.0, 0.0);
        }
        let (mut lo, mut hi) = match thresholds {
            Thresholds::Symmetric => (-1.0, 1.0),
            Thresholds::Percentile { lo, hi } => {
                let scaled: Vec<f64> = w.iter().map(|x| x / k).collect();
                (percentile(&scaled, lo), percentile(&scaled, hi))
            }
        };
        if lo >= hi {
            // constant tensors: widen to a symmetric window around the value
            let m = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
            lo = -m;
            hi = m;
        }
        Self::new(n, lo, hi, k)
    }

    pub fn is_degenerate(&self) -> bool {
        self.k == 0.0
    }

    /// Spacing of the dequantized levels.
    pub fn step(&self) -> f64 {
        (self.w_h - self.w_l) / levels(self.n)
    }

    pub fn max_code(&self) -> u32 {
        ((1u64 << self.n) - 1) as u32
    }
}

/// `round((clip(W/k, W_l, W_h) - W_l) * (2^n - 1) / (W_h - W_l))`, ties to even.
pub fn quantize(w: &[f64], cfg: &QuantConfig) -> Result<Vec<u32>> {
    if cfg.is_degenerate() {
        return Ok(vec![0; w.len()]);
    }
    if !(cfg.k > 0.0) {
        return Err(Error::InvalidArgument(format!("scale k must be positive, got {}", cfg.k)));
    }
    let gain = levels(cfg.n) / (cfg.w_h - cfg.w_l);
    Ok(w.iter()
        .map(|&x| {
            let c = (x / cfg.k).clamp(cfg.w_l, cfg.w_h);
            ((c - cfg.w_l) * gain).round_ties_even() as u32
        })
        .collect())
}

/// `Ŵ * (W_h - W_l) / (2^n - 1) + W_l`, in the `W / k` domain.
pub fn dequantize(codes: &[u32], cfg: &QuantConfig) -> Result<Vec<f64>> {
    let max = cfg.max_code();
    codes
        .iter()
        .map(|&c| {
            if c > max {
                Err(Error::InvalidArgument(format!("code {c} exceeds {max}")))
            } else {
                Ok(c as f64 * (cfg.w_h - cfg.w_l) / levels(cfg.n) + cfg.w_l)
            }
        })
        .collect()
}

/// Quantize then dequantize, scaled back by `k`. Degenerate tensors stay zero.
pub fn fake_quantize(w: &[f64], cfg: &QuantConfig) -> Result<Vec<f64>> {
    if cfg.is_degenerate() {
        return Ok(vec![0.0; w.len()]);
    }
    let q = dequantize(&quantize(w, cfg)?, cfg)?;
    Ok(q.into_iter().map(|x| x * cfg.k).collect())
}

/// Shannon entropy of the code histogram, in bits. Diagnostic only.
pub fn code_entropy(codes: &[u32]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in codes {
        *hist.entry(c).or_default() += 1;
    }
    let n = codes.len() as f64;
    hist.values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("PACT alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// `0.5 * (|x| - |x - α| + α)`, which is `clip(x, 0, α)`.
pub fn pact(x: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(x.clamp(0.0, alpha))
}

/// `round(pact(x, α) * (2^n - 1) / α) * α / (2^n - 1)`, ties to even.
pub fn pact_quantize(x: f64, alpha: f64, n: u32) -> Result<f64> {
    check_bits(n)?;
    let y = pact(x, alpha)?;
    let l = levels(n);
    Ok((y * l / alpha).round_ties_even() * alpha / l)
}

/// Nearest value of `format` after the power-of-two rescale from
/// [`tensor_scale`].
pub fn quantize_to_format(w: &[f64], format: FormatSpec) -> Vec<f64> {
    if format.kind() == FormatKind::Real64 {
        return w.to_vec();
    }
    let scale = tensor_scale(w, format);
    w.iter()
        .map(|&x| decode_f64(encode_f64(x / scale, format), format) * scale)
        .collect()
}

/// Values looked at when fitting a scale; larger tensors are strided.
const SCALE_SAMPLE: usize = 4096;

/// Power-of-two scale used when mapping a tensor onto `format`: the one that
/// minimizes the squared rounding error over the tensor. The search covers
/// the scale that just fits the largest magnitude and the one that puts the
/// rms at 1, plus 8 halvings below. Ties keep the larger scale.
pub fn tensor_scale(w: &[f64], format: FormatSpec) -> f64 {
    if format.kind() == FormatKind::Real64 {
        return 1.0;
    }
    let max = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() {
        return 1.0;
    }
    let step = w.len().div_ceil(SCALE_SAMPLE).max(1);
    let sample: Vec<f64> = w.iter().step_by(step).copied().collect();
    let maxval = decode_f64(format.maxpos_bits(), format);
    let fit = (max / maxval).log2().ceil() as i32;
    let rms = (sample.iter().map(|x| x * x).sum::<f64>() / sample.len() as f64).sqrt();
    let centre = rms.log2().round() as i32;
    let mut best = (f64::INFINITY, fit);
    for e in (fit.min(centre) - 8..=fit.max(centre) + 2).rev() {
        let s = 2f64.powi(e);
        let err: f64 = sample
            .iter()
            .map(|&x| (decode_f64(encode_f64(x / s, format), format) * s - x).powi(2))
            .sum();
        if err < best.0 {
            best = (err, e);
        }
    }
    2f64.powi(best.1)
}

/// A layer's weights and (optionally) its loss gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTensor {
    pub layer_id: String,
    pub weights: Vec<f64>,
    pub gradient: Option<Vec<f64>>,
}

impl LayerTensor {
    pub fn new(layer_id: impl Into<String>, weights: Vec<f64>, gradient: Option<Vec<f64>>) -> Result<Self> {
        let layer_id = layer_id.into();
        if let Some(g) = &gradient {
            if g.len() != weights.len() {
                return Err(Error::LengthMismatch { left: weights.len(), right: g.len() });
            }
        }
        Ok(LayerTensor { layer_id, weights, gradient })
    }

    pub fn params(&self) -> usize {
        self.weights.len()
    }
}

/// Per-layer weight and activation formats.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrecision {
    pub layer_id: String,
    pub weights: FormatSpec,
    pub activations: FormatSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionMap {
    pub layers: Vec<LayerPrecision>,
}

impl PrecisionMap {
    pub fn uniform<S: AsRef<str>>(ids: &[S], format: FormatSpec) -> Self {
        PrecisionMap {
            layers: ids
                .iter()
                .map(|id| LayerPrecision {
                    layer_id: id.as_ref().to_string(),
                    weights: format,
                    activations: format,
                })
                .collect(),
        }
    }

    /// `all_fp32`, `all_posit16`, `all_posit8`, `all_posit4`, `all_fp4`, or
    /// `all_<format name>`.
    pub fn preset<S: AsRef<str>>(name: &str, ids: &[S]) -> Result<Self> {
        let format = match name {
            "all_fp32" | "all_real64" => FormatSpec::REAL64,
            "all_posit16" => FormatSpec::POSIT16_1,
            "all_posit8" => FormatSpec::POSIT8_0,
            "all_posit4" => FormatSpec::POSIT4_1,
            "all_fp4" => FormatSpec::FP4,
            other => match other.strip_prefix("all_") {
                Some(f) => f.parse()?,
                None => return Err(Error::InvalidArgument(format!("unknown map preset `{name}`"))),
            },
        };
        Ok(Self::uniform(ids, format))
    }

    pub fn get(&self, layer_id: &str) -> Option<&LayerPrecision> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Every id in `ids` must appear exactly once, and nothing else.
    pub fn validate<S: AsRef<str>>(&self, ids: &[S]) -> Result<()> {
        for id in ids {
            let n = self.layers.iter().filter(|l| l.layer_id == id.as_ref()).count();
            if n == 0 {
                return Err(Error::IncompleteMap(id.as_ref().to_string()));
            }
            if n > 1 {
                return Err(Error::InvalidArgument(format!("layer `{}` mapped twice", id.as_ref())));
            }
        }
        if let Some(extra) = self
            .layers
            .iter()
            .find(|l| !ids.iter().any(|id| id.as_ref() == l.layer_id))
        {
            return Err(Error::InvalidArgument(format!("map names unknown layer `{}`", extra.layer_id)));
        }
        Ok(())
    }
}

/// How the quantizers inside the sensitivity metric are realized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMethod {
    /// Integer-code quantizer at the format's bit-width.
    #[default]
    Uniform,
    /// Nearest value of the format lattice.
    Lattice,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityOptions {
    pub method: SensitivityMethod,
    pub thresholds: Thresholds,
    /// Candidate format for 4-bit in the lattice method and in assignment.
    pub four_bit: FormatSpec,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            method: SensitivityMethod::Uniform,
            thresholds: Thresholds::default(),
            four_bit: FormatSpec::FP4,
        }
    }
}

/// Candidate format for a bit-width.
pub fn format_for_bits(bits: u32, four_bit: FormatSpec) -> Result<FormatSpec> {
    match bits {
        4 => Ok(four_bit),
        8 => Ok(FormatSpec::POSIT8_0),
        16 => Ok(FormatSpec::POSIT16_1),
        _ => Err(Error::InvalidArgument(format!("no candidate format for {bits} bits"))),
    }
}

/// `Q(w)` for a layer held in `format`. Real64 is the unquantized baseline.
pub fn quantize_layer(w: &[f64], format: FormatSpec, opts: &SensitivityOptions) -> Result<Vec<f64>> {
    if format.kind() == FormatKind::Real64 {
        return Ok(w.to_vec());
    }
    match opts.method {
        SensitivityMethod::Uniform => {
            let cfg = QuantConfig::fit(w, format.bits(), opts.thresholds)?;
            fake_quantize(w, &cfg)
        }
        SensitivityMethod::Lattice => Ok(quantize_to_format(w, format)),
    }
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(‖Q(w) - w‖ - ‖Q'_k(w) - w‖) * ‖∇L‖ / n`, with `Q` the layer's current
/// format and `Q'_k` the `k`-bit candidate.
pub fn layer_sensitivity(
    layer: &LayerTensor,
    current: FormatSpec,
    candidate_bits: u32,
    opts: &SensitivityOptions,
) -> Result<f64> {
    let grad = layer
        .gradient
        .as_ref()
        .ok_or_else(|| Error::MissingGradient(layer.layer_id.clone()))?;
    if layer.weights.is_empty() {
        return Err(Error::InvalidArgument(format!("layer `{}` has no weights", layer.layer_id)));
    }
    let w = &layer.weights;
    let cand = format_for_bits(candidate_bits, opts.four_bit)?;
    let cur_err = l2_dist(&quantize_layer(w, current, opts)?, w);
    let cand_err = if cand == current {
        cur_err
    } else {
        l2_dist(&quantize_layer(w, cand, opts)?, w)
    };
    Ok((cur_err - cand_err) * l2(grad) / w.len() as f64)
}

/// `max(s_8, s_4)`.
pub fn layer_score(s8: f64, s4: f64) -> f64 {
    s8.max(s4)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer_id: String,
    pub params: usize,
    pub current: FormatSpec,
    pub s8: ReportNumber,
    pub s4: ReportNumber,
    pub s_l: ReportNumber,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub method: SensitivityMethod,
    pub layers: Vec<LayerSensitivity>,
    /// Layer ids, least sensitive first (the demotion order).
    pub ranking: Vec<String>,
}

impl SensitivityReport {
    pub fn scores(&self) -> Vec<(String, usize, f64)> {
        self.layers
            .iter()
            .map(|l| (l.layer_id.clone(), l.params, l.s_l.value))
            .collect()
    }
}

/// Sensitivity of every layer against the current map.
pub fn sensitivity_report(
    layers: &[LayerTensor],
    current: &PrecisionMap,
    opts: &SensitivityOptions,
) -> Result<SensitivityReport> {
    let ids: Vec<&str> = layers.iter().map(|l| l.layer_id.as_str()).collect();
    current.validate(&ids)?;
    let rows = layers
        .par_iter()
        .map(|layer| {
            let cur = current.get(&layer.layer_id).expect("validated").weights;
            let s8 = layer_sensitivity(layer, cur, 8, opts)?;
            let s4 = layer_sensitivity(layer, cur, 4, opts)?;
            Ok(LayerSensitivity {
                layer_id: layer.layer_id.clone(),
                params: layer.params(),
                current: cur,
                s8: s8.into(),
                s4: s4.into(),
                s_l: layer_score(s8, s4).into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<(String, usize, f64)> =
        rows.iter().map(|r| (r.layer_id.clone(), r.params, r.s_l.value)).collect();
    Ok(SensitivityReport {
        method: opts.method,
        ranking: demotion_order(&scores),
        layers: rows,
    })
}

/// Least sensitive first: ascending `|s_l|`, ties by layer id.
pub fn demotion_order(scores: &[(String, usize, f64)]) -> Vec<String> {
    let mut order: Vec<&(String, usize, f64)> = scores.iter().collect();
    order.sort_by(|a, b| a.2.abs().total_cmp(&b.2.abs()).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().map(|s| s.0.clone()).collect()
}

fn avg_bits(params: &[usize], bits: &[u32]) -> f64 {
    let total: usize = params.iter().sum();
    if total == 0 {
        return 0.0;
    }
    params.iter().zip(bits).map(|(&n, &b)| n as f64 * b as f64).sum::<f64>() / total as f64
}

/// Greedy assignment under a parameter-weighted average bit budget.
///
/// Layers start at 16 bits and are demoted to 4 bits, least sensitive first,
/// until the average fits. A fill pass then walks the 4-bit layers from most
/// to least sensitive and raises each to the widest of 16/8 bits that keeps
/// the budget.
pub fn assign_precisions(
    scores: &[(String, usize, f64)],
    budget: f64,
    four_bit: FormatSpec,
) -> Result<PrecisionMap> {
    if !(budget >= 4.0) {
        return Err(Error::InfeasibleBudget(budget));
    }
    let order = demotion_order(scores);
    let index: BTreeMap<&str, usize> =
        scores.iter().enumerate().map(|(i, s)| (s.0.as_str(), i)).collect();
    let params: Vec<usize> = scores.iter().map(|s| s.1).collect();
    let mut bits = vec![16u32; scores.len()];

    for id in &order {
        if avg_bits(&params, &bits) <= budget {
            break;
        }
        bits[index[id.as_str()]] = 4;
    }
    for id in order.iter().rev() {
        let i = index[id.as_str()];
        if bits[i] != 4 {
            continue;
        }
        for up in [16, 8] {
            bits[i] = up;
            if avg_bits(&params, &bits) <= budget {
                break;
            }
            bits[i] = 4;
        }
    }

    let mut layers = Vec::with_capacity(scores.len());
    for (s, &b) in scores.iter().zip(&bits) {
        let f = format_for_bits(b, four_bit)?;
        layers.push(LayerPrecision { layer_id: s.0.clone(), weights: f, activations: f });
    }
    Ok(PrecisionMap { layers })
}

/// Name and parameter count of a layer, for size accounting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub layer_id: String,
    pub params: usize,
}

pub const SCALE_METADATA_BYTES: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub params: u64,
    pub weight_bytes: u64,
    pub metadata_bytes: u64,
    pub total_bytes: u64,
    pub weight_mib: ReportNumber,
    pub total_mib: ReportNumber,
    /// Parameter-weighted average bits per weight.
    pub avg_bits: ReportNumber,
}

/// `Σ ceil(n_l * bits_l / 8)` plus one 32-bit scale per layer. Real64
/// layers count as FP32.
pub fn model_size_bytes(layers: &[LayerInfo], map: &PrecisionMap) -> Result<SizeReport> {
    let ids: Vec<&str> = layers.iter().map(|l| l.layer_id.as_str()).collect();
    map.validate(&ids)?;
    let mut weight_bytes = 0u64;
    let mut weight_bits = 0u64;
    let mut params = 0u64;
    for l in layers {
        let bits = map.get(&l.layer_id).expect("validated").weights.storage_bits() as u64;
        weight_bits += l.params as u64 * bits;
        weight_bytes += (l.params as u64 * bits).div_ceil(8);
        params += l.params as u64;
    }
    let metadata_bytes = SCALE_METADATA_BYTES * layers.len() as u64;
    let total_bytes = weight_bytes + metadata_bytes;
    let mib = |b: u64| b as f64 / (1u64 << 20) as f64;
    Ok(SizeReport {
        params,
        weight_bytes,
        metadata_bytes,
        total_bytes,
        weight_mib: mib(weight_bytes).into(),
        total_mib: mib(total_bytes).into(),
        avg_bits: (if params == 0 { 0.0 } else { weight_bits as f64 / params as f64 }).into(),
    })
}
