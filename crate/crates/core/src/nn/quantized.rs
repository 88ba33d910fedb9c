//! Inference on the morphable array, one format per layer.
//!
//! Each quantized layer works on power-of-two rescaled operands: inputs are
//! encoded as `x / s_x`, weights as `w / s_w`, and the array rounds the exact
//! dot product once into the layer format at `s_o / (s_x * s_w)`. Bias and
//! activation are applied to the decoded result in full precision, and the
//! next layer re-encodes it at its own format.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::Metrics;
use super::{Dataset, LayerQuant, Network};
use crate::error::{Error, Result};
use crate::formats::{decode_f64, encode_f64, FormatKind, FormatSpec};
use crate::mac::PrecSel;
use crate::morph_array::{gemm, ArrayConfig, RunStats};
use crate::quantizer::{tensor_scale, PrecisionMap};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScales {
    pub layer_id: String,
    pub format: FormatSpec,
    pub weights: f64,
    pub inputs: f64,
    pub outputs: f64,
}

/// Per-layer scales fitted on a reference forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub layers: Vec<LayerScales>,
}

impl Calibration {
    pub fn new(net: &Network, map: &PrecisionMap, data: &Dataset) -> Result<Self> {
        map.validate(&net.layer_ids())?;
        if data.features != net.input_features() {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} features, network takes {}",
                data.features,
                net.input_features()
            )));
        }
        let ios: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..data.len())
            .into_par_iter()
            .map(|i| net.layer_io(data.sample(i)))
            .collect();
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let format = map.get(&layer.id).expect("validated").weights;
                if format.kind() == FormatKind::Real64 {
                    return LayerScales {
                        layer_id: layer.id.clone(),
                        format,
                        weights: 1.0,
                        inputs: 1.0,
                        outputs: 1.0,
                    };
                }
                let inputs: Vec<f64> = ios.iter().flat_map(|s| s[li].0.iter().copied()).collect();
                let outputs: Vec<f64> = ios.iter().flat_map(|s| s[li].1.iter().copied()).collect();
                LayerScales {
                    layer_id: layer.id.clone(),
                    format,
                    weights: tensor_scale(&layer.weights, format),
                    inputs: tensor_scale(&inputs, format),
                    outputs: tensor_scale(&outputs, format),
                }
            })
            .collect();
        Ok(Calibration { layers })
    }
}

pub(crate) fn plan_for(net: &Network, map: &PrecisionMap, calib: &Calibration) -> Result<Vec<Option<LayerQuant>>> {
    map.validate(&net.layer_ids())?;
    net.layers
        .iter()
        .map(|layer| {
            let format = map.get(&layer.id).expect("validated").weights;
            if format.kind() == FormatKind::Real64 {
                return Ok(None);
            }
            let s = calib
                .layers
                .iter()
                .find(|s| s.layer_id == layer.id)
                .ok_or_else(|| Error::InvalidArgument(format!("no calibration for layer `{}`", layer.id)))?;
            if s.format != format {
                return Err(Error::FormatMismatch { expected: format.to_string(), found: s.format.to_string() });
            }
            Ok(Some(LayerQuant {
                format,
                w_scale: s.weights,
                x_scale: s.inputs,
                out_scale: s.outputs,
            }))
        })
        .collect()
}

/// Array statistics for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRun {
    pub layer_id: String,
    pub mode: String,
    pub output_shift: i32,
    pub stats: RunStats,
}

fn log2_exact(x: f64) -> i32 {
    x.log2().round() as i32
}

/// Runs a batch (row-major samples) through the network with every
/// non-Real64 layer's GEMM on the array.
pub fn forward_quantized(
    net: &Network,
    xs: &[f64],
    map: &PrecisionMap,
    calib: &Calibration,
    array_size: usize,
) -> Result<(Vec<Vec<f64>>, Vec<LayerRun>)> {
    let nin = net.input_features();
    if xs.len() % nin != 0 {
        return Err(Error::ShapeMismatch(format!("{} values do not split into {nin}-feature samples", xs.len())));
    }
    let plan = plan_for(net, map, calib)?;
    let samples = xs.len() / nin;
    let mut ys: Vec<Vec<f64>> = xs.chunks(nin).map(<[f64]>::to_vec).collect();
    let mut runs = Vec::new();

    for (layer, q) in net.layers.iter().zip(&plan) {
        let p = layer.kind.positions();
        let fan = layer.kind.fan_in();
        let rows = layer.kind.rows();
        let cols: Vec<Vec<f64>> = ys.par_iter().map(|y| layer.kind.lower(y)).collect();
        let raw: Vec<Vec<f64>> = match q {
            None => cols
                .par_iter()
                .map(|c| {
                    let mut z = vec![0.0; rows * p];
                    for o in 0..rows {
                        for f in 0..fan {
                            let wf = layer.weights[o * fan + f];
                            for pp in 0..p {
                                z[o * p + pp] += wf * c[f * p + pp];
                            }
                        }
                    }
                    z
                })
                .collect(),
            Some(q) => {
                let f = q.format;
                let mut a = vec![0u64; samples * p * fan];
                a.par_chunks_mut(p * fan).zip(&cols).for_each(|(dst, c)| {
                    for pp in 0..p {
                        for k in 0..fan {
                            dst[pp * fan + k] = encode_f64(c[k * p + pp] / q.x_scale, f);
                        }
                    }
                });
                let mut b = vec![0u64; fan * rows];
                for o in 0..rows {
                    for k in 0..fan {
                        b[k * rows + o] = encode_f64(layer.weights[o * fan + k] / q.w_scale, f);
                    }
                }
                let shift = log2_exact(q.out_scale) - log2_exact(q.x_scale) - log2_exact(q.w_scale);
                let sel = PrecSel::for_format(f)?;
                let cfg = ArrayConfig::new(array_size, sel)?.with_output_shift(shift);
                let at = Tensor::new(f, vec![samples * p, fan], a)?;
                let bt = Tensor::new(f, vec![fan, rows], b)?;
                let (c, stats) = gemm(&at, &bt, &cfg)?;
                runs.push(LayerRun {
                    layer_id: layer.id.clone(),
                    mode: sel.name().to_string(),
                    output_shift: shift,
                    stats,
                });
                let cd = c.data();
                (0..samples)
                    .map(|s| {
                        let mut z = vec![0.0; rows * p];
                        for pp in 0..p {
                            for o in 0..rows {
                                z[o * p + pp] = decode_f64(cd[(s * p + pp) * rows + o], f) * q.out_scale;
                            }
                        }
                        z
                    })
                    .collect()
            }
        };
        ys = raw
            .into_iter()
            .map(|mut z| {
                for o in 0..rows {
                    for v in &mut z[o * p..(o + 1) * p] {
                        *v = layer.activate(*v + layer.bias[o]);
                    }
                }
                z
            })
            .collect();
    }
    Ok((ys, runs))
}

/// Metrics of the array-executed network.
pub fn evaluate_quantized(
    net: &Network,
    data: &Dataset,
    map: &PrecisionMap,
    calib: &Calibration,
    array_size: usize,
) -> Result<(Metrics, Vec<LayerRun>)> {
    let (outputs, runs) = forward_quantized(net, &data.x, map, calib, array_size)?;
    Ok((Metrics::from_outputs(net, &outputs, &data.labels), runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Loss};

    fn toy() -> (Network, Dataset) {
        let net = Network::mlp(&[3, 6, 2], Activation::Relu, Loss::CrossEntropy, 5).unwrap();
        let data = Dataset::gaussian_clusters(2, 10, 3, 0.5, 2).unwrap();
        (net, data)
    }

    #[test]
    fn real64_map_matches_reference() {
        let (net, data) = toy();
        let map = PrecisionMap::preset("all_fp32", &net.layer_ids()).unwrap();
        let calib = Calibration::new(&net, &map, &data).unwrap();
        let (out, runs) = forward_quantized(&net, &data.x, &map, &calib, 8).unwrap();
        assert!(runs.is_empty());
        for (i, o) in out.iter().enumerate() {
            assert_eq!(o, &net.forward(data.sample(i)).unwrap());
        }
    }

    #[test]
    fn zero_batch_gates_first_layer() {
        let (net, data) = toy();
        let map = PrecisionMap::preset("all_posit16", &net.layer_ids()).unwrap();
        let calib = Calibration::new(&net, &map, &data).unwrap();
        let (_, runs) = forward_quantized(&net, &[0.0; 12], &map, &calib, 8).unwrap();
        assert_eq!(runs[0].stats.operand_gated, runs[0].stats.mac_ops);
        assert_eq!(runs[0].stats.rmmec_cells_fired, 0);
    }

    #[test]
    fn mixed_map_switches_modes() {
        let (net, data) = toy();
        let mut map = PrecisionMap::preset("all_posit8", &net.layer_ids()).unwrap();
        map.layers[0].weights = FormatSpec::FP4;
        map.layers[0].activations = FormatSpec::FP4;
        let calib = Calibration::new(&net, &map, &data).unwrap();
        let (_, runs) = forward_quantized(&net, &data.x, &map, &calib, 16).unwrap();
        assert_eq!(runs[0].mode, "x4-fp4");
        assert_eq!(runs[1].mode, "x2-posit8");
    }
}
