//! Model checkpoints: a JSON manifest next to one XTEN file per tensor.
//!
//! Weights may be stored in any format; the stored value is
//! `decode(bits) * scale`. Biases and gradients are always real64.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{FormatKind, FormatSpec};
use crate::nn::{Activation, Layer, LayerKind, Loss, Network};
use crate::quantizer::{tensor_scale, LayerInfo, LayerTensor, PrecisionMap};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub file: String,
    pub format: FormatSpec,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub id: String,
    pub kind: LayerKind,
    pub activation: Activation,
    pub alpha: f64,
    pub weights: TensorRef,
    pub bias: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub loss: Loss,
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    /// Storage format and scale of each layer's weights.
    pub storage: Vec<(FormatSpec, f64)>,
    /// Per-layer loss gradients, when computed.
    pub gradients: Option<Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn new(net: Network) -> Self {
        let storage = vec![(FormatSpec::REAL64, 1.0); net.layers.len()];
        Checkpoint { net, storage, gradients: None }
    }

    /// Weights rounded into the map's formats; the network keeps the
    /// dequantized values.
    pub fn quantized(net: &Network, map: &PrecisionMap) -> Result<Self> {
        map.validate(&net.layer_ids())?;
        let mut out = net.clone();
        let mut storage = Vec::with_capacity(net.layers.len());
        for layer in &mut out.layers {
            let f = map.get(&layer.id).expect("validated").weights;
            let scale = tensor_scale(&layer.weights, f);
            let t = Tensor::from_f64(
                f,
                vec![layer.weights.len()],
                &layer.weights.iter().map(|w| w / scale).collect::<Vec<_>>(),
            )?;
            layer.weights = t.to_f64().into_iter().map(|v| v * scale).collect();
            storage.push((f, scale));
        }
        Ok(Checkpoint { net: out, storage, gradients: None })
    }

    pub fn layer_infos(&self) -> Vec<LayerInfo> {
        self.net
            .layers
            .iter()
            .map(|l| LayerInfo { layer_id: l.id.clone(), params: l.weights.len() })
            .collect()
    }

    pub fn layer_tensors(&self) -> Vec<LayerTensor> {
        self.net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerTensor {
                layer_id: l.id.clone(),
                weights: l.weights.clone(),
                gradient: self.gradients.as_ref().map(|g| g[i].clone()),
            })
            .collect()
    }

    /// The map the weights are currently stored under.
    pub fn storage_map(&self) -> PrecisionMap {
        PrecisionMap {
            layers: self
                .net
                .layers
                .iter()
                .zip(&self.storage)
                .map(|(l, &(f, _))| crate::quantizer::LayerPrecision {
                    layer_id: l.id.clone(),
                    weights: f,
                    activations: f,
                })
                .collect(),
        }
    }

    /// Writes the manifest and tensors into `dir`; returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.net.layers.len());
        for (i, layer) in self.net.layers.iter().enumerate() {
            let (format, scale) = self.storage[i];
            let shape = vec![layer.kind.rows(), layer.kind.fan_in()];
            let w_file = format!("{}.weights.xten", layer.id);
            let stored: Vec<f64> = layer.weights.iter().map(|w| w / scale).collect();
            Tensor::from_f64(format, shape.clone(), &stored)?.write(dir.join(&w_file))?;
            let b_file = format!("{}.bias.xten", layer.id);
            Tensor::from_f64(FormatSpec::REAL64, vec![layer.bias.len()], &layer.bias)?.write(dir.join(&b_file))?;
            let gradient = match &self.gradients {
                Some(g) => {
                    let g_file = format!("{}.grad.xten", layer.id);
                    Tensor::from_f64(FormatSpec::REAL64, shape, &g[i])?.write(dir.join(&g_file))?;
                    Some(g_file)
                }
                None => None,
            };
            entries.push(LayerEntry {
                id: layer.id.clone(),
                kind: layer.kind,
                activation: layer.activation,
                alpha: layer.alpha,
                weights: TensorRef { file: w_file, format, scale },
                bias: b_file,
                gradient,
            });
        }
        let manifest = Manifest { version: MANIFEST_VERSION, loss: self.net.loss, layers: entries };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Loads from a manifest file or the directory holding one.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Corrupt(format!("unsupported manifest version {}", manifest.version)));
        }
        let mut layers = Vec::new();
        let mut storage = Vec::new();
        let mut grads = Vec::new();
        for e in &manifest.layers {
            let w = Tensor::read(dir.join(&e.weights.file))?;
            if w.format() != e.weights.format {
                return Err(Error::FormatMismatch {
                    expected: e.weights.format.to_string(),
                    found: w.format().to_string(),
                });
            }
            let b = read_real(dir, &e.bias)?;
            let mut layer = Layer::new(e.id.clone(), e.kind, e.activation);
            layer.alpha = e.alpha;
            if w.len() != layer.weights.len() || b.len() != layer.bias.len() {
                return Err(Error::ShapeMismatch(format!("layer `{}` tensors do not match its kind", e.id)));
            }
            layer.weights = w.to_f64().into_iter().map(|v| v * e.weights.scale).collect();
            layer.bias = b;
            if let Some(g) = &e.gradient {
                grads.push(Some(read_real(dir, g)?));
            } else {
                grads.push(None);
            }
            layers.push(layer);
            storage.push((e.weights.format, e.weights.scale));
        }
        let net = Network::new(layers, manifest.loss)?;
        let gradients = if grads.iter().all(Option::is_some) && !grads.is_empty() {
            Some(grads.into_iter().map(Option::unwrap).collect())
        } else {
            None
        };
        Ok(Checkpoint { net, storage, gradients })
    }
}

fn read_real(dir: &Path, file: &str) -> Result<Vec<f64>> {
    let t = Tensor::read(dir.join(file))?;
    if t.format().kind() != FormatKind::Real64 {
        return Err(Error::FormatMismatch { expected: "real64".into(), found: t.format().to_string() });
    }
    Ok(t.to_f64())
}
