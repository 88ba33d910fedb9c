use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use npe_core::checkpoint::Checkpoint;
use npe_core::formats::{conformance_csv, decode, f64_rational};
use npe_core::mac::{dot, MacStats};
use npe_core::morph_array::StatsReport;
use npe_core::nn::{
    evaluate, evaluate_quantized, qat_train, train, Calibration, Dataset, History, Metrics, Network, TrainConfig,
};
use npe_core::quantizer::{
    assign_precisions, model_size_bytes, sensitivity_report, LayerInfo, PrecisionMap, SensitivityOptions,
    SensitivityReport,
};
use npe_core::{gemm, ArrayConfig, Error, PrecSel, Tensor};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{Command, TensorKind, TrainArgs};

pub fn run(cmd: Command, seed: u64, args: Vec<String>, manifest_path: Option<&Path>) -> Result<()> {
    let name = command_name(&cmd);
    let mut m = RunManifest::new(name, args, seed);
    execute(cmd, seed, &mut m)?;
    m.emit(manifest_path)
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Codec { .. } => "codec",
        Command::GenTensor { .. } => "gen-tensor",
        Command::Dot { .. } => "dot",
        Command::Gemm { .. } => "gemm",
        Command::Init { .. } => "init",
        Command::GenData { .. } => "gen-data",
        Command::Train(_) => "train",
        Command::Quantize { .. } => "quantize",
        Command::Sens { .. } => "sens",
        Command::Assign { .. } => "assign",
        Command::Qat { .. } => "qat",
        Command::Eval { .. } => "eval",
        Command::Size { .. } => "size",
    }
}

/// Writes to `out` or stdout.
fn emit_text(text: &str, out: Option<&Path>, m: &mut RunManifest) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            m.output(p);
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>, m: &mut RunManifest) -> Result<()> {
    emit_text(&(serde_json::to_string_pretty(value)? + "\n"), out, m)
}

fn read_tensor(path: &Path, m: &mut RunManifest) -> Result<Tensor> {
    m.input(path)?;
    let t = Tensor::read(path).with_context(|| format!("reading tensor {}", path.display()))?;
    m.format(t.format());
    Ok(t)
}

fn read_data(path: &Path, m: &mut RunManifest) -> Result<Dataset> {
    m.input(path)?;
    Dataset::from_csv(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_model(path: &Path, m: &mut RunManifest) -> Result<Checkpoint> {
    m.input(path)?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_model(ck: &Checkpoint, dir: &Path, m: &mut RunManifest) -> Result<()> {
    ck.save(dir).with_context(|| format!("saving checkpoint to {}", dir.display()))?;
    m.output(dir);
    Ok(())
}

/// A preset name (`all_posit8`, ...) or a JSON map file.
fn load_map(arg: &str, ids: &[String], m: &mut RunManifest) -> Result<PrecisionMap> {
    let path = Path::new(arg);
    let map = if path.is_file() {
        m.input(path)?;
        serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing map {arg}"))?
    } else {
        PrecisionMap::preset(arg, ids)?
    };
    map.validate(ids)?;
    for l in &map.layers {
        m.format(l.weights);
    }
    Ok(map)
}

#[derive(Serialize)]
struct DotReport {
    format: String,
    length: usize,
    bits: String,
    value: String,
    approx: f64,
    /// Accumulator contents before the final rounding.
    quire: String,
    stats: MacStats,
}

#[derive(Serialize)]
struct LayerRunReport {
    layer_id: String,
    output_shift: i32,
    stats: StatsReport,
}

#[derive(Serialize)]
struct EvalReport {
    metrics: Metrics,
    map: Option<PrecisionMap>,
    layers: Vec<LayerRunReport>,
}

#[derive(Serialize)]
struct AssignReport {
    budget: f64,
    avg_bits: f64,
    map: PrecisionMap,
}

fn execute(cmd: Command, seed: u64, m: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Codec { format, out } => {
            m.format(format);
            emit_text(&conformance_csv(format)?, out.as_deref(), m)
        }

        Command::GenTensor { format, shape, kind, allow_nar, out } => {
            m.format(format);
            let t = match kind {
                TensorKind::Random => Tensor::random(format, shape, seed, allow_nar),
                TensorKind::Zeros => Tensor::zeros(format, shape),
                TensorKind::Identity => {
                    if shape.len() != 2 || shape[0] != shape[1] {
                        bail!("identity needs a square 2-d shape");
                    }
                    Tensor::identity(format, shape[0])
                }
            };
            t.write(&out)?;
            m.output(&out);
            Ok(())
        }

        Command::Dot { a, b, rounding, out } => {
            let ta = read_tensor(&a, m)?;
            let tb = read_tensor(&b, m)?;
            if ta.format() != tb.format() {
                return Err(Error::FormatMismatch { expected: ta.format().to_string(), found: tb.format().to_string() }.into());
            }
            let sel = PrecSel::for_format(ta.format())?;
            let mask = (1u64 << sel.lane_bits()) - 1;
            let wa: Vec<u16> = ta.data().iter().map(|&x| (x & mask) as u16).collect();
            let wb: Vec<u16> = tb.data().iter().map(|&x| (x & mask) as u16).collect();
            let r = dot(&wa, &wb, sel, rounding.into())?;
            let d = decode(r.lanes[0], ta.format());
            let digits = ta.format().bits().div_ceil(4) as usize;
            let report = DotReport {
                format: ta.format().to_string(),
                length: wa.len(),
                bits: format!("0x{:0digits$x}", r.lanes[0]),
                value: d.rational_string(),
                approx: d.to_f64(),
                quire: r.exact[0].clone(),
                stats: r.stats,
            };
            emit_json(&report, out.as_deref(), m)
        }

        Command::Gemm { a, b, mode, array, rounding, k_max, output_shift, out, stats, stats_csv } => {
            let ta = read_tensor(&a, m)?;
            let tb = read_tensor(&b, m)?;
            let sel = match mode {
                Some(s) => s,
                None => PrecSel::for_format(ta.format())?,
            };
            let mut cfg = ArrayConfig::new(array, sel)?.with_rounding(rounding.into()).with_output_shift(output_shift);
            if let Some(k) = k_max {
                cfg = cfg.with_k_max(k);
            }
            let (c, run) = gemm(&ta, &tb, &cfg)?;
            c.write(&out)?;
            m.output(&out);
            let report = run.report(sel.name(), array);
            if let Some(p) = stats {
                emit_text(&(report.to_json() + "\n"), Some(&p), m)?;
            }
            if let Some(p) = stats_csv {
                emit_text(&report.to_csv(), Some(&p), m)?;
            }
            Ok(())
        }

        Command::Init { sizes, activation, loss, out } => {
            let net = Network::mlp(&sizes, activation.into(), loss.into(), seed)?;
            save_model(&Checkpoint::new(net), &out, m)
        }

        Command::GenData { classes, per_class, features, spread, xor, out, test_out, test_fraction } => {
            let data = if xor { Dataset::xor() } else { Dataset::gaussian_clusters(classes, per_class, features, spread, seed)? };
            let write = |d: &Dataset, p: &Path, m: &mut RunManifest| -> Result<()> {
                let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
                d.write_csv(f)?;
                m.output(p);
                Ok(())
            };
            match (test_out, test_fraction) {
                (Some(t), Some(frac)) => {
                    let (train_set, test) = data.split(frac, seed);
                    write(&train_set, &out, m)?;
                    write(&test, &t, m)
                }
                _ => write(&data, &out, m),
            }
        }

        Command::Train(t) => train_cmd(&t, seed, None, m),

        Command::Qat { train: t, map } => train_cmd(&t, seed, Some(&map), m),

        Command::Quantize { model, map, out } => {
            let ck = read_model(&model, m)?;
            let map = load_map(&map, &ck.net.layer_ids(), m)?;
            let q = Checkpoint::quantized(&ck.net, &map)?;
            save_model(&q, &out, m)
        }

        Command::Sens { model, map, compute_grads, data, save_model: save_to, method, thresholds, four_bit, out } => {
            let mut ck = read_model(&model, m)?;
            if compute_grads {
                let data = read_data(data.as_deref().expect("clap requires --data"), m)?;
                let (_, g) = ck.net.backward(&data.x, &data.labels)?;
                ck.gradients = Some(g.weights);
                if let Some(dir) = save_to {
                    save_model(&ck, &dir, m)?;
                }
            } else if ck.gradients.is_none() {
                bail!(
                    "checkpoint {} has no layer gradients; rerun with --compute-grads --data <csv>",
                    model.display()
                );
            }
            let current = match map {
                Some(arg) => load_map(&arg, &ck.net.layer_ids(), m)?,
                None => ck.storage_map(),
            };
            let opts = SensitivityOptions { method: method.into(), thresholds: thresholds.into(), four_bit };
            m.format(four_bit);
            let report = sensitivity_report(&ck.layer_tensors(), &current, &opts)?;
            emit_json(&report, out.as_deref(), m)
        }

        Command::Assign { report, budget, four_bit, out } => {
            m.input(&report)?;
            let r: SensitivityReport = serde_json::from_str(&fs::read_to_string(&report)?)
                .with_context(|| format!("parsing sensitivity report {}", report.display()))?;
            let scores = r.scores();
            let map = assign_precisions(&scores, budget, four_bit)?;
            let layers: Vec<LayerInfo> =
                scores.iter().map(|(id, params, _)| LayerInfo { layer_id: id.clone(), params: *params }).collect();
            let size = model_size_bytes(&layers, &map)?;
            for l in &map.layers {
                m.format(l.weights);
            }
            emit_json(&AssignReport { budget, avg_bits: size.avg_bits.value, map }, out.as_deref(), m)
        }

        Command::Eval { model, data, map, calib, array, out } => {
            let ck = read_model(&model, m)?;
            let data = read_data(&data, m)?;
            let report = match map {
                None => EvalReport { metrics: evaluate(&ck.net, &data)?, map: None, layers: Vec::new() },
                Some(arg) => {
                    let map = load_map(&arg, &ck.net.layer_ids(), m)?;
                    let calib_data = match &calib {
                        Some(p) => read_data(p, m)?,
                        None => data.clone(),
                    };
                    let cal = Calibration::new(&ck.net, &map, &calib_data)?;
                    let (metrics, runs) = evaluate_quantized(&ck.net, &data, &map, &cal, array)?;
                    let layers = runs
                        .into_iter()
                        .map(|r| LayerRunReport {
                            stats: r.stats.report(&r.mode, array),
                            layer_id: r.layer_id,
                            output_shift: r.output_shift,
                        })
                        .collect();
                    EvalReport { metrics, map: Some(map), layers }
                }
            };
            emit_json(&report, out.as_deref(), m)
        }

        Command::Size { model, params, map, out } => {
            let layers = match (model, params) {
                (Some(p), _) => read_model(&p, m)?.layer_infos(),
                (None, Some(n)) => vec![LayerInfo { layer_id: "weights".into(), params: n }],
                (None, None) => bail!("need --model or --params"),
            };
            let ids: Vec<String> = layers.iter().map(|l| l.layer_id.clone()).collect();
            let map = load_map(&map, &ids, m)?;
            emit_json(&model_size_bytes(&layers, &map)?, out.as_deref(), m)
        }
    }
}

#[derive(Serialize)]
struct HistoryReport<'a> {
    config: TrainConfig,
    history: &'a History,
    final_loss: String,
}

fn train_cmd(t: &TrainArgs, seed: u64, map: Option<&str>, m: &mut RunManifest) -> Result<()> {
    let mut ck = read_model(&t.model, m)?;
    let data = read_data(&t.data, m)?;
    let cfg = TrainConfig { epochs: t.epochs, lr: t.lr, batch_size: t.batch_size, seed };
    let history = match map {
        None => train(&mut ck.net, &data, &cfg)?,
        Some(arg) => {
            let map = load_map(arg, &ck.net.layer_ids(), m)?;
            qat_train(&mut ck.net, &data, &map, &cfg)?
        }
    };
    // shadow weights are saved at full precision
    let ck = Checkpoint::new(ck.net);
    save_model(&ck, &t.out, m)?;
    if let Some(p) = &t.history {
        let final_loss = history.epochs.last().map_or("NaN".into(), |e| f64_rational(e.loss.value));
        emit_json(&HistoryReport { config: cfg, history: &history, final_loss }, Some(p), m)?;
    }
    Ok(())
}
