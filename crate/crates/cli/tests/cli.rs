use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use num_bigint::BigInt;
use npe_core::checkpoint::Checkpoint;
use npe_core::formats::decode;
use npe_core::nn::{Activation, Layer, Loss, Network};
use npe_core::quantizer::{LayerPrecision, PrecisionMap};
use npe_core::{FormatSpec, Tensor};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// SHA-256 of C for `gemm` on seeds 5 and 6 (posit16_1, 16x24 by 24x12,
/// array 8). Frozen from a run that `random_gemm_matches_exact_oracle`
/// checks element by element.
const RANDOM_GEMM_SHA256: &str = "9feaf6584d0acdc1a72a72424bbe29fe10504a8d460521f11a247a2ac03e8522";

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn npe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npe"))
        .args(args)
        .current_dir(dir)
        .env_remove("XRNPE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = npe(dir, args);
    assert!(
        out.status.success(),
        "npe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn sha256(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn identity_gemm_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-tensor", "--format", "posit8_0", "--shape", "4,4", "--kind", "identity", "--out", "i.xten"]);
    ok(d, &["gen-tensor", "--format", "posit8_0", "--shape", "4,3", "--seed", "3", "--out", "b.xten"]);
    ok(d, &["gemm", "--a", "i.xten", "--b", "b.xten", "--out", "c.xten", "--stats", "s.json"]);
    assert_eq!(fs::read(d.join("i.xten")).unwrap(), fs::read(golden("identity4_posit8.xten")).unwrap());
    assert_eq!(fs::read(d.join("c.xten")).unwrap(), fs::read(d.join("b.xten")).unwrap());
    assert_eq!(fs::read(d.join("c.xten")).unwrap(), fs::read(golden("identity_gemm_c.xten")).unwrap());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d.join("c.xten.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gemm");
    assert_eq!(manifest["inputs"][0]["sha256"], sha256(&d.join("i.xten")));
}

#[test]
fn zero_operand_gating_report_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-tensor", "--format", "fp4", "--shape", "3,5", "--kind", "zeros", "--out", "z.xten"]);
    ok(d, &["gen-tensor", "--format", "fp4", "--shape", "5,6", "--seed", "9", "--out", "b.xten"]);
    ok(d, &["gemm", "--a", "z.xten", "--b", "b.xten", "--array", "16", "--out", "c.xten", "--stats", "s.json"]);
    assert_eq!(fs::read_to_string(d.join("s.json")).unwrap(), fs::read_to_string(golden("zero_gemm_stats.json")).unwrap());
    let c = Tensor::read(d.join("c.xten")).unwrap();
    assert!(c.to_f64().iter().all(|&v| v == 0.0));
}

fn random_gemm(d: &Path, extra: &[&str]) -> PathBuf {
    ok(d, &["gen-tensor", "--format", "posit16_1", "--shape", "16,24", "--seed", "5", "--out", "a.xten"]);
    ok(d, &["gen-tensor", "--format", "posit16_1", "--shape", "24,12", "--seed", "6", "--out", "b.xten"]);
    let mut args = vec!["gemm", "--a", "a.xten", "--b", "b.xten", "--out", "c.xten"];
    args.extend_from_slice(extra);
    ok(d, &args);
    d.join("c.xten")
}

#[test]
fn random_gemm_matches_frozen_digest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sha256(&random_gemm(dir.path(), &[])), RANDOM_GEMM_SHA256);
    let dir16 = tempfile::tempdir().unwrap();
    assert_eq!(sha256(&random_gemm(dir16.path(), &["--array", "16"])), RANDOM_GEMM_SHA256);
}

/// Posit16 values are multiples of 2^-40, so dot products scaled by 2^80
/// are exact integers.
fn scaled(bits: u64) -> BigInt {
    let d = decode(bits, FormatSpec::POSIT16_1);
    let (mag, exp) = d.dyadic();
    let v = BigInt::from(mag) << (exp + 80) as usize;
    if d.negative {
        -v
    } else {
        v
    }
}

#[test]
fn random_gemm_matches_exact_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = Tensor::read(random_gemm(d, &[])).unwrap();
    let a = Tensor::read(d.join("a.xten")).unwrap();
    let b = Tensor::read(d.join("b.xten")).unwrap();
    let f = FormatSpec::POSIT16_1;
    let mut lattice: Vec<(BigInt, u64)> = (0..1u64 << 16)
        .filter(|&x| x != 0x8000)
        .map(|x| (scaled(x) << 80usize, x))
        .collect();
    lattice.sort();
    let round = |x: &BigInt| -> u64 {
        let i = lattice.partition_point(|(v, _)| v <= x);
        let bits = if i == 0 {
            lattice[0].1
        } else if i == lattice.len() {
            lattice[i - 1].1
        } else {
            let (lo, lb) = &lattice[i - 1];
            let (hi, hb) = &lattice[i];
            let twice: BigInt = x * 2;
            let mid = lo + hi;
            if lo == x || twice < mid || (twice == mid && lb & 1 == 0) {
                *lb
            } else {
                *hb
            }
        };
        match bits {
            0 if x > &BigInt::from(0) => 1,
            0 if x < &BigInt::from(0) => f.mask(),
            b => b,
        }
    };
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    for i in 0..m {
        for j in 0..n {
            let exact: BigInt = (0..k)
                .map(|t| scaled(a.data()[i * k + t]) * scaled(b.data()[t * n + j]))
                .sum();
            assert_eq!(c.data()[i * n + j], round(&exact), "({i},{j})");
        }
    }
}

#[test]
fn codec_tables_have_one_row_per_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let p4 = ok(dir.path(), &["codec", "--format", "posit4_1"]);
    assert_eq!(p4.lines().count(), 1 + 16);
    let p8 = ok(dir.path(), &["codec", "--format", "posit8_0"]);
    let rows: Vec<&str> = p8.lines().skip(1).collect();
    assert_eq!(rows.len(), 256);
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| !r.contains("nar"))
        .map(|r| r.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values.len(), 255);
    assert!(values.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn usage_data_and_numeric_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = npe(d, &["codec", "--format", "posit7_2"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("posit7_2"));

    fs::write(d.join("junk.xten"), b"XTEN\x01\x00\x09\x00").unwrap();
    let corrupt = npe(d, &["gemm", "--a", "junk.xten", "--b", "junk.xten", "--out", "c.xten"]);
    assert_eq!(corrupt.status.code(), Some(3));

    ok(d, &["gen-tensor", "--format", "posit8_0", "--shape", "2,6", "--out", "a.xten"]);
    ok(d, &["gen-tensor", "--format", "posit8_0", "--shape", "6,2", "--out", "b.xten"]);
    let limit = npe(d, &["gemm", "--a", "a.xten", "--b", "b.xten", "--k-max", "4", "--out", "c.xten"]);
    assert_eq!(limit.status.code(), Some(4));

    ok(d, &["gen-tensor", "--format", "posit16_1", "--shape", "6,2", "--out", "w.xten"]);
    let mismatch = npe(d, &["gemm", "--a", "a.xten", "--b", "w.xten", "--out", "c.xten"]);
    assert_eq!(mismatch.status.code(), Some(3));
}

#[test]
fn size_of_the_reference_profile() {
    let dir = tempfile::tempdir().unwrap();
    let r: Value = serde_json::from_str(&ok(dir.path(), &["size", "--params", "3538944", "--map", "all_fp32"])).unwrap();
    assert_eq!(r["weight_mib"]["exact"], "27/2");
    assert_eq!(r["weight_mib"]["value"], 13.5);
}

/// Three layers with hand-set weights and gradients, stored in full precision.
fn toy_model(dir: &Path) -> (PathBuf, PathBuf) {
    let mut layers = vec![
        Layer::dense("l1", 2, 4, Activation::Relu),
        Layer::dense("l2", 4, 3, Activation::Relu),
        Layer::dense("l3", 3, 2, Activation::Identity),
    ];
    layers[0].weights = vec![0.5, -0.25, 0.125, 1.0, -0.75, 0.3, 0.05, -0.6];
    layers[1].weights = vec![0.9, -1.3, 0.41, 0.07, -0.02, 0.66, -0.58, 1.12, 0.33, -0.87, 0.25, -0.14];
    layers[2].weights = vec![2.0, -1.5, 0.75, -0.3, 1.25, -2.4];
    let net = Network::new(layers, Loss::CrossEntropy).unwrap();
    let mut ck = Checkpoint::new(net);
    ck.gradients = Some(vec![
        vec![0.1, -0.2, 0.05, 0.3, -0.1, 0.0, 0.2, -0.05],
        vec![0.02, 0.4, -0.3, 0.11, -0.07, 0.09, 0.5, -0.21, 0.03, 0.18, -0.44, 0.06],
        vec![-0.9, 0.6, 0.2, -0.4, 0.35, 0.15],
    ]);
    let model = dir.join("toy");
    ck.save(&model).unwrap();
    let map = PrecisionMap {
        layers: [("l1", FormatSpec::REAL64), ("l2", FormatSpec::POSIT16_1), ("l3", FormatSpec::POSIT8_0)]
            .iter()
            .map(|&(id, f)| LayerPrecision { layer_id: id.into(), weights: f, activations: f })
            .collect(),
    };
    let map_path = dir.join("current.json");
    fs::write(&map_path, serde_json::to_string(&map).unwrap()).unwrap();
    (model, map_path)
}

/// Plain re-evaluation of the uniform quantizer and the sensitivity metric.
fn oracle_sensitivity(w: &[f64], g: &[f64], current: Option<u32>, cand: u32) -> f64 {
    fn quantized(w: &[f64], bits: Option<u32>) -> Vec<f64> {
        let Some(n) = bits else { return w.to_vec() };
        let levels = 2f64.powi(n as i32) - 1.0;
        let k = w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64 * levels / 2f64.powi(n as i32 - 1);
        let mut s: Vec<f64> = w.iter().map(|x| x / k).collect();
        let scaled = s.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |p: f64| {
            let pos = p / 100.0 * (s.len() as f64 - 1.0);
            let (i, j) = (pos.floor() as usize, pos.ceil() as usize);
            s[i] + (s[j] - s[i]) * (pos - i as f64)
        };
        let (lo, hi) = (pct(0.1), pct(99.9));
        scaled
            .iter()
            .map(|&v| {
                let t = (v.max(lo).min(hi) - lo) * levels / (hi - lo);
                let r = if (t - t.floor() - 0.5).abs() < 1e-15 && t.floor() % 2.0 == 0.0 { t.floor() } else { t.round() };
                (r * (hi - lo) / levels + lo) * k
            })
            .collect()
    }
    let err = |q: Vec<f64>| q.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    (err(quantized(w, current)) - err(quantized(w, Some(cand)))) * gn / w.len() as f64
}

#[test]
fn sens_on_toy_model_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (model, map) = toy_model(d);
    let out = ok(d, &["sens", "--model", model.to_str().unwrap(), "--map", map.to_str().unwrap()]);
    let report: Value = serde_json::from_str(&out).unwrap();
    let ck = Checkpoint::load(&model).unwrap();
    let grads = ck.gradients.unwrap();
    let current = [None, Some(16), Some(8)];
    for (i, layer) in report["layers"].as_array().unwrap().iter().enumerate() {
        let w = &ck.net.layers[i].weights;
        for (key, k) in [("s8", 8), ("s4", 4)] {
            let got = layer[key]["value"].as_f64().unwrap();
            let want = oracle_sensitivity(w, &grads[i], current[i], k);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{} {key}: {got} vs {want}", layer["layer_id"]);
        }
    }
    assert_eq!(report["layers"][2]["s8"]["value"], 0.0);
    assert_eq!(report["ranking"].as_array().unwrap().len(), 3);
}

#[test]
fn sens_without_gradients_asks_for_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init", "--sizes", "3,4,2", "--out", "m"]);
    let out = npe(d, &["sens", "--model", "m"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--compute-grads"));
}

#[test]
fn assign_with_budget_16_keeps_posit16() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (model, map) = toy_model(d);
    ok(d, &["sens", "--model", model.to_str().unwrap(), "--map", map.to_str().unwrap(), "--out", "sens.json"]);
    let r: Value = serde_json::from_str(&ok(d, &["assign", "--report", "sens.json", "--budget", "16"])).unwrap();
    for l in r["map"]["layers"].as_array().unwrap() {
        assert_eq!(l["weights"], "posit16_1");
    }
    let low = npe(d, &["assign", "--report", "sens.json", "--budget", "3"]);
    assert_eq!(low.status.code(), Some(3));
}

/// Runs the training pipeline and returns every output file's bytes.
fn pipeline(threads: &str) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let t = ["--threads", threads, "--seed", "4"];
    let run = |args: &[&str]| {
        let mut a = args.to_vec();
        a.extend_from_slice(&t);
        ok(d, &a)
    };
    run(&["gen-data", "--per-class", "60", "--features", "5", "--classes", "3", "--out", "train.csv", "--test-out", "test.csv", "--test-fraction", "0.25"]);
    run(&["init", "--sizes", "5,12,3", "--activation", "pact", "--out", "m0"]);
    run(&["train", "--model", "m0", "--data", "train.csv", "--epochs", "4", "--out", "m1", "--history", "h1.json"]);
    run(&["qat", "--model", "m1", "--data", "train.csv", "--map", "all_fp4", "--epochs", "2", "--out", "m2", "--history", "h2.json"]);
    run(&["sens", "--model", "m1", "--compute-grads", "--data", "train.csv", "--map", "all_posit16", "--out", "sens.json"]);
    run(&["eval", "--model", "m2", "--data", "test.csv", "--map", "all_fp4", "--calib", "train.csv", "--out", "eval.json"]);
    let mut files = Vec::new();
    let mut stack = vec![d.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else {
                files.push((e.strip_prefix(d).unwrap().display().to_string(), fs::read(&e).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let one = pipeline("1");
    let four = pipeline("4");
    assert_eq!(one.len(), four.len());
    for ((na, a), (nb, b)) in one.iter().zip(&four) {
        assert_eq!(na, nb);
        assert!(a == b, "{na} differs between --threads 1 and 4");
    }
}

#[test]
fn xten_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (f, shape) in [("fp4", "3"), ("posit4_1", "1,3,1,3"), ("posit8_0", "2,2,2"), ("posit16_1", "5,1")] {
        ok(d, &["gen-tensor", "--format", f, "--shape", shape, "--out", "t.xten"]);
        let bytes = fs::read(d.join("t.xten")).unwrap();
        assert_eq!(Tensor::from_xten(&bytes).unwrap().to_xten(), bytes);
    }
}
