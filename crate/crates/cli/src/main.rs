//! `npe`: codec tables, dot and GEMM runs, training, quantization,
//! sensitivity analysis and size accounting from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use npe_core::nn::{Activation, Loss};
use npe_core::quantizer::{SensitivityMethod, Thresholds};
use npe_core::{FormatSpec, PrecSel, RoundingMode};

#[derive(Parser)]
#[command(name = "npe", version, about = "Mixed-precision SIMD engine model")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "XRNPE_THREADS")]
    threads: Option<usize>,

    /// Where to write the run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Conformance table of every bit pattern of a format (CSV).
    Codec {
        #[arg(long)]
        format: FormatSpec,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a tensor container.
    GenTensor {
        #[arg(long)]
        format: FormatSpec,
        #[arg(long, value_delimiter = ',', required = true)]
        shape: Vec<usize>,
        #[arg(long, value_enum, default_value_t = TensorKind::Random)]
        kind: TensorKind,
        /// Let random tensors contain NaR.
        #[arg(long)]
        allow_nar: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fused dot product of two vectors.
    Dot {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Rounding::Fused)]
        rounding: Rounding,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Matrix product on the morphable array.
    Gemm {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// x4-fp4, x4-posit4, x2-posit8, x1-posit16 or a format name;
        /// defaults to the operands' format.
        #[arg(long)]
        mode: Option<PrecSel>,
        #[arg(long, default_value_t = 8)]
        array: usize,
        #[arg(long, value_enum, default_value_t = Rounding::Fused)]
        rounding: Rounding,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        output_shift: i32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        stats_csv: Option<PathBuf>,
    },
    /// New MLP checkpoint with seeded initialization.
    Init {
        /// Layer widths, input first.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
        activation: ActivationArg,
        #[arg(long, value_enum, default_value_t = LossArg::CrossEntropy)]
        loss: LossArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic classification data as CSV.
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 0.9)]
        spread: f64,
        /// The four XOR points instead of clusters.
        #[arg(long)]
        xor: bool,
        #[arg(long)]
        out: PathBuf,
        /// Split off a test set into this file.
        #[arg(long, requires = "test_fraction")]
        test_out: Option<PathBuf>,
        #[arg(long, requires = "test_out")]
        test_fraction: Option<f64>,
    },
    /// Full-precision SGD.
    Train(TrainArgs),
    /// Rounds a checkpoint's weights into a precision map.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        map: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer sensitivity report.
    Sens {
        #[arg(long)]
        model: PathBuf,
        /// Current assignment; defaults to the checkpoint's storage formats.
        #[arg(long)]
        map: Option<String>,
        /// Compute loss gradients on --data first.
        #[arg(long, requires = "data")]
        compute_grads: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also save the checkpoint with its gradients.
        #[arg(long, requires = "compute_grads")]
        save_model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Uniform)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = ThresholdArg::Percentile)]
        thresholds: ThresholdArg,
        #[arg(long, default_value = "fp4")]
        four_bit: FormatSpec,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy precision assignment from a sensitivity report.
    Assign {
        #[arg(long)]
        report: PathBuf,
        /// Parameter-weighted average bits per weight.
        #[arg(long)]
        budget: f64,
        #[arg(long, default_value = "fp4")]
        four_bit: FormatSpec,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantization-aware training under a precision map.
    Qat {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        map: String,
    },
    /// Accuracy or RMSE, on the array when a map is given.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        map: Option<String>,
        /// Calibration data; defaults to --data.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        array: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Model size under a precision map.
    Size {
        #[arg(long, conflicts_with = "params", required_unless_present = "params")]
        model: Option<PathBuf>,
        /// Size a single-tensor model of this many weights.
        #[arg(long)]
        params: Option<usize>,
        #[arg(long)]
        map: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss and metric as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TensorKind {
    Random,
    Zeros,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Rounding {
    Fused,
    PerMac,
}

impl From<Rounding> for RoundingMode {
    fn from(r: Rounding) -> Self {
        match r {
            Rounding::Fused => RoundingMode::Fused,
            Rounding::PerMac => RoundingMode::PerMac,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Identity,
    Relu,
    Pact,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Identity => Activation::Identity,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Pact => Activation::Pact,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum LossArg {
    CrossEntropy,
    Mse,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::CrossEntropy => Loss::CrossEntropy,
            LossArg::Mse => Loss::Mse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Uniform,
    Lattice,
}

impl From<MethodArg> for SensitivityMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Uniform => SensitivityMethod::Uniform,
            MethodArg::Lattice => SensitivityMethod::Lattice,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ThresholdArg {
    Percentile,
    Symmetric,
}

impl From<ThresholdArg> for Thresholds {
    fn from(t: ThresholdArg) -> Self {
        match t {
            ThresholdArg::Percentile => Thresholds::default(),
            ThresholdArg::Symmetric => Thresholds::Symmetric,
        }
    }
}

/// Command line minus `--threads`, which must not change any output.
fn manifest_args(raw: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in raw {
        if skip {
            skip = false;
        } else if a == "--threads" {
            skip = true;
        } else if !a.starts_with("--threads=") {
            out.push(a);
        }
    }
    out
}

const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let args = manifest_args(std::env::args().skip(1));
    match commands::run(cli.command, cli.seed, args, cli.manifest.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .filter_map(|c| c.downcast_ref::<npe_core::Error>())
                .any(npe_core::Error::is_numeric_contract);
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_DATA })
        }
    }
}
