//! Morphable matrix-multiplication array.
//!
//! An `size x size` grid of SIMD MACs (8x8 or 16x16) runs GEMM tile by tile
//! in an output-stationary dataflow: each MAC owns one group of output
//! elements for the duration of a tile and keeps them in its quires. In the
//! 4-bit modes one MAC serves 4 adjacent output columns (2 in Posit(8,0)), so
//! a tile covers `size` rows and `size * lanes` columns.
//!
//! Cycle counts are an estimate: one step per reduction element per tile, no
//! fill or drain.

use std::ops::AddAssign;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mac::{MacStats, MacUnit, PrecSel, RoundingMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    /// Rows = cols of the MAC grid.
    pub size: usize,
    pub sel: PrecSel,
    /// Longest reduction a quire is sized for.
    pub k_max: usize,
    pub rounding: RoundingMode,
    /// Results are rounded as `dot * 2^-output_shift`.
    pub output_shift: i32,
}

impl ArrayConfig {
    pub fn new(size: usize, sel: PrecSel) -> Result<Self> {
        if size != 8 && size != 16 {
            return Err(Error::InvalidArgument(format!("array size must be 8 or 16, got {size}")));
        }
        Ok(ArrayConfig {
            size,
            sel,
            k_max: 1 << 16,
            rounding: RoundingMode::Fused,
            output_shift: 0,
        })
    }

    pub fn with_output_shift(mut self, shift: i32) -> Self {
        self.output_shift = shift;
        self
    }

    pub fn with_rounding(mut self, rounding: RoundingMode) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_k_max(mut self, k_max: usize) -> Self {
        self.k_max = k_max;
        self
    }

    /// Output columns covered by one tile.
    pub fn tile_cols(&self) -> usize {
        self.size * self.sel.lanes()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub mac_ops: u64,
    pub operand_gated: u64,
    pub rmmec_cells_fired: u64,
    pub rmmec_cells_gated: u64,
    /// Memory traffic is kept in bits so sub-byte formats stay exact.
    pub bits_read: u64,
    pub bits_written: u64,
    pub cycles: u64,
}

impl RunStats {
    pub fn bytes_read(&self) -> u64 {
        self.bits_read.div_ceil(8)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bits_written.div_ceil(8)
    }

    /// `2 * mac_ops / bytes` as a reduced `(numerator, denominator)`, with
    /// bytes counted fractionally as `bits / 8`.
    pub fn ops_per_byte_ratio(&self) -> (u64, u64) {
        let num = 16 * self.mac_ops;
        let den = self.bits_read + self.bits_written;
        let g = gcd(num, den).max(1);
        (num / g, den / g)
    }

    pub fn effective_ops_per_byte(&self) -> f64 {
        let (n, d) = self.ops_per_byte_ratio();
        if d == 0 {
            0.0
        } else {
            n as f64 / d as f64
        }
    }

    pub fn gated_cell_fraction(&self) -> f64 {
        let total = self.rmmec_cells_fired + self.rmmec_cells_gated;
        if total == 0 {
            0.0
        } else {
            self.rmmec_cells_gated as f64 / total as f64
        }
    }

    fn add_mac(&mut self, m: &MacStats) {
        self.mac_ops += m.mac_ops;
        self.operand_gated += m.operand_gated;
        self.rmmec_cells_fired += m.rmmec.fired;
        self.rmmec_cells_gated += m.rmmec.gated;
    }

    pub fn report(&self, mode: &str, array: usize) -> StatsReport {
        StatsReport {
            mode: mode.to_string(),
            array,
            mac_ops: self.mac_ops,
            operand_gated: self.operand_gated,
            rmmec_cells_fired: self.rmmec_cells_fired,
            rmmec_cells_gated: self.rmmec_cells_gated,
            gated_cell_fraction: self.gated_cell_fraction(),
            bits_read: self.bits_read,
            bits_written: self.bits_written,
            bytes_read: self.bytes_read(),
            bytes_written: self.bytes_written(),
            cycles: self.cycles,
            cycles_approximate: true,
            effective_ops_per_byte: {
                let (n, d) = self.ops_per_byte_ratio();
                if d == 1 { n.to_string() } else { format!("{n}/{d}") }
            },
            effective_ops_per_byte_f64: self.effective_ops_per_byte(),
        }
    }
}

impl AddAssign for RunStats {
    fn add_assign(&mut self, rhs: Self) {
        self.mac_ops += rhs.mac_ops;
        self.operand_gated += rhs.operand_gated;
        self.rmmec_cells_fired += rhs.rmmec_cells_fired;
        self.rmmec_cells_gated += rhs.rmmec_cells_gated;
        self.bits_read += rhs.bits_read;
        self.bits_written += rhs.bits_written;
        self.cycles += rhs.cycles;
    }
}

/// Serializable run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub mode: String,
    pub array: usize,
    pub mac_ops: u64,
    pub operand_gated: u64,
    pub rmmec_cells_fired: u64,
    pub rmmec_cells_gated: u64,
    pub gated_cell_fraction: f64,
    pub bits_read: u64,
    pub bits_written: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub cycles: u64,
    pub cycles_approximate: bool,
    /// Exact ratio as a string.
    pub effective_ops_per_byte: String,
    pub effective_ops_per_byte_f64: f64,
}

impl StatsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        format!(
            "mode,array,mac_ops,operand_gated,rmmec_cells_fired,rmmec_cells_gated,gated_cell_fraction,bits_read,bits_written,bytes_read,bytes_written,cycles,cycles_approximate,effective_ops_per_byte,effective_ops_per_byte_f64\n\
             {},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.mode,
            self.array,
            self.mac_ops,
            self.operand_gated,
            self.rmmec_cells_fired,
            self.rmmec_cells_gated,
            self.gated_cell_fraction,
            self.bits_read,
            self.bits_written,
            self.bytes_read,
            self.bytes_written,
            self.cycles,
            self.cycles_approximate,
            self.effective_ops_per_byte,
            self.effective_ops_per_byte_f64,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub bits_read: u64,
    pub bits_written: u64,
}

/// No-reuse traffic in bits: A is streamed once per column tile, B once per
/// row tile, C written once, all at the format's bit width.
pub fn traffic_model(m: usize, k: usize, n: usize, cfg: &ArrayConfig) -> Traffic {
    let bits = cfg.sel.format().bits() as u64;
    let (m, k, n) = (m as u64, k as u64, n as u64);
    let size = cfg.size as u64;
    let a_passes = n.div_ceil(size);
    let b_passes = m.div_ceil(size);
    Traffic {
        bits_read: m * k * bits * a_passes + k * n * bits * b_passes,
        bits_written: m * n * bits,
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `C = A * B` with one fused rounding per output element.
pub fn gemm(a: &Tensor, b: &Tensor, cfg: &ArrayConfig) -> Result<(Tensor, RunStats)> {
    let format = cfg.sel.format();
    for t in [a, b] {
        if t.format() != format {
            return Err(Error::FormatMismatch {
                expected: format.to_string(),
                found: t.format().to_string(),
            });
        }
    }
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!("A is {m}x{k} but B is {k2}x{n}")));
    }
    if k > cfg.k_max {
        return Err(Error::AccumulationLimit { k_max: cfg.k_max });
    }

    let lanes = cfg.sel.lanes();
    let tile_cols = cfg.tile_cols();
    let row_tiles = m.div_ceil(cfg.size);
    let col_tiles = n.div_ceil(tile_cols);
    let ad = a.data();
    let bd = b.data();

    let tiles: Vec<(Vec<(usize, u64)>, MacStats)> = (0..row_tiles * col_tiles)
        .into_par_iter()
        .map(|t| -> Result<_> {
            let (ti, tj) = (t / col_tiles, t % col_tiles);
            let mut unit = MacUnit::new(cfg.sel, k.max(1), cfg.rounding)?;
            let mut out = Vec::new();
            let mut stats = MacStats::default();
            for i in ti * cfg.size..((ti + 1) * cfg.size).min(m) {
                for c in 0..cfg.size {
                    let j0 = tj * tile_cols + c * lanes;
                    if j0 >= n {
                        break;
                    }
                    let active = lanes.min(n - j0);
                    unit.reset();
                    let mut lane_a = [0u64; 4];
                    let mut lane_b = [0u64; 4];
                    for kk in 0..k {
                        let av = ad[i * k + kk];
                        for l in 0..active {
                            lane_a[l] = av;
                            lane_b[l] = bd[kk * n + j0 + l];
                        }
                        let wa = cfg.sel.pack(&lane_a[..lanes]);
                        let wb = cfg.sel.pack(&lane_b[..lanes]);
                        unit.mac_active(wa, wb, active)?;
                    }
                    let results = unit.results_shifted(cfg.output_shift);
                    for l in 0..active {
                        out.push((i * n + j0 + l, results[l]));
                    }
                    stats += unit.stats();
                }
            }
            Ok((out, stats))
        })
        .collect::<Result<_>>()?;

    let mut c = Tensor::zeros(format, vec![m, n]);
    let mut stats = RunStats::default();
    for (values, mac) in &tiles {
        for &(idx, bits) in values {
            c.data_mut()[idx] = bits;
        }
        stats.add_mac(mac);
    }
    let traffic = traffic_model(m, k, n, cfg);
    stats.bits_read = traffic.bits_read;
    stats.bits_written = traffic.bits_written;
    stats.cycles = (row_tiles * col_tiles * k) as u64;
    Ok((c, stats))
}
