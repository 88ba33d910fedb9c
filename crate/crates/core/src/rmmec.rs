//! Reconfigurable mantissa multiplier.
//!
//! Wider unsigned multiplies are composed from a grid of 2-bit x 2-bit
//! multiplier cells: operands are split into base-4 digits and the product is
//! the sum of shifted digit products. A cell whose digit pair contains a zero
//! digit is gated and contributes nothing; the array keeps counts of fired and
//! gated cells.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

/// Operand width of a composed multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MulWidth {
    W2,
    W6,
    W12,
}

impl MulWidth {
    pub fn bits(self) -> u32 {
        match self {
            MulWidth::W2 => 2,
            MulWidth::W6 => 6,
            MulWidth::W12 => 12,
        }
    }

    pub fn digits(self) -> u32 {
        self.bits() / 2
    }

    /// `(width / 2)^2`.
    pub fn cells(self) -> u64 {
        let d = self.digits() as u64;
        d * d
    }
}

/// 2-bit x 2-bit multiply as sum-of-products logic.
pub fn mul2(a: u8, b: u8) -> u8 {
    debug_assert!(a < 4 && b < 4);
    let (a0, a1) = (a & 1, (a >> 1) & 1);
    let (b0, b1) = (b & 1, (b >> 1) & 1);
    let p0 = a0 & b0;
    let p1 = (a1 & b0) ^ (a0 & b1);
    let p2 = (a1 & b1) & (p0 ^ 1);
    let p3 = a1 & b1 & a0 & b0;
    p0 | (p1 << 1) | (p2 << 2) | (p3 << 3)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatingStats {
    pub fired: u64,
    pub gated: u64,
}

impl GatingStats {
    /// `fired / (fired + gated)`; 0 when nothing has run.
    pub fn utilization(&self) -> f64 {
        let total = self.fired + self.gated;
        if total == 0 {
            0.0
        } else {
            self.fired as f64 / total as f64
        }
    }
}

impl AddAssign for GatingStats {
    fn add_assign(&mut self, rhs: Self) {
        self.fired += rhs.fired;
        self.gated += rhs.gated;
    }
}

#[derive(Clone, Debug)]
pub struct MulBlockArray {
    width: MulWidth,
    stats: GatingStats,
}

impl MulBlockArray {
    pub fn new(width: MulWidth) -> Self {
        MulBlockArray { width, stats: GatingStats::default() }
    }

    pub fn width(&self) -> MulWidth {
        self.width
    }

    pub fn cell_count(&self) -> u64 {
        self.width.cells()
    }

    /// One cell evaluation with gating accounting.
    pub fn cell(&mut self, a: u8, b: u8) -> u8 {
        if a == 0 || b == 0 {
            self.stats.gated += 1;
            0
        } else {
            self.stats.fired += 1;
            mul2(a, b)
        }
    }

    /// Exact `a * b` from the digit grid.
    pub fn composed_mul(&mut self, a: u32, b: u32) -> u32 {
        let digits = self.width.digits();
        debug_assert!(a >> self.width.bits() == 0 && b >> self.width.bits() == 0);
        let mut acc = 0u32;
        for i in 0..digits {
            let ai = ((a >> (2 * i)) & 3) as u8;
            for j in 0..digits {
                let bj = ((b >> (2 * j)) & 3) as u8;
                acc += (self.cell(ai, bj) as u32) << (2 * (i + j));
            }
        }
        acc
    }

    /// Power-gates the whole grid for one operation (zero operand).
    pub fn gate_all(&mut self) {
        self.stats.gated += self.width.cells();
    }

    pub fn gating_stats(&self) -> GatingStats {
        self.stats
    }

    pub fn reset(&mut self) {
        self.stats = GatingStats::default();
    }

    /// Folds another worker's counters into this one.
    pub fn merge(&mut self, other: &MulBlockArray) {
        self.stats += other.stats;
    }
}
