//! SIMD MAC lane engine.
//!
//! A 16-bit operand word carries 4 lanes of FP4/Posit(4,1), 2 lanes of
//! Posit(8,0) or 1 lane of Posit(16,1), packed little-endian (lane 0 in the
//! least-significant field). Each lane decodes its operands, XORs signs, adds
//! scales and multiplies fractions on the composed multiplier, then feeds an
//! exact quire. Rounding happens once, when the quire is read out.

mod quire;

use std::fmt;
use std::str::FromStr;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{decode, Class, DecodedNumber, FormatSpec};
use crate::rmmec::{GatingStats, MulBlockArray, MulWidth};

pub use quire::Quire;

pub const MAX_LANES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimdMode {
    X4,
    X2,
    X1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FourBitKind {
    Fp4,
    Posit4,
}

/// Precision select: lane configuration of the MAC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrecSel {
    pub mode: SimdMode,
    /// Only meaningful in [`SimdMode::X4`].
    pub four_bit: FourBitKind,
}

impl PrecSel {
    pub const FP4: PrecSel = PrecSel { mode: SimdMode::X4, four_bit: FourBitKind::Fp4 };
    pub const POSIT4: PrecSel = PrecSel { mode: SimdMode::X4, four_bit: FourBitKind::Posit4 };
    pub const POSIT8: PrecSel = PrecSel { mode: SimdMode::X2, four_bit: FourBitKind::Fp4 };
    pub const POSIT16: PrecSel = PrecSel { mode: SimdMode::X1, four_bit: FourBitKind::Fp4 };

    pub const ALL: [PrecSel; 4] = [Self::FP4, Self::POSIT4, Self::POSIT8, Self::POSIT16];

    pub fn for_format(format: FormatSpec) -> Result<Self> {
        match format {
            FormatSpec::FP4 => Ok(Self::FP4),
            FormatSpec::POSIT4_1 => Ok(Self::POSIT4),
            FormatSpec::POSIT8_0 => Ok(Self::POSIT8),
            FormatSpec::POSIT16_1 => Ok(Self::POSIT16),
            other => Err(Error::InvalidArgument(format!("no SIMD mode computes in {other}"))),
        }
    }

    pub fn lanes(&self) -> usize {
        match self.mode {
            SimdMode::X4 => 4,
            SimdMode::X2 => 2,
            SimdMode::X1 => 1,
        }
    }

    pub fn lane_bits(&self) -> u32 {
        16 / self.lanes() as u32
    }

    pub fn format(&self) -> FormatSpec {
        match (self.mode, self.four_bit) {
            (SimdMode::X4, FourBitKind::Fp4) => FormatSpec::FP4,
            (SimdMode::X4, FourBitKind::Posit4) => FormatSpec::POSIT4_1,
            (SimdMode::X2, _) => FormatSpec::POSIT8_0,
            (SimdMode::X1, _) => FormatSpec::POSIT16_1,
        }
    }

    pub fn mul_width(&self) -> MulWidth {
        match self.mode {
            SimdMode::X4 => MulWidth::W2,
            SimdMode::X2 => MulWidth::W6,
            SimdMode::X1 => MulWidth::W12,
        }
    }

    /// Splits a word into lane fields, lane 0 first.
    pub fn unpack(&self, word: u16) -> ArrayVec<u64, MAX_LANES> {
        let bits = self.lane_bits();
        let mask = (1u32 << bits) - 1;
        (0..self.lanes())
            .map(|i| ((word as u32 >> (i as u32 * bits)) & mask) as u64)
            .collect()
    }

    pub fn pack(&self, lanes: &[u64]) -> u16 {
        let bits = self.lane_bits();
        let mask = (1u64 << bits) - 1;
        lanes
            .iter()
            .take(self.lanes())
            .enumerate()
            .fold(0u16, |w, (i, &l)| w | (((l & mask) as u16) << (i as u32 * bits)))
    }

    pub fn name(&self) -> &'static str {
        match self.format() {
            FormatSpec::FP4 => "x4-fp4",
            FormatSpec::POSIT4_1 => "x4-posit4",
            FormatSpec::POSIT8_0 => "x2-posit8",
            _ => "x1-posit16",
        }
    }
}

impl fmt::Display for PrecSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrecSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x4-fp4" => Ok(Self::FP4),
            "x4-posit4" => Ok(Self::POSIT4),
            "x2-posit8" => Ok(Self::POSIT8),
            "x1-posit16" => Ok(Self::POSIT16),
            other => Self::for_format(other.parse()?),
        }
    }
}

/// One lane's product before accumulation:
/// `(-1)^negative * 2^scale * significand / 2^significand_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LaneProduct {
    pub class: Class,
    pub negative: bool,
    pub scale: i32,
    pub significand: u64,
    pub significand_bits: u32,
    /// Set when a zero operand power-gated the lane's multiplier.
    pub operand_gated: bool,
}

impl LaneProduct {
    pub fn zero_gated() -> Self {
        LaneProduct {
            class: Class::Zero,
            negative: false,
            scale: 0,
            significand: 0,
            significand_bits: 0,
            operand_gated: true,
        }
    }

    pub fn nar() -> Self {
        LaneProduct { class: Class::NaR, operand_gated: false, ..Self::zero_gated() }
    }

    pub fn to_f64(&self) -> f64 {
        match self.class {
            Class::Zero => 0.0,
            Class::NaR => f64::NAN,
            Class::Finite => {
                let v = self.significand as f64
                    * ((self.scale - self.significand_bits as i32) as f64).exp2();
                if self.negative {
                    -v
                } else {
                    v
                }
            }
        }
    }
}

/// Multiplication stage for one lane.
///
/// Only the explicit fraction fields go through the composed multiplier,
/// left-aligned to its width; the hidden-bit terms of
/// `(1 + fa)(1 + fb) = 1 + fa + fb + fa*fb` are added separately.
pub fn multiply_decoded(
    a: &DecodedNumber,
    b: &DecodedNumber,
    array: &mut MulBlockArray,
) -> LaneProduct {
    if a.is_nar() || b.is_nar() {
        return LaneProduct::nar();
    }
    if a.is_zero() || b.is_zero() {
        array.gate_all();
        return LaneProduct::zero_gated();
    }
    let w = array.width().bits();
    let align = |d: &DecodedNumber| -> u64 {
        assert!(d.fraction_bits <= w, "fraction wider than multiplier");
        (d.fraction & !(1u64 << d.fraction_bits)) << (w - d.fraction_bits)
    };
    let fa = align(a);
    let fb = align(b);
    let cross = array.composed_mul(fa as u32, fb as u32) as u64;
    let mut significand = (1u64 << (2 * w)) + ((fa + fb) << w) + cross;
    let mut significand_bits = 2 * w;
    let mut scale = a.scale + b.scale;
    if significand >> (2 * w + 1) != 0 {
        scale += 1;
        significand_bits += 1;
    }
    let tz = significand.trailing_zeros().min(significand_bits);
    significand >>= tz;
    significand_bits -= tz;
    LaneProduct {
        class: Class::Finite,
        negative: a.negative != b.negative,
        scale,
        significand,
        significand_bits,
        operand_gated: false,
    }
}

/// Unpacks both words and multiplies lane by lane.
pub fn lane_multiply(
    word_a: u16,
    word_b: u16,
    sel: PrecSel,
    array: &mut MulBlockArray,
) -> ArrayVec<LaneProduct, MAX_LANES> {
    let format = sel.format();
    sel.unpack(word_a)
        .into_iter()
        .zip(sel.unpack(word_b))
        .map(|(a, b)| multiply_decoded(&decode(a, format), &decode(b, format), array))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundingMode {
    /// One rounding per dot product.
    #[default]
    Fused,
    /// Round the accumulator after every MAC; for comparison experiments.
    PerMac,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacStats {
    pub mac_ops: u64,
    pub operand_gated: u64,
    pub rmmec: GatingStats,
}

impl std::ops::AddAssign for MacStats {
    fn add_assign(&mut self, rhs: Self) {
        self.mac_ops += rhs.mac_ops;
        self.operand_gated += rhs.operand_gated;
        self.rmmec += rhs.rmmec;
    }
}

/// One SIMD MAC: a multiplier array and one quire per lane.
#[derive(Clone, Debug)]
pub struct MacUnit {
    sel: PrecSel,
    rounding: RoundingMode,
    array: MulBlockArray,
    quires: ArrayVec<Quire, MAX_LANES>,
    mac_ops: u64,
    operand_gated: u64,
}

impl MacUnit {
    pub fn new(sel: PrecSel, k_max: usize, rounding: RoundingMode) -> Result<Self> {
        let quires = (0..sel.lanes())
            .map(|_| Quire::new(sel.format(), k_max))
            .collect::<Result<_>>()?;
        Ok(MacUnit {
            sel,
            rounding,
            array: MulBlockArray::new(sel.mul_width()),
            quires,
            mac_ops: 0,
            operand_gated: 0,
        })
    }

    pub fn sel(&self) -> PrecSel {
        self.sel
    }

    /// One multiply-accumulate step over all lanes.
    pub fn mac(&mut self, word_a: u16, word_b: u16) -> Result<()> {
        self.mac_active(word_a, word_b, self.sel.lanes())
    }

    /// Like [`MacUnit::mac`], counting only the first `active` lanes as work.
    /// Idle lanes carry zero operands.
    pub fn mac_active(&mut self, word_a: u16, word_b: u16, active: usize) -> Result<()> {
        let products = lane_multiply(word_a, word_b, self.sel, &mut self.array);
        for (lane, (p, q)) in products.iter().zip(self.quires.iter_mut()).enumerate() {
            q.add(p)?;
            if self.rounding == RoundingMode::PerMac {
                let rounded = decode(q.round(), self.sel.format());
                q.load(&rounded)?;
            }
            if lane < active {
                self.mac_ops += 1;
                self.operand_gated += p.operand_gated as u64;
            }
        }
        Ok(())
    }

    pub fn quires(&self) -> &[Quire] {
        &self.quires
    }

    /// Terminal rounding of every lane.
    pub fn results(&self) -> ArrayVec<u64, MAX_LANES> {
        self.quires.iter().map(|q| q.round()).collect()
    }

    /// Terminal rounding of `value * 2^-shift` for every lane.
    pub fn results_shifted(&self, shift: i32) -> ArrayVec<u64, MAX_LANES> {
        let f = self.sel.format();
        self.quires.iter().map(|q| q.round_shifted(f, shift)).collect()
    }

    pub fn stats(&self) -> MacStats {
        MacStats {
            mac_ops: self.mac_ops,
            operand_gated: self.operand_gated,
            rmmec: self.array.gating_stats(),
        }
    }

    /// Clears quires and counters for the next output.
    pub fn reset(&mut self) {
        self.quires.iter_mut().for_each(Quire::clear);
        self.array.reset();
        self.mac_ops = 0;
        self.operand_gated = 0;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DotResult {
    /// Rounded result per lane stream.
    pub lanes: Vec<u64>,
    /// The lane results packed into one word.
    pub word: u16,
    /// Exact quire contents per lane, before rounding.
    pub exact: Vec<String>,
    pub stats: MacStats,
}

/// Fused dot product of two word streams, one result per lane.
pub fn dot(a: &[u16], b: &[u16], sel: PrecSel, rounding: RoundingMode) -> Result<DotResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let mut unit = MacUnit::new(sel, a.len().max(1), rounding)?;
    for (&wa, &wb) in a.iter().zip(b) {
        unit.mac(wa, wb)?;
    }
    let lanes: Vec<u64> = unit.results().to_vec();
    Ok(DotResult {
        word: sel.pack(&lanes),
        exact: unit.quires().iter().map(Quire::rational_string).collect(),
        lanes,
        stats: unit.stats(),
    })
}

/// Dot product of two element vectors of one format on lane 0.
pub fn dot_elements(a: &[u64], b: &[u64], sel: PrecSel, rounding: RoundingMode) -> Result<u64> {
    let mask = (1u64 << sel.lane_bits()) - 1;
    let wa: Vec<u16> = a.iter().map(|&x| (x & mask) as u16).collect();
    let wb: Vec<u16> = b.iter().map(|&x| (x & mask) as u16).collect();
    Ok(dot(&wa, &wb, sel, rounding)?.lanes[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{encode_f64, FormatSpec};

    fn word(sel: PrecSel, values: &[f64]) -> u16 {
        let lanes: Vec<u64> = values.iter().map(|&v| encode_f64(v, sel.format())).collect();
        sel.pack(&lanes)
    }

    #[test]
    fn lane_geometry() {
        assert_eq!(PrecSel::FP4.lanes(), 4);
        assert_eq!(PrecSel::POSIT8.lane_bits(), 8);
        assert_eq!(PrecSel::POSIT16.mul_width().bits(), 12);
        let w = PrecSel::POSIT4.pack(&[1, 2, 3, 4]);
        assert_eq!(w, 0x4321);
        assert_eq!(PrecSel::POSIT4.unpack(w).as_slice(), &[1, 2, 3, 4]);
    }

    #[test]
    fn posit16_one_times_one() {
        let mut arr = MulBlockArray::new(MulWidth::W12);
        let p = lane_multiply(0x4000, 0x4000, PrecSel::POSIT16, &mut arr);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].class, Class::Finite);
        assert_eq!(p[0].scale, 0);
        assert_eq!(p[0].significand, 1);
        assert_eq!(p[0].significand_bits, 0);
    }

    #[test]
    fn posit4_four_lanes() {
        let sel = PrecSel::POSIT4;
        let mut arr = MulBlockArray::new(sel.mul_width());
        let p = lane_multiply(word(sel, &[2.0; 4]), word(sel, &[0.5; 4]), sel, &mut arr);
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|x| x.to_f64() == 1.0));
    }

    #[test]
    fn zero_operand_gates_lane() {
        let sel = PrecSel::POSIT8;
        let mut arr = MulBlockArray::new(sel.mul_width());
        let p = lane_multiply(word(sel, &[0.0, 1.5]), word(sel, &[3.0, 1.5]), sel, &mut arr);
        assert!(p[0].operand_gated && p[0].class == Class::Zero);
        assert!(!p[1].operand_gated);
        assert_eq!(p[1].to_f64(), 2.25);
        // lane 0 gates all 9 cells; 0.5 fractions leave one nonzero digit pair in lane 1
        assert_eq!(arr.gating_stats().gated, 9 + 8);
    }

    #[test]
    fn carry_normalizes_significand() {
        let sel = PrecSel::POSIT16;
        let mut arr = MulBlockArray::new(sel.mul_width());
        let p = lane_multiply(word(sel, &[1.75]), word(sel, &[1.75]), sel, &mut arr);
        assert_eq!(p[0].scale, 1);
        assert_eq!(p[0].to_f64(), 3.0625);
        let v = p[0].significand as f64 / (p[0].significand_bits as f64).exp2();
        assert!((1.0..2.0).contains(&v));
    }

    #[test]
    fn dot_examples() {
        let sel = PrecSel::POSIT8;
        let a = [0x40u16, 0x60];
        let b = [0x40u16, encode_f64(0.5, FormatSpec::POSIT8_0) as u16];
        let r = dot(&a, &b, sel, RoundingMode::Fused).unwrap();
        assert_eq!(r.lanes[0], 0x60);
        assert_eq!(r.exact[0], "2");

        let r = dot(&[0, 0, 0], &[0x40, 0x41, 0x7f], sel, RoundingMode::Fused).unwrap();
        assert_eq!(r.lanes, vec![0, 0]);
        assert_eq!(r.stats.operand_gated, r.stats.mac_ops);
        assert_eq!(r.stats.mac_ops, 6);
    }

    #[test]
    fn dot_length_mismatch() {
        assert!(matches!(
            dot(&[1], &[1, 2], PrecSel::FP4, RoundingMode::Fused),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn nar_absorbs() {
        let r = dot(&[0x8000, 0x4000], &[0x4000, 0x4000], PrecSel::POSIT16, RoundingMode::Fused)
            .unwrap();
        assert_eq!(r.lanes[0], 0x8000);
    }

    #[test]
    fn fused_beats_per_mac() {
        // 2 + 32 * 2^-5: per-MAC rounding in Posit(8,0) loses every small term
        let sel = PrecSel::POSIT8;
        let f = sel.format();
        let big = encode_f64(2.0, f) as u16;
        let tiny = encode_f64(1.0 / 32.0, f) as u16;
        let one = encode_f64(1.0, f) as u16;
        let mut a = vec![big];
        let mut b = vec![one];
        for _ in 0..32 {
            a.push(tiny);
            b.push(one);
        }
        let fused = dot(&a, &b, sel, RoundingMode::Fused).unwrap();
        let per_mac = dot(&a, &b, sel, RoundingMode::PerMac).unwrap();
        assert_eq!(decode(fused.lanes[0], f).to_f64(), 3.0);
        assert_eq!(decode(per_mac.lanes[0], f).to_f64(), 2.0);
    }
}
