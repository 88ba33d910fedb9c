//! Exact fixed-point accumulator.

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::formats::{dyadic_string, encode, Class, DecodedNumber, ExactValue, FormatSpec};

use super::LaneProduct;

/// Wide two's-complement fixed-point register. Any product of two finite
/// values of `format` is representable exactly, and `k_max` worst-case
/// products can be summed without overflow.
#[derive(Clone, Debug)]
pub struct Quire {
    format: FormatSpec,
    k_max: usize,
    count: usize,
    frac_bits: u32,
    width: u32,
    limbs: Vec<u64>,
    nar: bool,
}

fn ceil_log2(x: usize) -> u32 {
    if x <= 1 {
        0
    } else {
        usize::BITS - (x - 1).leading_zeros()
    }
}

impl Quire {
    /// Position of the binary point: `2 * max_fraction_bits + 2 * max_scale`.
    pub fn frac_bits_for(format: FormatSpec) -> u32 {
        2 * format.max_fraction_bits() + 2 * format.max_scale() as u32
    }

    /// `1 + ceil(log2 k_max) + 4 * max_scale + 2 * max_fraction_bits + 2`.
    pub fn width_for(format: FormatSpec, k_max: usize) -> u32 {
        1 + ceil_log2(k_max) + 4 * format.max_scale() as u32 + 2 * format.max_fraction_bits() + 2
    }

    pub fn new(format: FormatSpec, k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::InvalidArgument("quire k_max must be at least 1".into()));
        }
        let width = Self::width_for(format, k_max);
        // one spare limb so a single add can never wrap before the range check
        let limbs = vec![0; width as usize / 64 + 2];
        Ok(Quire {
            format,
            k_max,
            count: 0,
            frac_bits: Self::frac_bits_for(format),
            width,
            limbs,
            nar: false,
        })
    }

    pub fn format(&self) -> FormatSpec {
        self.format
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_nar(&self) -> bool {
        self.nar
    }

    pub fn is_zero(&self) -> bool {
        !self.nar && self.limbs.iter().all(|&l| l == 0)
    }

    fn is_negative(&self) -> bool {
        self.limbs.last().is_some_and(|&l| l >> 63 == 1)
    }

    /// Resets the value and the accumulation count.
    pub fn clear(&mut self) {
        self.limbs.iter_mut().for_each(|l| *l = 0);
        self.count = 0;
        self.nar = false;
    }

    /// Accumulates one lane product exactly.
    pub fn add(&mut self, p: &LaneProduct) -> Result<()> {
        if self.count >= self.k_max {
            return Err(Error::AccumulationLimit { k_max: self.k_max });
        }
        self.count += 1;
        match p.class {
            Class::Zero => Ok(()),
            Class::NaR => {
                self.nar = true;
                Ok(())
            }
            Class::Finite => self.add_dyadic(
                p.negative,
                p.significand,
                p.scale - p.significand_bits as i32,
            ),
        }
    }

    /// Adds `±mag * 2^exp` without touching the accumulation count.
    pub(crate) fn add_dyadic(&mut self, negative: bool, mag: u64, exp: i32) -> Result<()> {
        if mag == 0 {
            return Ok(());
        }
        let mut shift = exp as i64 + self.frac_bits as i64;
        let mut mag = mag;
        if shift < 0 {
            let drop = (-shift) as u32;
            if drop >= 64 || mag & ((1u64 << drop) - 1) != 0 {
                return Err(Error::InvalidArgument(format!(
                    "addend 2^{exp} is below the quire resolution of {} fraction bits",
                    self.frac_bits
                )));
            }
            mag >>= drop;
            shift = 0;
        }
        let limb = (shift / 64) as usize;
        let offset = (shift % 64) as u32;
        if limb >= self.limbs.len() {
            return Err(Error::QuireOverflow { width: self.width });
        }
        let wide = (mag as u128) << offset;
        let parts = [wide as u64, (wide >> 64) as u64];

        let mut carry = false;
        for (i, slot) in self.limbs.iter_mut().enumerate().skip(limb) {
            let part = parts.get(i - limb).copied().unwrap_or(0);
            if i - limb >= 2 && !carry {
                break;
            }
            if negative {
                let (d, b1) = slot.overflowing_sub(part);
                let (d, b2) = d.overflowing_sub(carry as u64);
                *slot = d;
                carry = b1 || b2;
            } else {
                let (s, c1) = slot.overflowing_add(part);
                let (s, c2) = s.overflowing_add(carry as u64);
                *slot = s;
                carry = c1 || c2;
            }
        }
        if limb + 2 > self.limbs.len() && parts[1] != 0 {
            return Err(Error::QuireOverflow { width: self.width });
        }
        self.check_range()
    }

    /// The value must fit in `width` signed bits: every bit from `width - 1`
    /// upwards equals the sign.
    fn check_range(&self) -> Result<()> {
        let sign_fill = if self.is_negative() { u64::MAX } else { 0 };
        let first = (self.width - 1) as usize;
        for (i, &l) in self.limbs.iter().enumerate() {
            let lo_bit = i * 64;
            if lo_bit + 64 <= first {
                continue;
            }
            let mask = if lo_bit >= first {
                u64::MAX
            } else {
                u64::MAX << (first - lo_bit)
            };
            if (l ^ sign_fill) & mask != 0 {
                return Err(Error::QuireOverflow { width: self.width });
            }
        }
        Ok(())
    }

    fn magnitude(&self) -> (bool, Vec<u64>) {
        let negative = self.is_negative();
        if !negative {
            return (false, self.limbs.clone());
        }
        let mut mag: Vec<u64> = self.limbs.iter().map(|l| !l).collect();
        for l in mag.iter_mut() {
            let (s, c) = l.overflowing_add(1);
            *l = s;
            if !c {
                break;
            }
        }
        (true, mag)
    }

    /// The exact accumulated value.
    pub fn to_exact(&self) -> ExactValue {
        if self.nar {
            return ExactValue::NaR;
        }
        let (negative, mag) = self.magnitude();
        match ExactValue::from_limbs(negative, &mag, -(self.frac_bits as i64)) {
            ExactValue::Zero { .. } => ExactValue::ZERO,
            v => v,
        }
    }

    /// Like [`Quire::to_exact`] with the value scaled by `2^-shift`.
    pub fn to_exact_shifted(&self, shift: i32) -> ExactValue {
        match self.to_exact() {
            ExactValue::Finite(mut n) => {
                n.scale -= shift;
                ExactValue::Finite(n)
            }
            v => v,
        }
    }

    /// Single terminal rounding into the quire's own format.
    pub fn round(&self) -> u64 {
        self.round_to(self.format)
    }

    pub fn round_to(&self, spec: FormatSpec) -> u64 {
        encode(&self.to_exact(), spec)
    }

    /// Rounds `value * 2^-shift`; the power-of-two rescale itself is exact.
    pub fn round_shifted(&self, spec: FormatSpec, shift: i32) -> u64 {
        encode(&self.to_exact_shifted(shift), spec)
    }

    /// Replaces the value with a decoded number, keeping the count.
    pub(crate) fn load(&mut self, d: &DecodedNumber) -> Result<()> {
        let count = self.count;
        self.clear();
        self.count = count;
        match d.class {
            Class::Zero => Ok(()),
            Class::NaR => {
                self.nar = true;
                Ok(())
            }
            Class::Finite => {
                let (m, e) = d.dyadic();
                self.add_dyadic(d.negative, m, e)
            }
        }
    }

    /// Exact value as a reduced rational string.
    pub fn rational_string(&self) -> String {
        if self.nar {
            return "NaR".into();
        }
        let (negative, mag) = self.magnitude();
        let mut big = BigUint::default();
        for &l in mag.iter().rev() {
            big = (big << 64u32) + BigUint::from(l);
        }
        dyadic_string(negative, &big, -(self.frac_bits as i64))
    }

    pub fn to_f64(&self) -> f64 {
        f64::from_bits(encode(&self.to_exact(), FormatSpec::REAL64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::decode;

    fn product(negative: bool, scale: i32, sig: u64, bits: u32) -> LaneProduct {
        LaneProduct {
            class: Class::Finite,
            negative,
            scale,
            significand: sig,
            significand_bits: bits,
            operand_gated: false,
        }
    }

    #[test]
    fn width_formula() {
        assert_eq!(Quire::width_for(FormatSpec::POSIT16_1, 1 << 20), 159);
        assert_eq!(Quire::frac_bits_for(FormatSpec::POSIT8_0), 22);
        assert!(Quire::new(FormatSpec::FP4, 0).is_err());
    }

    #[test]
    fn add_one_then_cancel() {
        let mut q = Quire::new(FormatSpec::POSIT8_0, 4).unwrap();
        q.add(&product(false, 0, 1, 0)).unwrap();
        assert_eq!(q.round(), 0x40);
        assert_eq!(q.rational_string(), "1");
        q.add(&product(true, 0, 1, 0)).unwrap();
        assert!(q.is_zero());
        assert_eq!(q.round(), 0);
    }

    #[test]
    fn negative_values_round_trip() {
        let mut q = Quire::new(FormatSpec::POSIT16_1, 8).unwrap();
        q.add(&product(true, 3, 0b101, 2)).unwrap(); // -10
        assert_eq!(q.rational_string(), "-10");
        assert_eq!(decode(q.round(), FormatSpec::POSIT16_1).to_f64(), -10.0);
        assert_eq!(q.to_f64(), -10.0);
    }

    #[test]
    fn minpos_squares_sum_exactly() {
        let mut q = Quire::new(FormatSpec::POSIT8_0, 64).unwrap();
        for _ in 0..64 {
            q.add(&product(false, -12, 1, 0)).unwrap();
        }
        assert_eq!(q.rational_string(), "1/64");
        assert_eq!(q.round(), 0x01);
        assert_eq!(decode(q.round(), FormatSpec::POSIT8_0).to_f64(), 1.0 / 64.0);
    }

    #[test]
    fn accumulation_limit() {
        let mut q = Quire::new(FormatSpec::FP4, 2).unwrap();
        q.add(&product(false, 0, 1, 0)).unwrap();
        q.add(&product(false, 0, 1, 0)).unwrap();
        assert!(matches!(
            q.add(&product(false, 0, 1, 0)),
            Err(Error::AccumulationLimit { k_max: 2 })
        ));
    }

    #[test]
    fn overflow_detected() {
        let mut q = Quire::new(FormatSpec::FP4, 1).unwrap();
        // 2^40 is far above any FP4 product
        assert!(matches!(q.add_dyadic(false, 1, 40), Err(Error::QuireOverflow { .. })));
    }

    #[test]
    fn nar_sets_flag() {
        let mut q = Quire::new(FormatSpec::POSIT8_0, 2).unwrap();
        q.add(&LaneProduct::nar()).unwrap();
        assert!(q.is_nar());
        assert_eq!(q.round(), 0x80);
    }
}
