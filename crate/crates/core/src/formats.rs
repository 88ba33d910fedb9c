//! Bit-exact codecs for the engine's number formats.
//!
//! Posits follow the type-III definition: a sign bit, a run-length encoded
//! regime (`m` zeros give `k = -m`, `m` ones give `k = m - 1`), up to `es`
//! exponent bits and a fraction with a hidden one, so a positive pattern
//! encodes `useed^k * 2^e * 1.f` with `useed = 2^(2^es)`. Negative patterns
//! are the two's complement of their magnitude. Exponent bits pushed out by a
//! long regime read as zero.
//!
//! FP4 is E2M1: one sign bit, two exponent bits with bias 1, one mantissa bit,
//! subnormals, no infinities or NaN, saturating at ±6.
//!
//! Rounding is to the nearest point of the format's value lattice, ties to the
//! pattern with a clear least-significant bit. Posits saturate to ±maxpos and
//! never round a nonzero value to zero; FP4 saturates to ±6 and may underflow
//! to a signed zero.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatKind {
    Posit,
    Fp4,
    /// Full-precision reference arithmetic (IEEE binary64).
    Real64,
}

/// A numeric format and its derived constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FormatSpec {
    kind: FormatKind,
    n: u32,
    es: u32,
}

impl FormatSpec {
    pub const POSIT4_1: FormatSpec = FormatSpec { kind: FormatKind::Posit, n: 4, es: 1 };
    pub const POSIT8_0: FormatSpec = FormatSpec { kind: FormatKind::Posit, n: 8, es: 0 };
    pub const POSIT16_1: FormatSpec = FormatSpec { kind: FormatKind::Posit, n: 16, es: 1 };
    pub const FP4: FormatSpec = FormatSpec { kind: FormatKind::Fp4, n: 4, es: 0 };
    pub const REAL64: FormatSpec = FormatSpec { kind: FormatKind::Real64, n: 64, es: 0 };

    /// The formats the engine computes in.
    pub const ENGINE: [FormatSpec; 4] =
        [Self::FP4, Self::POSIT4_1, Self::POSIT8_0, Self::POSIT16_1];

    pub fn posit(n: u32, es: u32) -> Result<Self> {
        match (n, es) {
            (4, 1) | (8, 0) | (16, 1) => Ok(FormatSpec { kind: FormatKind::Posit, n, es }),
            _ => Err(Error::UnsupportedPosit { n, es }),
        }
    }

    pub fn kind(&self) -> FormatKind {
        self.kind
    }

    /// Bit width of one encoded element.
    pub fn bits(&self) -> u32 {
        self.n
    }

    pub fn es(&self) -> u32 {
        self.es
    }

    pub fn is_posit(&self) -> bool {
        self.kind == FormatKind::Posit
    }

    /// Bits per stored parameter for model-size accounting. The reference
    /// format stands in for the FP32 baseline.
    pub fn storage_bits(&self) -> u32 {
        match self.kind {
            FormatKind::Real64 => 32,
            _ => self.n,
        }
    }

    /// log2(useed) = 2^es.
    pub fn useed_log2(&self) -> u32 {
        1 << self.es
    }

    /// Largest binary scale of any finite value.
    pub fn max_scale(&self) -> i32 {
        match self.kind {
            FormatKind::Posit => ((self.n - 2) << self.es) as i32,
            FormatKind::Fp4 => 2,
            FormatKind::Real64 => 1023,
        }
    }

    /// Smallest binary scale of any nonzero value.
    pub fn min_scale(&self) -> i32 {
        match self.kind {
            FormatKind::Posit => -self.max_scale(),
            FormatKind::Fp4 => -1,
            FormatKind::Real64 => -1074,
        }
    }

    /// Largest number of explicit fraction bits in any pattern.
    pub fn max_fraction_bits(&self) -> u32 {
        match self.kind {
            FormatKind::Posit => self.n.saturating_sub(3 + self.es),
            FormatKind::Fp4 => 1,
            FormatKind::Real64 => 52,
        }
    }

    pub fn mask(&self) -> u64 {
        if self.n >= 64 {
            u64::MAX
        } else {
            (1u64 << self.n) - 1
        }
    }

    /// Largest positive pattern.
    pub fn maxpos_bits(&self) -> u64 {
        match self.kind {
            FormatKind::Posit => (1u64 << (self.n - 1)) - 1,
            FormatKind::Fp4 => 0b0111,
            FormatKind::Real64 => f64::MAX.to_bits(),
        }
    }

    /// Smallest positive pattern.
    pub fn minpos_bits(&self) -> u64 {
        1
    }

    pub fn zero_bits(&self) -> u64 {
        0
    }

    /// The exception pattern, if the format has one.
    pub fn nar_bits(&self) -> Option<u64> {
        match self.kind {
            FormatKind::Posit => Some(1u64 << (self.n - 1)),
            FormatKind::Fp4 => None,
            FormatKind::Real64 => Some(f64::NAN.to_bits()),
        }
    }

    /// Container dtype code.
    pub fn dtype_code(&self) -> u8 {
        match *self {
            Self::REAL64 => 0,
            Self::POSIT16_1 => 1,
            Self::POSIT8_0 => 2,
            Self::POSIT4_1 => 3,
            _ => 4,
        }
    }

    pub fn from_dtype_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::REAL64,
            1 => Self::POSIT16_1,
            2 => Self::POSIT8_0,
            3 => Self::POSIT4_1,
            4 => Self::FP4,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match *self {
            Self::POSIT4_1 => "posit4_1",
            Self::POSIT8_0 => "posit8_0",
            Self::POSIT16_1 => "posit16_1",
            Self::FP4 => "fp4",
            _ => "real64",
        }
    }

    /// Negates an encoded value.
    pub fn negate_bits(&self, bits: u64) -> u64 {
        match self.kind {
            FormatKind::Posit => bits.wrapping_neg() & self.mask(),
            FormatKind::Fp4 => bits ^ 0b1000,
            FormatKind::Real64 => bits ^ (1 << 63),
        }
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "posit4_1" | "posit4" | "p4" => Ok(Self::POSIT4_1),
            "posit8_0" | "posit8" | "p8" => Ok(Self::POSIT8_0),
            "posit16_1" | "posit16" | "p16" => Ok(Self::POSIT16_1),
            "fp4" | "e2m1" => Ok(Self::FP4),
            "real64" | "f64" | "fp32" | "reference" => Ok(Self::REAL64),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

impl TryFrom<String> for FormatSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FormatSpec> for String {
    fn from(f: FormatSpec) -> String {
        f.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Zero,
    NaR,
    Finite,
}

impl Class {
    pub fn as_str(&self) -> &'static str {
        match self {
            Class::Zero => "zero",
            Class::NaR => "nar",
            Class::Finite => "finite",
        }
    }
}

/// An unpacked value: `(-1)^negative * 2^scale * fraction / 2^fraction_bits`
/// with the hidden bit of `fraction` at position `fraction_bits`.
///
/// Non-finite values carry zero scale and fraction. Zero is unsigned except
/// for the FP4 pattern `0b1000`, which keeps its sign so that every pattern
/// decodes to something that re-encodes to itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DecodedNumber {
    pub class: Class,
    pub negative: bool,
    pub scale: i32,
    pub fraction: u64,
    pub fraction_bits: u32,
}

impl DecodedNumber {
    pub const ZERO: DecodedNumber = DecodedNumber {
        class: Class::Zero,
        negative: false,
        scale: 0,
        fraction: 0,
        fraction_bits: 0,
    };

    pub const NAR: DecodedNumber = DecodedNumber {
        class: Class::NaR,
        negative: false,
        scale: 0,
        fraction: 0,
        fraction_bits: 0,
    };

    pub fn finite(negative: bool, scale: i32, fraction: u64, fraction_bits: u32) -> Self {
        debug_assert!(fraction >> fraction_bits == 1, "significand not normalized");
        DecodedNumber { class: Class::Finite, negative, scale, fraction, fraction_bits }
    }

    pub fn is_zero(&self) -> bool {
        self.class == Class::Zero
    }

    pub fn is_nar(&self) -> bool {
        self.class == Class::NaR
    }

    /// Magnitude as `mantissa * 2^exponent`; zero has mantissa 0.
    pub fn dyadic(&self) -> (u64, i32) {
        match self.class {
            Class::Finite => (self.fraction, self.scale - self.fraction_bits as i32),
            _ => (0, 0),
        }
    }

    /// Exact for every engine format.
    pub fn to_f64(&self) -> f64 {
        match self.class {
            Class::Zero => {
                if self.negative {
                    -0.0
                } else {
                    0.0
                }
            }
            Class::NaR => f64::NAN,
            Class::Finite => {
                let (m, e) = self.dyadic();
                let v = m as f64 * (e as f64).exp2();
                if self.negative {
                    -v
                } else {
                    v
                }
            }
        }
    }

    /// Exact value as a reduced rational string such as `-3/16` or `NaR`.
    pub fn rational_string(&self) -> String {
        match self.class {
            Class::Zero => "0".to_string(),
            Class::NaR => "NaR".to_string(),
            Class::Finite => {
                let (m, e) = self.dyadic();
                dyadic_string(self.negative, &BigUint::from(m), e as i64)
            }
        }
    }
}

/// Formats `±mag * 2^exp` as a reduced rational.
pub fn dyadic_string(negative: bool, mag: &BigUint, exp: i64) -> String {
    if mag.bits() == 0 {
        return "0".to_string();
    }
    let tz = mag.trailing_zeros().unwrap_or(0) as i64;
    let (mag, exp) = if exp < 0 {
        let strip = tz.min(-exp);
        (mag >> strip as u64, exp + strip)
    } else {
        (mag.clone(), exp)
    };
    let sign = if negative { "-" } else { "" };
    if exp >= 0 {
        format!("{sign}{}", mag << exp as u64)
    } else {
        format!("{sign}{}/{}", mag, BigUint::from(1u8) << (-exp) as u64)
    }
}

/// Exact value of an f64 as a reduced rational string.
pub fn f64_rational(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let exp_field = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mag, exp) = if exp_field == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), exp_field - 1075)
    };
    dyadic_string(bits >> 63 == 1, &BigUint::from(mag), exp)
}

/// A float report field paired with its exact rational value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportNumber {
    pub value: f64,
    pub exact: String,
}

impl From<f64> for ReportNumber {
    fn from(value: f64) -> Self {
        ReportNumber { value, exact: f64_rational(value) }
    }
}

/// A nonzero magnitude reduced to 64 significant bits plus a sticky flag:
/// `sig * 2^(scale - 63)`, plus a nonzero tail below the last bit when
/// `sticky` is set. Enough to round correctly to any format up to 64 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Normalized {
    pub negative: bool,
    pub scale: i32,
    pub sig: u64,
    pub sticky: bool,
}

/// Input to [`encode`]: an exact real, or one of the special values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExactValue {
    Zero { negative: bool },
    NaR,
    Finite(Normalized),
}

impl ExactValue {
    pub const ZERO: ExactValue = ExactValue::Zero { negative: false };

    /// Exact conversion; NaN and infinities map to NaR.
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() || x.is_infinite() {
            return ExactValue::NaR;
        }
        if x == 0.0 {
            return ExactValue::Zero { negative: x.is_sign_negative() };
        }
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let exp_field = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mag, exp) = if exp_field == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), exp_field - 1075)
        };
        Self::from_u128(negative, mag as u128, exp)
    }

    /// `±mag * 2^exp`.
    pub fn from_u128(negative: bool, mag: u128, exp: i64) -> Self {
        let lo = mag as u64;
        let hi = (mag >> 64) as u64;
        Self::from_limbs(negative, &[lo, hi], exp)
    }

    /// `±mag * 2^exp` where `mag` is given as little-endian 64-bit limbs.
    pub fn from_limbs(negative: bool, limbs: &[u64], exp: i64) -> Self {
        let Some(top) = limbs.iter().rposition(|&l| l != 0) else {
            return ExactValue::Zero { negative };
        };
        let lz = limbs[top].leading_zeros();
        let msb = top as i64 * 64 + (63 - lz) as i64;
        // Gather the 64 bits below and including the msb.
        let sig = if lz == 0 {
            limbs[top]
        } else {
            let below = if top > 0 { limbs[top - 1] >> (64 - lz) } else { 0 };
            (limbs[top] << lz) | below
        };
        // Bits strictly below the 64 gathered ones.
        let dropped = msb - 63;
        let sticky = if dropped <= 0 {
            false
        } else {
            let whole = (dropped / 64) as usize;
            let part = (dropped % 64) as u32;
            limbs[..whole].iter().any(|&l| l != 0)
                || (part > 0 && limbs[whole] & ((1u64 << part) - 1) != 0)
        };
        ExactValue::Finite(Normalized {
            negative,
            scale: (msb + exp) as i32,
            sig,
            sticky,
        })
    }

    pub fn is_negative(&self) -> bool {
        match self {
            ExactValue::Zero { negative } => *negative,
            ExactValue::NaR => false,
            ExactValue::Finite(n) => n.negative,
        }
    }
}

impl From<DecodedNumber> for ExactValue {
    fn from(d: DecodedNumber) -> Self {
        match d.class {
            Class::Zero => ExactValue::Zero { negative: d.negative },
            Class::NaR => ExactValue::NaR,
            Class::Finite => {
                let (m, e) = d.dyadic();
                Self::from_u128(d.negative, m as u128, e as i64)
            }
        }
    }
}

/// Unpacks a bit pattern. Bits above `spec.bits()` are ignored.
pub fn decode(bits: u64, spec: FormatSpec) -> DecodedNumber {
    let bits = bits & spec.mask();
    match spec.kind {
        FormatKind::Posit => decode_posit(bits, spec.n, spec.es),
        FormatKind::Fp4 => decode_fp4(bits),
        FormatKind::Real64 => decode_real64(bits),
    }
}

fn decode_posit(bits: u64, n: u32, es: u32) -> DecodedNumber {
    let sign_bit = 1u64 << (n - 1);
    if bits == 0 {
        return DecodedNumber::ZERO;
    }
    if bits == sign_bit {
        return DecodedNumber::NAR;
    }
    let negative = bits & sign_bit != 0;
    let mag = if negative {
        bits.wrapping_neg() & ((sign_bit << 1) - 1)
    } else {
        bits
    };

    let mut idx = n as i32 - 2;
    let lead = (mag >> idx) & 1;
    let mut run = 0i32;
    while idx >= 0 && (mag >> idx) & 1 == lead {
        run += 1;
        idx -= 1;
    }
    // idx now sits on the regime terminator, or is -1 when the run filled the word.
    let remaining = idx.max(0) as u32;
    let k = if lead == 1 { run - 1 } else { -run };

    let taken = es.min(remaining);
    let e_field = (mag >> (remaining - taken)) & ((1u64 << taken) - 1);
    let e = (e_field << (es - taken)) as i32;
    let fb = remaining - taken;
    let frac = mag & ((1u64 << fb) - 1);

    DecodedNumber::finite(negative, (k << es) + e, (1u64 << fb) | frac, fb)
}

fn decode_fp4(bits: u64) -> DecodedNumber {
    let negative = bits & 0b1000 != 0;
    let exp = (bits >> 1) & 0b11;
    let man = bits & 1;
    match (exp, man) {
        (0, 0) => DecodedNumber { negative, ..DecodedNumber::ZERO },
        (0, _) => DecodedNumber::finite(negative, -1, 1, 0),
        _ => DecodedNumber::finite(negative, exp as i32 - 1, 0b10 | man, 1),
    }
}

fn decode_real64(bits: u64) -> DecodedNumber {
    let x = f64::from_bits(bits);
    if x.is_nan() || x.is_infinite() {
        return DecodedNumber::NAR;
    }
    if x == 0.0 {
        return DecodedNumber { negative: x.is_sign_negative(), ..DecodedNumber::ZERO };
    }
    match ExactValue::from_f64(x) {
        ExactValue::Finite(n) => {
            let tz = n.sig.trailing_zeros();
            let fb = 63 - tz;
            DecodedNumber::finite(n.negative, n.scale, n.sig >> tz, fb)
        }
        _ => unreachable!(),
    }
}

/// Rounds an exact value to the nearest pattern of `spec`.
pub fn encode(value: &ExactValue, spec: FormatSpec) -> u64 {
    match *value {
        ExactValue::NaR => match spec.kind {
            FormatKind::Posit => spec.nar_bits().unwrap(),
            // FP4 has no exception encoding; NaR inputs cannot arise from FP4 operands.
            FormatKind::Fp4 => 0,
            FormatKind::Real64 => f64::NAN.to_bits(),
        },
        ExactValue::Zero { negative } => match spec.kind {
            FormatKind::Posit => 0,
            FormatKind::Fp4 => {
                if negative {
                    0b1000
                } else {
                    0
                }
            }
            FormatKind::Real64 => {
                if negative {
                    1 << 63
                } else {
                    0
                }
            }
        },
        ExactValue::Finite(x) => {
            let mag = match spec.kind {
                FormatKind::Posit => encode_posit_magnitude(&x, spec),
                FormatKind::Fp4 => encode_fp4_magnitude(&x),
                FormatKind::Real64 => return encode_real64(&x),
            };
            match spec.kind {
                FormatKind::Posit if x.negative => spec.negate_bits(mag),
                FormatKind::Fp4 if x.negative => mag | 0b1000,
                _ => mag,
            }
        }
    }
}

/// Convenience: round an `f64` into `spec`.
pub fn encode_f64(x: f64, spec: FormatSpec) -> u64 {
    encode(&ExactValue::from_f64(x), spec)
}

pub fn decode_f64(bits: u64, spec: FormatSpec) -> f64 {
    decode(bits, spec).to_f64()
}

fn encode_posit_magnitude(x: &Normalized, spec: FormatSpec) -> u64 {
    let maxpos = spec.maxpos_bits();
    let max_scale = spec.max_scale();
    if x.scale > max_scale {
        return maxpos;
    }
    if x.scale < -max_scale {
        return spec.minpos_bits();
    }
    let lo = truncated_posit_pattern(x, spec);
    let hi = (lo < maxpos).then_some(lo + 1);
    round_between(x, lo, hi, spec)
}

/// The top `n - 1` bits of the unbounded posit expansion of `x`, which is the
/// largest pattern not above `x`.
fn truncated_posit_pattern(x: &Normalized, spec: FormatSpec) -> u64 {
    let es = spec.es;
    let k = x.scale >> es;
    let e = (x.scale & ((1 << es) - 1)) as u128;

    let mut acc: u128 = 0;
    let mut len: u32 = 0;
    let mut push = |value: u128, width: u32| {
        acc = (acc << width) | value;
        len += width;
    };
    if k >= 0 {
        let ones = k as u32 + 1;
        push((1u128 << ones) - 1, ones);
        push(0, 1);
    } else {
        push(0, (-k) as u32);
        push(1, 1);
    }
    push(e, es);
    push((x.sig & !(1u64 << 63)) as u128, 63);

    let keep = spec.n - 1;
    (acc >> (len - keep)) as u64
}

fn encode_fp4_magnitude(x: &Normalized) -> u64 {
    if x.scale > 2 {
        return 0b0111;
    }
    let lo = match x.scale {
        s if s >= 0 => (((s + 1) as u64) << 1) | ((x.sig >> 62) & 1),
        -1 => 0b0001,
        _ => 0b0000,
    };
    let hi = (lo < 0b0111).then_some(lo + 1);
    round_between(x, lo, hi, FormatSpec::FP4)
}

/// Picks between the floor pattern `lo` and its successor `hi` by comparing
/// `|x|` with their exact midpoint.
fn round_between(x: &Normalized, lo: u64, hi: Option<u64>, spec: FormatSpec) -> u64 {
    let (lo_m, lo_e) = decode(lo, spec).dyadic();
    if compare_twice(x, 2 * lo_m as u128, lo_e) == Ordering::Equal {
        return lo;
    }
    let Some(hi) = hi else { return lo };
    let (hi_m, hi_e) = decode(hi, spec).dyadic();
    let lo_e = if lo_m == 0 { hi_e } else { lo_e };
    let base = lo_e.min(hi_e);
    let sum = ((lo_m as u128) << (lo_e - base)) + ((hi_m as u128) << (hi_e - base));
    match compare_twice(x, sum, base) {
        Ordering::Less => lo,
        Ordering::Greater => hi,
        Ordering::Equal => {
            if lo & 1 == 0 {
                lo
            } else {
                hi
            }
        }
    }
}

/// Compares `2|x|` with `target * 2^exp`.
fn compare_twice(x: &Normalized, target: u128, exp: i32) -> Ordering {
    // 2|x| = sig * 2^(scale - 62)
    let shift = (x.scale - 62) as i64 - exp as i64;
    let (value, tail) = if shift >= 0 {
        if shift >= 64 {
            return Ordering::Greater;
        }
        ((x.sig as u128) << shift, x.sticky)
    } else if shift <= -64 {
        (0, true)
    } else {
        let s = (-shift) as u32;
        let kept = (x.sig >> s) as u128;
        let rem = x.sig & ((1u64 << s) - 1);
        (kept, rem != 0 || x.sticky)
    };
    match value.cmp(&target) {
        Ordering::Equal if tail => Ordering::Greater,
        ord => ord,
    }
}

fn encode_real64(x: &Normalized) -> u64 {
    let sign = (x.negative as u64) << 63;
    if x.scale > 1023 {
        return sign | f64::INFINITY.to_bits();
    }
    let subnormal = x.scale < -1022;
    let shift: u32 = if subnormal {
        (11 + (-1022 - x.scale)) as u32
    } else {
        11
    };
    if shift > 64 {
        return sign;
    }
    let sig = x.sig as u128;
    let kept = sig >> shift;
    let rem = sig & ((1u128 << shift) - 1);
    let half = 1u128 << (shift - 1);
    let up = rem > half || (rem == half && (x.sticky || kept & 1 == 1));
    let mut kept = kept + up as u128;
    if subnormal {
        return sign | kept as u64;
    }
    let mut scale = x.scale;
    if kept == 1u128 << 53 {
        kept >>= 1;
        scale += 1;
        if scale > 1023 {
            return sign | f64::INFINITY.to_bits();
        }
    }
    sign | (((scale + 1023) as u64) << 52) | (kept as u64 & ((1u64 << 52) - 1))
}

/// Every pattern of a format with its decoded value. Posits are listed in
/// signed two's-complement order (NaR first); FP4 in pattern order.
pub fn enumerate(spec: FormatSpec) -> Result<Vec<(u64, DecodedNumber)>> {
    if spec.n > 16 {
        return Err(Error::InvalidArgument(format!(
            "cannot enumerate {}-bit format {}",
            spec.n, spec
        )));
    }
    let n = spec.n;
    let entries = match spec.kind {
        FormatKind::Posit => {
            let half = 1i64 << (n - 1);
            (-half..half)
                .map(|i| {
                    let bits = (i as u64) & spec.mask();
                    (bits, decode(bits, spec))
                })
                .collect()
        }
        _ => (0..1u64 << n).map(|b| (b, decode(b, spec))).collect(),
    };
    Ok(entries)
}

/// CSV conformance table: `bits,class,exact_value,float64_approx`.
pub fn conformance_csv(spec: FormatSpec) -> Result<String> {
    let digits = spec.n.div_ceil(4) as usize;
    let mut out = String::from("bits,class,exact_value,float64_approx\n");
    for (bits, d) in enumerate(spec)? {
        let approx = d.to_f64();
        let approx = if approx.is_nan() {
            "NaN".to_string()
        } else {
            format!("{approx:?}")
        };
        out.push_str(&format!(
            "0x{bits:0digits$x},{},{},{}\n",
            d.class.as_str(),
            d.rational_string(),
            approx
        ));
    }
    Ok(out)
}
