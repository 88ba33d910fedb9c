//! Reference oracles for the integration suites. Nothing here calls into the
//! codec or the MAC engine: posit patterns are evaluated from their binary
//! string, FP4 from its table, and all arithmetic is exact rational.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use npe_core::FormatSpec;

pub type Q = BigRational;

pub fn pow2(e: i64) -> Q {
    let two = Q::from_integer(BigInt::from(2));
    if e >= 0 {
        num_traits::pow(two, e as usize)
    } else {
        Q::one() / num_traits::pow(two, (-e) as usize)
    }
}

/// Exact value of a pattern; `None` for NaR.
pub fn value(bits: u64, spec: FormatSpec) -> Option<Q> {
    match spec {
        FormatSpec::FP4 => Some(fp4_value(bits)),
        FormatSpec::POSIT4_1 | FormatSpec::POSIT8_0 | FormatSpec::POSIT16_1 => {
            posit_value(bits, spec.bits(), spec.es())
        }
        _ => panic!("no oracle for {spec}"),
    }
}

const FP4_TABLE: [(i64, i64); 8] = [(0, 1), (1, 2), (1, 1), (3, 2), (2, 1), (3, 1), (4, 1), (6, 1)];

pub fn fp4_value(bits: u64) -> Q {
    let (n, d) = FP4_TABLE[(bits & 7) as usize];
    let v = Q::new(BigInt::from(n), BigInt::from(d));
    if bits & 8 != 0 {
        -v
    } else {
        v
    }
}

pub fn posit_value(bits: u64, n: u32, es: u32) -> Option<Q> {
    let modulus = 1u64 << n;
    let bits = bits & (modulus - 1);
    if bits == 0 {
        return Some(Q::zero());
    }
    if bits == modulus / 2 {
        return None;
    }
    let negative = bits >= modulus / 2;
    let mag = if negative { modulus - bits } else { bits };
    let text = format!("{:0width$b}", mag, width = n as usize);
    let body: Vec<char> = text.chars().skip(1).collect();
    let first = body[0];
    let run = body.iter().take_while(|&&c| c == first).count();
    let k: i64 = if first == '1' { run as i64 - 1 } else { -(run as i64) };
    let rest: Vec<char> = body.iter().skip(run + 1).copied().collect();
    let mut exp_bits: String = rest.iter().take(es as usize).collect();
    while exp_bits.len() < es as usize {
        exp_bits.push('0');
    }
    let e = if es == 0 { 0 } else { i64::from_str_radix(&exp_bits, 2).unwrap() };
    let frac: String = rest.iter().skip(es as usize).collect();
    let fraction = if frac.is_empty() {
        Q::zero()
    } else {
        Q::new(
            BigInt::parse_bytes(frac.as_bytes(), 2).unwrap(),
            num_traits::pow(BigInt::from(2), frac.len()),
        )
    };
    let v = pow2(k * (1i64 << es) + e) * (Q::one() + fraction);
    Some(if negative { -v } else { v })
}

/// All non-NaR patterns sorted by value. Negative FP4 zero is left out; the
/// rounding oracle adds the sign of zero itself.
pub fn lattice(spec: FormatSpec) -> Vec<(Q, u64)> {
    let mut out: Vec<(Q, u64)> = (0..1u64 << spec.bits())
        .filter(|&b| !(spec == FormatSpec::FP4 && b == 0b1000))
        .filter_map(|b| value(b, spec).map(|v| (v, b)))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    for w in out.windows(2) {
        assert!(w[0].0 < w[1].0, "oracle lattice not strictly increasing");
    }
    out
}

/// Nearest lattice point, ties to the pattern with a clear low bit; posits
/// never round a nonzero value to zero.
pub fn round(x: &Q, spec: FormatSpec, lat: &[(Q, u64)]) -> u64 {
    let idx = lat.partition_point(|(v, _)| v <= x);
    let pick = if idx == 0 {
        lat[0].1
    } else if idx == lat.len() {
        lat[idx - 1].1
    } else {
        let (lo, lo_b) = &lat[idx - 1];
        let (hi, hi_b) = &lat[idx];
        if lo == x {
            *lo_b
        } else {
            let dl = x - lo;
            let dh = hi - x;
            match dl.cmp(&dh) {
                std::cmp::Ordering::Less => *lo_b,
                std::cmp::Ordering::Greater => *hi_b,
                std::cmp::Ordering::Equal => {
                    if lo_b & 1 == 0 {
                        *lo_b
                    } else {
                        *hi_b
                    }
                }
            }
        }
    };
    finish_zero(x, pick, spec)
}

/// Linear-scan version of [`round`] for the small formats.
pub fn round_brute(x: &Q, spec: FormatSpec, lat: &[(Q, u64)]) -> u64 {
    let mut best: Option<(Q, u64)> = None;
    for (v, b) in lat {
        let d = (x - v).abs();
        best = match best {
            None => Some((d, *b)),
            Some((bd, bb)) => {
                if d < bd || (d == bd && b & 1 == 0 && bb & 1 == 1) {
                    Some((d, *b))
                } else {
                    Some((bd, bb))
                }
            }
        };
    }
    finish_zero(x, best.unwrap().1, spec)
}

fn finish_zero(x: &Q, pick: u64, spec: FormatSpec) -> u64 {
    if pick != 0 || x.is_zero() {
        return pick;
    }
    match spec {
        FormatSpec::FP4 => {
            if x.is_negative() {
                0b1000
            } else {
                0
            }
        }
        _ => {
            if x.is_negative() {
                (1u64 << spec.bits()) - 1
            } else {
                1
            }
        }
    }
}

/// Exact dot of two element vectors, `None` when a NaR is involved.
pub fn dot(a: &[u64], b: &[u64], spec: FormatSpec) -> Option<Q> {
    let mut acc = Q::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += value(x, spec)? * value(y, spec)?;
    }
    Some(acc)
}

pub fn nar_bits(spec: FormatSpec) -> u64 {
    1u64 << (spec.bits() - 1)
}

/// Exact rational from an f64.
pub fn from_f64(x: f64) -> Q {
    Q::from_float(x).unwrap()
}
