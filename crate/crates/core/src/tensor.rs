//! Format-tagged tensors and the XTEN container.
//!
//! XTEN layout, all integers little-endian:
//!
//! ```text
//! magic   "XTEN"            4 bytes
//! version u16               currently 1
//! dtype   u8                0=real64 1=posit16_1 2=posit8_0 3=posit4_1 4=fp4
//! rank    u8
//! dims    rank x u32
//! payload ceil(prod(dims) * element_bits / 8) bytes
//! ```
//!
//! Elements are packed little-endian; 4-bit elements go two per byte, low
//! nibble first, with a zero pad nibble when the count is odd.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::{decode, encode_f64, FormatKind, FormatSpec};

pub const XTEN_MAGIC: &[u8; 4] = b"XTEN";
pub const XTEN_VERSION: u16 = 1;

/// Row-major tensor of raw element bit patterns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tensor {
    format: FormatSpec,
    shape: Vec<usize>,
    data: Vec<u64>,
}

impl Tensor {
    pub fn new(format: FormatSpec, shape: Vec<usize>, data: Vec<u64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(bad) = data.iter().find(|&&d| d & !format.mask() != 0) {
            return Err(Error::InvalidArgument(format!(
                "element {bad:#x} does not fit {format}"
            )));
        }
        Ok(Tensor { format, shape, data })
    }

    pub fn zeros(format: FormatSpec, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { format, shape, data: vec![format.zero_bits(); len] }
    }

    /// Rounds every value into `format`.
    pub fn from_f64(format: FormatSpec, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(format, shape, values.iter().map(|&v| encode_f64(v, format)).collect())
    }

    pub fn identity(format: FormatSpec, n: usize) -> Self {
        let one = encode_f64(1.0, format);
        let mut t = Self::zeros(format, vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = one;
        }
        t
    }

    /// Uniformly random patterns from a seeded ChaCha8 stream; posit NaR is
    /// re-drawn unless `allow_nar`.
    pub fn random(format: FormatSpec, shape: Vec<usize>, seed: u64, allow_nar: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len: usize = shape.iter().product();
        let nar = format.nar_bits();
        let data = (0..len)
            .map(|_| loop {
                let b = rng.random::<u64>() & format.mask();
                if allow_nar || Some(b) != nar || format.kind() != FormatKind::Posit {
                    break b;
                }
            })
            .collect();
        Tensor { format, shape, data }
    }

    pub fn format(&self) -> FormatSpec {
        self.format
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| decode(b, self.format).to_f64()).collect()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::ShapeMismatch(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_xten(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + self.payload_len());
        out.extend_from_slice(XTEN_MAGIC);
        out.extend_from_slice(&XTEN_VERSION.to_le_bytes());
        out.push(self.format.dtype_code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let bits = self.format.bits();
        if bits == 4 {
            for pair in self.data.chunks(2) {
                let lo = pair[0] as u8 & 0xF;
                let hi = pair.get(1).map_or(0, |&h| h as u8 & 0xF);
                out.push(lo | (hi << 4));
            }
        } else {
            let nbytes = (bits / 8) as usize;
            for &d in &self.data {
                out.extend_from_slice(&d.to_le_bytes()[..nbytes]);
            }
        }
        out
    }

    fn payload_len(&self) -> usize {
        (self.data.len() * self.format.bits() as usize).div_ceil(8)
    }

    pub fn from_xten(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        if bytes.len() < 8 {
            return Err(corrupt("truncated header"));
        }
        if &bytes[..4] != XTEN_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != XTEN_VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let format = FormatSpec::from_dtype_code(bytes[6])
            .ok_or_else(|| Error::Corrupt(format!("unknown dtype {}", bytes[6])))?;
        let rank = bytes[7] as usize;
        let dims_end = 8 + 4 * rank;
        if bytes.len() < dims_end {
            return Err(corrupt("truncated dims"));
        }
        let shape: Vec<usize> = bytes[8..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let count: usize = shape.iter().product();
        let bits = format.bits() as usize;
        let payload = &bytes[dims_end..];
        if payload.len() != (count * bits).div_ceil(8) {
            return Err(Error::Corrupt(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                (count * bits).div_ceil(8)
            )));
        }
        let data: Vec<u64> = if bits == 4 {
            if count % 2 == 1 && payload[payload.len() - 1] >> 4 != 0 {
                return Err(corrupt("nonzero pad nibble"));
            }
            (0..count)
                .map(|i| ((payload[i / 2] >> (4 * (i % 2))) & 0xF) as u64)
                .collect()
        } else {
            payload
                .chunks_exact(bits / 8)
                .map(|c| {
                    let mut buf = [0u8; 8];
                    buf[..c.len()].copy_from_slice(c);
                    u64::from_le_bytes(buf)
                })
                .collect()
        };
        Tensor::new(format, shape, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_xten(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_xten())?;
        Ok(())
    }
}
