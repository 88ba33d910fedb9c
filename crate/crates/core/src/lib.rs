//! Bit-accurate software model of a mixed-precision SIMD neural processing
//! engine: FP4 / Posit(4,1) / Posit(8,0) / Posit(16,1) codecs, a composed
//! mantissa multiplier, exact quire accumulation, a morphable GEMM array, and
//! a layer-adaptive mixed-precision quantization pipeline.

pub mod checkpoint;
pub mod error;
pub mod formats;
pub mod mac;
pub mod morph_array;
pub mod nn;
pub mod quantizer;
pub mod rmmec;
pub mod tensor;

pub use error::{Error, Result};
pub use formats::{decode, encode, Class, DecodedNumber, ExactValue, FormatKind, FormatSpec};
pub use mac::{dot, LaneProduct, MacUnit, PrecSel, Quire, RoundingMode};
pub use morph_array::{gemm, traffic_model, ArrayConfig, RunStats};
pub use rmmec::{GatingStats, MulBlockArray, MulWidth};
pub use tensor::Tensor;
