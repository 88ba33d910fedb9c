//! Criterion benchmarks for the codec, the multiplier array, the MAC unit
//! and the morphable array. Run with `cargo bench -p npe-bench`.

use npe_core::{FormatSpec, PrecSel, Tensor};

/// Square operands for a `size`-wide GEMM in the mode's format.
pub fn gemm_operands(sel: PrecSel, size: usize, seed: u64) -> (Tensor, Tensor) {
    let f = sel.format();
    (
        Tensor::random(f, vec![size, size], seed, false),
        Tensor::random(f, vec![size, size], seed + 1, false),
    )
}

/// `len` packed SIMD words for a dot product.
pub fn packed_vector(sel: PrecSel, len: usize, seed: u64) -> Vec<u16> {
    let t = Tensor::random(sel.format(), vec![len * sel.lanes()], seed, false);
    t.data().chunks(sel.lanes()).map(|c| sel.pack(c)).collect()
}

pub const FORMATS: [FormatSpec; 4] = FormatSpec::ENGINE;
