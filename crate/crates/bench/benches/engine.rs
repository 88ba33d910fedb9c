use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use npe_bench::{gemm_operands, packed_vector, FORMATS};
use npe_core::formats::{decode_f64, encode_f64};
use npe_core::{dot, gemm, ArrayConfig, MulBlockArray, MulWidth, PrecSel, RoundingMode};

fn codec(c: &mut Criterion) {
    let xs: Vec<f64> = (0..1024).map(|i| (i as f64 - 512.0) * 0.0137).collect();
    let mut g = c.benchmark_group("codec");
    g.throughput(Throughput::Elements(xs.len() as u64));
    for f in FORMATS {
        g.bench_with_input(BenchmarkId::new("encode", f), &f, |b, &f| {
            b.iter(|| xs.iter().map(|&x| encode_f64(x, f)).fold(0, u64::wrapping_add))
        });
        let bits: Vec<u64> = xs.iter().map(|&x| encode_f64(x, f)).collect();
        g.bench_with_input(BenchmarkId::new("decode", f), &f, |b, &f| {
            b.iter(|| bits.iter().map(|&x| decode_f64(x, f)).sum::<f64>())
        });
    }
    g.finish();
}

fn composed_mul(c: &mut Criterion) {
    let mut g = c.benchmark_group("composed_mul");
    for w in [MulWidth::W2, MulWidth::W6, MulWidth::W12] {
        let max = (1u32 << w.bits()) - 1;
        g.bench_function(format!("{}bit", w.bits()), |b| {
            let mut arr = MulBlockArray::new(w);
            b.iter(|| arr.composed_mul(black_box(max), black_box(max / 3)))
        });
    }
    g.finish();
}

fn dot_product(c: &mut Criterion) {
    let mut g = c.benchmark_group("dot");
    for sel in PrecSel::ALL {
        let a = packed_vector(sel, 256, 1);
        let v = packed_vector(sel, 256, 2);
        g.throughput(Throughput::Elements((256 * sel.lanes()) as u64));
        for rounding in [RoundingMode::Fused, RoundingMode::PerMac] {
            g.bench_function(format!("{}/{rounding:?}", sel.name()), |b| {
                b.iter(|| dot(&a, &v, sel, rounding).unwrap())
            });
        }
    }
    g.finish();
}

fn gemm_array(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    g.sample_size(20);
    for sel in PrecSel::ALL {
        for size in [8, 16] {
            let (a, b) = gemm_operands(sel, 32, 3);
            let cfg = ArrayConfig::new(size, sel).unwrap();
            g.throughput(Throughput::Elements(32 * 32 * 32));
            g.bench_function(format!("{}/array{size}", sel.name()), |bench| bench.iter(|| gemm(&a, &b, &cfg).unwrap()));
        }
    }
    g.finish();
}

criterion_group!(benches, codec, composed_mul, dot_product, gemm_array);
criterion_main!(benches);
