use npe_core::quantizer::{
    assign_precisions, code_entropy, demotion_order, fake_quantize, model_size_bytes, quantize, quantize_to_format,
    sensitivity_report, tensor_scale, LayerInfo, LayerTensor, PrecisionMap, QuantConfig, SensitivityMethod,
    SensitivityOptions, Thresholds,
};
use npe_core::{Error, FormatSpec};
use proptest::prelude::*;

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..200)
}

proptest! {
    #[test]
    fn codes_are_monotone_in_the_input(w in weights(), n in 2u32..=8) {
        let cfg = QuantConfig::fit(&w, n, Thresholds::default()).unwrap();
        let codes = quantize(&w, &cfg).unwrap();
        for i in 0..w.len() {
            for j in 0..w.len() {
                if w[i] <= w[j] {
                    prop_assert!(codes[i] <= codes[j]);
                }
            }
        }
        prop_assert!(codes.iter().all(|&c| c <= cfg.max_code()));
    }

    #[test]
    fn fake_quantization_is_idempotent(w in weights(), n in 2u32..=8) {
        let cfg = QuantConfig::fit(&w, n, Thresholds::default()).unwrap();
        let once = fake_quantize(&w, &cfg).unwrap();
        let twice = fake_quantize(&once, &cfg).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn format_rounding_is_idempotent(w in weights()) {
        for f in FormatSpec::ENGINE {
            let once = quantize_to_format(&w, f);
            prop_assert_eq!(quantize_to_format(&once, f), once.clone());
        }
    }

    #[test]
    fn tensor_scale_is_a_power_of_two(w in weights()) {
        for f in FormatSpec::ENGINE {
            let s = tensor_scale(&w, f);
            prop_assert!(s > 0.0 && s.log2().fract() == 0.0);
        }
    }
}

#[test]
fn entropy_of_uniform_codes() {
    assert_eq!(code_entropy(&[0, 1, 2, 3]), 2.0);
    assert_eq!(code_entropy(&[5, 5, 5]), 0.0);
    assert_eq!(code_entropy(&[]), 0.0);
}

#[test]
fn zero_tensors_stay_zero() {
    let cfg = QuantConfig::fit(&[0.0; 6], 4, Thresholds::default()).unwrap();
    assert!(cfg.is_degenerate());
    assert_eq!(fake_quantize(&[0.0; 6], &cfg).unwrap(), vec![0.0; 6]);
}

fn scores() -> Vec<(String, usize, f64)> {
    vec![
        ("a".into(), 100, 0.5),
        ("b".into(), 300, -0.01),
        ("c".into(), 200, 0.2),
        ("d".into(), 400, 0.01),
    ]
}

#[test]
fn demotion_is_by_magnitude_then_id() {
    assert_eq!(demotion_order(&scores()), vec!["b", "d", "c", "a"]);
}

#[test]
fn budget_of_sixteen_keeps_everything_wide() {
    let map = assign_precisions(&scores(), 16.0, FormatSpec::FP4).unwrap();
    assert!(map.layers.iter().all(|l| l.weights == FormatSpec::POSIT16_1));
}

#[test]
fn budget_of_four_demotes_everything() {
    let map = assign_precisions(&scores(), 4.0, FormatSpec::POSIT4_1).unwrap();
    assert!(map.layers.iter().all(|l| l.weights == FormatSpec::POSIT4_1));
}

#[test]
fn budget_below_four_is_infeasible() {
    assert!(matches!(assign_precisions(&scores(), 3.99, FormatSpec::FP4), Err(Error::InfeasibleBudget(_))));
}

#[test]
fn assignment_respects_budget_for_every_budget() {
    let layers: Vec<LayerInfo> = scores()
        .into_iter()
        .map(|(id, params, _)| LayerInfo { layer_id: id, params })
        .collect();
    let mut b = 4.0;
    while b <= 16.0 {
        let map = assign_precisions(&scores(), b, FormatSpec::FP4).unwrap();
        let size = model_size_bytes(&layers, &map).unwrap();
        assert!(size.avg_bits.value <= b, "budget {b}: {}", size.avg_bits.value);
        b += 0.25;
    }
}

#[test]
fn sensitivity_report_ranks_and_requires_gradients() {
    let l1 = LayerTensor::new("l1", vec![0.3, -0.2, 0.9, -1.1], Some(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
    let l2 = LayerTensor::new("l2", vec![0.01, -0.02, 0.03, 0.5], Some(vec![0.0, 0.0, 0.0, 0.1])).unwrap();
    let map = PrecisionMap::preset("all_posit16", &["l1", "l2"]).unwrap();
    for method in [SensitivityMethod::Uniform, SensitivityMethod::Lattice] {
        let opts = SensitivityOptions { method, ..Default::default() };
        let r = sensitivity_report(&[l1.clone(), l2.clone()], &map, &opts).unwrap();
        assert_eq!(r.layers.len(), 2);
        assert_eq!(r.ranking.len(), 2);
        assert_eq!(r.layers[0].s_l.value, r.layers[0].s8.value.max(r.layers[0].s4.value));
    }
    let bare = LayerTensor::new("l1", vec![1.0], None).unwrap();
    let err = sensitivity_report(&[bare], &PrecisionMap::preset("all_fp32", &["l1"]).unwrap(), &Default::default());
    assert!(matches!(err, Err(Error::MissingGradient(_))));
}

#[test]
fn incomplete_maps_are_rejected() {
    let map = PrecisionMap::preset("all_posit8", &["a"]).unwrap();
    let layers = vec![
        LayerInfo { layer_id: "a".into(), params: 1 },
        LayerInfo { layer_id: "b".into(), params: 1 },
    ];
    assert!(matches!(model_size_bytes(&layers, &map), Err(Error::IncompleteMap(_))));
}
