mod common;

use common::{oracle_quantize, oracle_range_qparams};
use proptest::prelude::*;
use qlower::quantizer::{
    backend_preset, dequantize, fake_quantize, quantize, quantize_bias, snap_pot, Granularity, GraphPolicy, QParams,
    QScheme, ScaleForm, Signedness, Symmetry, PRESET_NAMES,
};
use qlower::Tensor;

fn range(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

fn qparams_strategy() -> impl Strategy<Value = (f32, i32, i32, i32)> {
    (2u8..=8, any::<bool>(), -4.0f32..1.0).prop_flat_map(|(bits, signed, e)| {
        let (qmin, qmax) = range(bits, signed);
        (Just(10f32.powf(e)), qmin..=qmax, Just(qmin), Just(qmax))
    })
}

proptest! {
    #[test]
    fn quantize_matches_scalar_oracle((s, z, qmin, qmax) in qparams_strategy(), x in -1e4f32..1e4) {
        let qp = QParams::per_tensor(s, z, qmin, qmax).unwrap();
        let q = quantize(&Tensor::from_vec(vec![x]), &qp, Granularity::PerTensor).unwrap();
        prop_assert_eq!(q.data()[0], oracle_quantize(x, s, z, qmin, qmax));
    }

    #[test]
    fn quantize_is_monotone((s, z, qmin, qmax) in qparams_strategy(), a in -100f32..100.0, b in -100f32..100.0) {
        let qp = QParams::per_tensor(s, z, qmin, qmax).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let q = quantize(&Tensor::from_vec(vec![lo, hi]), &qp, Granularity::PerTensor).unwrap();
        prop_assert!(q.data()[0] <= q.data()[1]);
        prop_assert!(q.data().iter().all(|&v| (qmin..=qmax).contains(&v)));
    }

    #[test]
    fn fake_quantize_is_idempotent((s, z, qmin, qmax) in qparams_strategy(), x in prop::collection::vec(-50f32..50.0, 1..32)) {
        let qp = QParams::per_tensor(s, z, qmin, qmax).unwrap();
        let once = fake_quantize(&Tensor::from_vec(x), &qp, Granularity::PerTensor).unwrap();
        let twice = fake_quantize(&once, &qp, Granularity::PerTensor).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&once), bits(&twice));
    }

    #[test]
    fn in_range_error_is_at_most_half_a_step((s, z, qmin, qmax) in qparams_strategy(), t in 0f32..1.0) {
        let lo = s * (qmin - z) as f32;
        let hi = s * (qmax - z) as f32;
        let x = lo + t * (hi - lo);
        let qp = QParams::per_tensor(s, z, qmin, qmax).unwrap();
        let q = quantize(&Tensor::from_vec(vec![x]), &qp, Granularity::PerTensor).unwrap();
        let back = dequantize(&q, &qp, Granularity::PerTensor).unwrap().data()[0];
        prop_assert!((back - x).abs() <= 0.5 * s * (1.0 + 1e-4) + 1e-6 * x.abs());
    }

    #[test]
    fn pot_snap_is_nearest_power_of_two(e in -20.0f64..10.0) {
        let s = 2f64.powf(e) as f32;
        let p = snap_pot(s).unwrap();
        let exp = f64::from(p).log2();
        prop_assert_eq!(exp, exp.round());
        // Within a factor of √2 either way.
        let ratio = f64::from(p) / f64::from(s);
        prop_assert!(ratio <= std::f64::consts::SQRT_2 * (1.0 + 1e-6));
        prop_assert!(ratio >= std::f64::consts::FRAC_1_SQRT_2 * (1.0 - 1e-6));
    }

    #[test]
    fn range_qparams_match_formula(lo in -20f32..5.0, span in 0.01f32..20.0, bits in 2u8..=8, sym in any::<bool>()) {
        let hi = lo + span;
        let (symmetry, signedness) = if sym {
            (Symmetry::Symmetric, Signedness::Signed)
        } else {
            (Symmetry::Asymmetric, Signedness::Unsigned)
        };
        let scheme = QScheme::new(bits, symmetry, Granularity::PerTensor, ScaleForm::Fp32, signedness).unwrap();
        let qp = QParams::from_range(&scheme, &[lo], &[hi]).unwrap();
        let (s, z) = oracle_range_qparams(sym, qp.qmin, qp.qmax, lo, hi);
        prop_assert!((qp.scale() - s).abs() <= 1e-6 * s);
        prop_assert_eq!(qp.zero_point(), z);
        // Zero is exactly representable.
        let zero = fake_quantize(&Tensor::from_vec(vec![0.0]), &qp, Granularity::PerTensor).unwrap();
        prop_assert_eq!(zero.data()[0], 0.0);
    }
}

#[test]
fn ties_round_to_even() {
    let qp = QParams::per_tensor(1.0, 0, -128, 127).unwrap();
    let x = Tensor::from_vec(vec![0.5, 1.5, 2.5, -0.5, -1.5, -2.5]);
    let q = quantize(&x, &qp, Granularity::PerTensor).unwrap();
    assert_eq!(q.data(), &[0, 2, 2, 0, -2, -2]);
}

#[test]
fn per_channel_uses_each_slice() {
    let qp = QParams::new(vec![1.0, 0.5], vec![0, 2], 0, 15, ScaleForm::Fp32).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
    let q = quantize(&x, &qp, Granularity::PerChannel { axis: 0 }).unwrap();
    assert_eq!(q.data(), &[1, 2, 3, 4, 6, 8]);
    let axis1 = Tensor::new(vec![3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
    let q = quantize(&axis1, &qp, Granularity::PerChannel { axis: 1 }).unwrap();
    assert_eq!(q.data(), &[1, 4, 2, 6, 3, 8]);
}

#[test]
fn pot_snap_examples() {
    assert_eq!(snap_pot(2.9).unwrap(), 4.0);
    assert_eq!(snap_pot(2.8).unwrap(), 2.0);
    assert_eq!(snap_pot(1.0).unwrap(), 1.0);
    assert_eq!(snap_pot(0.3).unwrap(), 0.25);
    assert!(snap_pot(0.0).is_err());
    assert!(snap_pot(f32::NAN).is_err());
}

#[test]
fn bias_uses_product_scale() {
    assert_eq!(quantize_bias(1.0, 0.5, 0.25), 8);
    assert_eq!(quantize_bias(-0.3, 0.1, 0.1), -30);
}

#[test]
fn invalid_qparams_are_rejected() {
    assert!(QParams::per_tensor(0.0, 0, -128, 127).is_err());
    assert!(QParams::per_tensor(-1.0, 0, -128, 127).is_err());
    assert!(QParams::per_tensor(1.0, 300, -128, 127).is_err());
    assert!(QParams::per_tensor(1.0, 0, 5, 5).is_err());
    assert!(QScheme::new(1, Symmetry::Symmetric, Granularity::PerTensor, ScaleForm::Fp32, Signedness::Signed).is_err());
}

#[test]
fn preset_table() {
    for name in PRESET_NAMES {
        let p = backend_preset(name).unwrap();
        assert_eq!(p.name, name);
        assert_eq!(p.weight.bits, 8);
        assert_eq!(p.activation.bits, 8);
        assert!(!p.activation.is_per_channel());
    }
    let trt = backend_preset("trt").unwrap();
    assert_eq!(trt.policy, GraphPolicy::Graph2);
    assert!(trt.weight.is_per_channel());
    assert_eq!(trt.weight.symmetry, Symmetry::Symmetric);
    let tvm = backend_preset("tvm").unwrap();
    assert_eq!(tvm.weight.scale_form, ScaleForm::Pot);
    assert_eq!(tvm.activation.scale_form, ScaleForm::Pot);
    assert_eq!(tvm.policy, GraphPolicy::Graph3);
    let academic = backend_preset("academic").unwrap();
    assert!(!academic.fold_bn);
    assert_eq!(academic.policy, GraphPolicy::Graph1);
    assert!(!academic.is_hardware());
    for name in ["snpe", "fbgemm"] {
        let p = backend_preset(name).unwrap();
        assert_eq!(p.policy, GraphPolicy::Graph3);
        assert_eq!(p.activation.symmetry, Symmetry::Asymmetric);
    }
    assert!(backend_preset("nope").is_err());
}

#[test]
fn bit_width_override() {
    let p = backend_preset("acl").unwrap().with_bits(4).unwrap();
    assert_eq!((p.weight.bits, p.activation.bits), (4, 4));
    assert!(backend_preset("acl").unwrap().with_bits(1).is_err());
}
