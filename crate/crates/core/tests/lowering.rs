use proptest::prelude::*;
use qlower::calibration::CalibConfig;
use qlower::graph::{fold_bn, infer, insert_fake_quant};
use qlower::lowering::{
    compare_fake_real, lower, requantize, requantize_scalar, run_int, Domain, QOp, QuantizedGraph, RequantRecord,
};
use qlower::models::{basic_block, concat_block, downsample_block, inverted_bottleneck, random_cnn, random_inputs};
use qlower::pipeline::Prepare;
use qlower::quantizer::backend_preset;
use qlower::{DType, Error, IntTensor};

fn lowered(preset: &str, seed: u64) -> (qlower::graph::Graph, QuantizedGraph, qlower::data::Dataset) {
    let g = random_cnn(seed).unwrap();
    let calib = random_inputs(seed + 1, &g, 2, 4);
    let q = Prepare::new(backend_preset(preset).unwrap()).calibrated(&g, &calib, &CalibConfig::default()).unwrap();
    let qg = lower(&q).unwrap();
    (q, qg, random_inputs(seed + 2, &g, 1, 4))
}

#[test]
fn program_json_round_trips() {
    for preset in ["trt", "tvm", "fbgemm"] {
        let (_, qg, data) = lowered(preset, 3);
        let bytes = qg.to_json();
        let back = QuantizedGraph::from_json(&bytes).unwrap();
        assert_eq!(back, qg);
        assert_eq!(back.to_json(), bytes);
        let x = data.batches[0].input.clone();
        assert_eq!(run_int(&back, std::slice::from_ref(&x)).unwrap(), run_int(&qg, &[x]).unwrap());
    }
}

#[test]
fn program_schema_errors() {
    assert!(QuantizedGraph::from_json(b"{}").is_err());
    let (_, qg, _) = lowered("trt", 1);
    let mut v: serde_json::Value = serde_json::from_slice(&qg.to_json()).unwrap();
    v["nodes"][0]["domain"] = serde_json::json!("complex");
    assert!(QuantizedGraph::from_json(&serde_json::to_vec(&v).unwrap()).is_err());
}

#[test]
fn pot_presets_store_shifts() {
    let (_, qg, _) = lowered("tvm", 5);
    let records: Vec<&RequantRecord> = qg
        .nodes
        .iter()
        .filter_map(|n| match &n.op {
            QOp::Requantize(r) => Some(r),
            _ => None,
        })
        .collect();
    assert!(records.iter().any(|r| r.shifts.is_some()));
    // Pooling divides by the window size, so not every multiplier is a power of two.
    for r in records {
        let pot = r.multipliers.iter().all(|m| m.log2().fract() == 0.0);
        assert_eq!(r.shifts.is_some(), pot, "{r:?}");
    }
}

#[test]
fn shared_policies_end_on_a_lattice() {
    // graph1 (acl) leaves graph outputs unquantized.
    for preset in ["trt", "tvm", "snpe", "fbgemm"] {
        let (_, qg, data) = lowered(preset, 8);
        let out = run_int(&qg, &[data.batches[0].input.clone()]).unwrap();
        for o in &out {
            assert!(matches!(o.domain, Domain::Int { .. }), "{preset}: output {}", o.id);
        }
    }
}

#[test]
fn fixtures_stay_within_one_level() {
    let fixtures = [
        basic_block(1, 4).unwrap(),
        downsample_block(2, 4, 8).unwrap(),
        inverted_bottleneck(3, 4, 2).unwrap(),
        concat_block(4, 4).unwrap(),
    ];
    for preset in ["trt", "acl", "tvm", "snpe", "fbgemm"] {
        for g in &fixtures {
            let q = Prepare::new(backend_preset(preset).unwrap())
                .calibrated(g, &random_inputs(10, g, 3, 4), &CalibConfig::default())
                .unwrap();
            let qg = lower(&q).unwrap();
            let r = compare_fake_real(&q, &qg, &random_inputs(20, g, 2, 4)).unwrap();
            assert!(r.final_.max_level_diff <= 1, "{preset}: {:?}", r.final_);
            assert!(r.final_.cosine > 0.99, "{preset}: {:?}", r.final_);
        }
    }
}

#[test]
fn uncalibrated_graph_cannot_be_lowered() {
    let g = fold_bn(&basic_block(1, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant(&g, &backend_preset("trt").unwrap()).unwrap();
    let e = lower(&fq).unwrap_err();
    assert!(matches!(e, Error::CalibrationRequired(_)));
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn unfolded_bn_cannot_be_lowered() {
    let g = basic_block(1, 4).unwrap();
    let q = Prepare::new(backend_preset("academic").unwrap())
        .calibrated(&g, &random_inputs(1, &g, 1, 2), &CalibConfig::default())
        .unwrap();
    assert!(matches!(lower(&q), Err(Error::UnfoldedBatchNorm(_))));
}

#[test]
fn comparing_against_another_graph_fails() {
    let (_, qg, data) = lowered("trt", 1);
    let other = Prepare::new(backend_preset("trt").unwrap())
        .calibrated(&basic_block(1, 3).unwrap(), &random_inputs(1, &basic_block(1, 3).unwrap(), 1, 2), &CalibConfig::default())
        .unwrap();
    assert!(matches!(compare_fake_real(&other, &qg, &data), Err(Error::TopologyMismatch(_))));
    let fp32 = random_cnn(1).unwrap();
    assert!(matches!(compare_fake_real(&fp32, &qg, &data), Err(Error::TopologyMismatch(_))));
}

#[test]
fn integer_run_tracks_fake_quant() {
    let (q, qg, data) = lowered("snpe", 4);
    let x = data.batches[0].input.clone();
    let fake = infer(&q, std::slice::from_ref(&x)).unwrap();
    let real = run_int(&qg, &[x]).unwrap();
    let a = &fake[0];
    let b = &real[0].dequantized;
    assert_eq!(a.shape(), b.shape());
    let amax = a.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    // At most one output step apart.
    assert!(worst <= amax / 10.0, "worst {worst} of {amax}");
}

proptest! {
    #[test]
    fn requantize_is_monotone(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000, m in 1e-6f64..1.0, z in -128i32..128) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(requantize_scalar(lo, m, z, -128, 127) <= requantize_scalar(hi, m, z, -128, 127));
    }

    #[test]
    fn shift_path_matches_multiplier_path(v in -(1i32 << 24)..(1i32 << 24), k in 1i32..20, z in -10i32..10) {
        let m = 2f64.powi(-k);
        let base = RequantRecord {
            input_scales: vec![m],
            input_zero_point: 0,
            output_scale: 1.0,
            output_zero_point: z,
            qmin: -128,
            qmax: 127,
            multipliers: vec![m],
            shifts: None,
        };
        let shifted = RequantRecord { shifts: Some(vec![k]), ..base.clone() };
        let t = IntTensor::new(vec![1], DType::I32Range, vec![v]).unwrap();
        prop_assert_eq!(requantize(&t, &base).unwrap(), requantize(&t, &shifted).unwrap());
    }

    #[test]
    fn requantize_scalar_matches_float_oracle(acc in -100_000i64..100_000, m in 1e-5f64..0.1, z in -5i32..5) {
        let want = ((m * acc as f64).round_ties_even() + f64::from(z)).clamp(-128.0, 127.0) as i32;
        prop_assert_eq!(requantize_scalar(acc, m, z, -128, 127), want);
    }
}
