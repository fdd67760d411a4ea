use proptest::prelude::*;
use qlower::graph::policy::{is_quantized_value, quantizer_groups};
use qlower::graph::{
    apply_qparams, collect_qparams, fold_bn, infer, insert_fake_quant, insert_fake_quant_with, load_model, load_qparams,
    save_model, save_qparams, scan_policy, to_inference_form, FqRole, Op,
};
use qlower::calibration::{calibrate_graph, CalibConfig};
use qlower::models::{
    basic_block, concat_block, downsample_block, inverted_bottleneck, random_cnn, random_conv_bn_stack, random_inputs,
    toy_cnn, ConvSpec, GraphBuilder,
};
use qlower::quantizer::{backend_preset, GraphPolicy};
use qlower::{Error, Tensor};

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn model_json_round_trips() {
    for g in [basic_block(1, 4).unwrap(), random_cnn(7).unwrap(), toy_cnn(0, 4).unwrap()] {
        let bytes = save_model(&g);
        let back = load_model(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(save_model(&back), bytes);
    }
}

#[test]
fn quantized_model_round_trips_with_shared_params() {
    let g = fold_bn(&concat_block(2, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant(&g, &backend_preset("trt").unwrap()).unwrap();
    let cal = calibrate_graph(&fq, &random_inputs(1, &g, 2, 2), &CalibConfig::default()).unwrap();
    let back = load_model(&save_model(&cal)).unwrap();
    assert_eq!(collect_qparams(&back), collect_qparams(&cal));
    assert_eq!(quantizer_groups(&back), quantizer_groups(&cal));
}

#[test]
fn malformed_models_report_a_path() {
    let cases: [&[u8]; 4] = [
        b"not json",
        br#"{"version": 1, "inputs": [], "outputs": [], "nodes": [], "extra": 1}"#,
        br#"{"version": 1, "inputs": ["x"], "outputs": ["y"], "nodes": [{"id": "x", "op": "input"}, {"id": "y", "op": "conv2d", "attrs": {"weight": "w"}, "inputs": ["x"]}]}"#,
        br#"{"version": 1, "inputs": ["x"], "outputs": ["y"], "nodes": [{"id": "x", "op": "input"}, {"id": "y", "op": "warp", "inputs": ["x"]}]}"#,
    ];
    for bytes in cases {
        let e = load_model(bytes).unwrap_err();
        assert_ne!(e.exit_code(), 0, "{e}");
    }
    let dangling = br#"{"version": 1, "inputs": ["x"], "outputs": ["y"], "nodes": [{"id": "x", "op": "input"}, {"id": "y", "op": "relu", "inputs": ["z"]}]}"#;
    assert!(matches!(load_model(dangling), Err(Error::DanglingReference { .. })));
}

#[test]
fn fold_preserves_inference() {
    for seed in 0..10 {
        let g = random_conv_bn_stack(seed, 2).unwrap();
        let x = random_inputs(seed, &g, 1, 2).batches.remove(0).input;
        let y = infer(&g, std::slice::from_ref(&x)).unwrap();
        let folded = fold_bn(&g, 0).unwrap();
        assert!(!folded.nodes.iter().any(|n| matches!(n.op, Op::Bn(_))));
        let yf = infer(&folded, &[x]).unwrap();
        let scale = y[0].data().iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(max_abs_diff(&y[0], &yf[0]) <= 1e-5 * scale.max(1.0));
    }
}

#[test]
fn training_strategies_keep_bn_statistics() {
    let g = random_conv_bn_stack(3, 1).unwrap();
    for s in 1..=4 {
        let f = fold_bn(&g, s).unwrap();
        let fused = f.nodes.iter().filter_map(|n| n.op.layer()).filter(|a| a.bn.is_some()).count();
        assert_eq!(fused, 1, "strategy {s}");
        let inf = to_inference_form(&f).unwrap();
        assert!(inf.nodes.iter().filter_map(|n| n.op.layer()).all(|a| a.bn.is_none()));
    }
    assert!(fold_bn(&g, 5).is_err());
}

#[test]
fn bn_without_conv_is_rejected() {
    let mut b = GraphBuilder::new(0);
    let x = b.input("x", &[1, 2, 4, 4]);
    let r = b.relu("r", &x);
    let n = b.bn("bn", &r, 2);
    let g = b.finish(&[&n]).unwrap();
    assert!(matches!(fold_bn(&g, 0), Err(Error::BatchNormWithoutConv(_))));
}

#[test]
fn policies_pass_their_own_scan() {
    let fixtures = [
        basic_block(1, 4).unwrap(),
        downsample_block(2, 4, 8).unwrap(),
        inverted_bottleneck(3, 4, 2).unwrap(),
        concat_block(4, 4).unwrap(),
    ];
    let preset = backend_preset("snpe").unwrap();
    for g in &fixtures {
        let g = fold_bn(g, 0).unwrap();
        for policy in [GraphPolicy::Graph1, GraphPolicy::Graph2, GraphPolicy::Graph3] {
            let fq = insert_fake_quant_with(&g, &preset, policy).unwrap();
            let scan = scan_policy(&fq, policy).unwrap();
            let layers = g.nodes.iter().filter(|n| n.op.is_layer()).count();
            assert_eq!(scan.weight_quantizers, layers);
            for (_, q) in &scan.adds {
                let want = match policy {
                    GraphPolicy::Graph1 => 0,
                    GraphPolicy::Graph2 => 1,
                    GraphPolicy::Graph3 => 2,
                };
                assert_eq!(*q, want);
            }
        }
    }
}

#[test]
fn scan_rejects_a_foreign_policy() {
    let g = fold_bn(&basic_block(1, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant_with(&g, &backend_preset("tvm").unwrap(), GraphPolicy::Graph3).unwrap();
    assert!(matches!(scan_policy(&fq, GraphPolicy::Graph1), Err(Error::PolicyMismatch(_))));
    assert!(matches!(scan_policy(&fq, GraphPolicy::Graph2), Err(Error::PolicyMismatch(_))));
}

#[test]
fn double_insertion_is_rejected() {
    let g = fold_bn(&basic_block(1, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant(&g, &backend_preset("acl").unwrap()).unwrap();
    assert!(matches!(insert_fake_quant(&fq, &backend_preset("acl").unwrap()), Err(Error::AlreadyQuantized)));
}

#[test]
fn graph3_quantizes_outputs_and_add_inputs() {
    let g = fold_bn(&basic_block(1, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant_with(&g, &backend_preset("fbgemm").unwrap(), GraphPolicy::Graph3).unwrap();
    for o in &fq.outputs {
        assert!(is_quantized_value(&fq, o), "output {o}");
    }
    let acts = fq.fake_quant_nodes().filter(|(_, a)| a.role == FqRole::Activation).count();
    assert!(acts >= 3);
}

#[test]
fn concat_inputs_share_one_group() {
    let g = fold_bn(&concat_block(4, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant(&g, &backend_preset("trt").unwrap()).unwrap();
    let cal = calibrate_graph(&fq, &random_inputs(1, &g, 2, 2), &CalibConfig::default()).unwrap();
    let cat = cal.nodes.iter().find(|n| matches!(n.op, Op::Concat { .. })).unwrap();
    let arcs: Vec<_> = cat
        .inputs
        .iter()
        .map(|i| cal.node(i).unwrap().op.fake_quant().unwrap().qparams.clone().unwrap())
        .collect();
    assert!(arcs.windows(2).all(|w| std::sync::Arc::ptr_eq(&w[0], &w[1])));
}

#[test]
fn qparams_sidecar_round_trips() {
    let g = fold_bn(&basic_block(1, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant(&g, &backend_preset("trt").unwrap()).unwrap();
    let cal = calibrate_graph(&fq, &random_inputs(1, &g, 2, 2), &CalibConfig::default()).unwrap();
    let table = collect_qparams(&cal);
    let bytes = save_qparams(&table);
    assert_eq!(load_qparams(&bytes).unwrap(), table);
    let mut fresh = fq.clone();
    apply_qparams(&mut fresh, &table).unwrap();
    assert_eq!(collect_qparams(&fresh), table);
    let x = random_inputs(5, &g, 1, 2).batches.remove(0).input;
    assert_eq!(infer(&fresh, std::slice::from_ref(&x)).unwrap(), infer(&cal, &[x]).unwrap());
}

#[test]
fn uncalibrated_inference_names_the_quantizers() {
    let g = fold_bn(&basic_block(1, 4).unwrap(), 0).unwrap();
    let fq = insert_fake_quant(&g, &backend_preset("trt").unwrap()).unwrap();
    let x = random_inputs(5, &g, 1, 2).batches.remove(0).input;
    match infer(&fq, &[x]) {
        Err(Error::CalibrationRequired(ids)) => assert!(!ids.is_empty()),
        other => panic!("expected CalibrationRequired, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_layer_gets_a_weight_quantizer(seed in 0u64..1000) {
        let g = fold_bn(&random_cnn(seed).unwrap(), 0).unwrap();
        for name in ["trt", "tvm", "fbgemm"] {
            let preset = backend_preset(name).unwrap();
            let fq = insert_fake_quant(&g, &preset).unwrap();
            scan_policy(&fq, preset.policy).unwrap();
            for n in fq.nodes.iter().filter(|n| n.op.is_layer()) {
                let (_, a) = fq.weight_quant(n).expect("weight quantizer");
                prop_assert_eq!(a.role, FqRole::Weight);
                prop_assert!(is_quantized_value(&fq, fq.layer_input(n)));
            }
        }
    }

    #[test]
    fn grouped_conv_folds_exactly(seed in 0u64..1000, groups in prop::sample::select(vec![1usize, 2, 4])) {
        let mut b = GraphBuilder::new(seed);
        let x = b.input("x", &[1, 4, 5, 5]);
        let c = b.conv("c", &x, ConvSpec::new(4, 4, 3).groups(groups).bias());
        let n = b.bn("bn", &c, 4);
        let g = b.finish(&[&n]).unwrap();
        let x = random_inputs(seed, &g, 1, 1).batches.remove(0).input;
        let y = infer(&g, std::slice::from_ref(&x)).unwrap();
        let yf = infer(&fold_bn(&g, 0).unwrap(), &[x]).unwrap();
        let scale = y[0].data().iter().fold(1f32, |m, v| m.max(v.abs()));
        prop_assert!(max_abs_diff(&y[0], &yf[0]) <= 1e-5 * scale);
    }
}
