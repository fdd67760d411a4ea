mod common;

use std::path::Path;

use common::*;
use qlower::data::Dataset;
use qlower::graph::load_qparams;
use qlower::lowering::QuantizedGraph;
use qlower::models::{basic_block, random_inputs, synthetic_dataset, toy_cnn, ConvSpec, GraphBuilder};

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn one_conv() -> qlower::graph::Graph {
    let mut b = GraphBuilder::new(3);
    let x = b.input("x", &[1, 2, 6, 6]);
    let c = b.conv("conv", &x, ConvSpec::new(2, 3, 3).bias());
    b.finish(&[&c]).unwrap()
}

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minmax_on_one_conv_writes_two_entries() {
    let dir = tempfile::tempdir().unwrap();
    let g = one_conv();
    let model = write_model(dir.path(), "m.json", &g);
    let data = write_dataset(dir.path(), "d", &random_inputs(1, &g, 2, 2));
    let out = dir.path().join("q.json");
    let o = qlower(["calibrate", "--model", &s(&model), "--data", &s(&data), "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = load_qparams(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(table.len(), 2, "{:?}", table.keys());
}

#[test]
fn tvm_scales_are_powers_of_two() {
    let dir = tempfile::tempdir().unwrap();
    let g = basic_block(2, 4).unwrap();
    let model = write_model(dir.path(), "m.json", &g);
    let data = write_dataset(dir.path(), "d", &random_inputs(1, &g, 2, 2));
    let out = dir.path().join("q.json");
    let o = qlower(["calibrate", "--model", &s(&model), "--data", &s(&data), "--preset", "tvm", "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = load_qparams(&std::fs::read(&out).unwrap()).unwrap();
    for (id, qp) in &table {
        for &sc in &qp.scales {
            let e = f64::from(sc).log2();
            assert_eq!(e, e.round(), "{id}: scale {sc}");
        }
    }
}

#[test]
fn full_pipeline_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = basic_block(2, 4).unwrap();
    let model = write_model(d, "m.json", &g);
    let data = write_dataset(d, "d", &random_inputs(1, &g, 2, 2));
    let qp = d.join("q.json");
    let prog = d.join("p.json");
    let ok = |args: &[&str]| {
        let o = qlower(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["calibrate", "--model", &s(&model), "--data", &s(&data), "--preset", "trt", "--act-calib", "kld", "--out", &s(&qp)]);
    ok(&["quantize", "--model", &s(&model), "--qparams", &s(&qp), "--preset", "trt", "--out", &s(&prog)]);
    QuantizedGraph::from_json(&std::fs::read(&prog).unwrap()).unwrap();

    let run = ok(&["run", "--model", &s(&prog), "--data", &s(&data)]);
    let report: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["mode"], "integer");
    assert!(report["batches"][0][0]["levels"].is_array());

    let fake = ok(&["run", "--model", &s(&model), "--qparams", &s(&qp), "--preset", "trt", "--data", &s(&data)]);
    assert_ne!(serde_json::from_slice::<serde_json::Value>(&fake.stdout).unwrap()["mode"], "integer");

    let cmp = ok(&["compare", "--model", &s(&model), "--qparams", &s(&qp), "--preset", "trt", "--data", &s(&data)]);
    let report: serde_json::Value = serde_json::from_slice(&cmp.stdout).unwrap();
    assert!(report["final"]["max_level_diff"].as_i64().unwrap() <= 1);

    // A threshold that cannot be met exits with 6.
    let strict = d.join("strict.json");
    std::fs::write(&strict, r#"{"min_cosine": 1.5}"#).unwrap();
    let o = qlower(["compare", "--model", &s(&model), "--qparams", &s(&qp), "--preset", "trt", "--data", &s(&data), "--config", &s(&strict)]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = qlower(["calibrate", "--data", "/nonexistent"]);
    assert_eq!(code(&o), 2);
    let g = one_conv();
    let model = write_model(dir.path(), "m.json", &g);
    let o = qlower(["calibrate", "--model", &s(&model), "--data", "/nonexistent/dir"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn empty_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let g = one_conv();
    let model = write_model(dir.path(), "m.json", &g);
    let data = write_dataset(dir.path(), "d", &Dataset::new(vec![]));
    let o = qlower(["calibrate", "--model", &s(&model), "--data", &s(&data)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn quantize_without_qparams_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let g = one_conv();
    let model = write_model(dir.path(), "m.json", &g);
    let o = qlower(["quantize", "--model", &s(&model), "--preset", "trt"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn academic_quantize_keeps_batch_norm() {
    let dir = tempfile::tempdir().unwrap();
    let g = basic_block(2, 4).unwrap();
    let model = write_model(dir.path(), "m.json", &g);
    let data = write_dataset(dir.path(), "d", &random_inputs(1, &g, 2, 2));
    let qp = dir.path().join("q.json");
    let out = dir.path().join("fq.json");
    let o = qlower(["calibrate", "--model", &s(&model), "--data", &s(&data), "--out", &s(&qp)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = qlower(["quantize", "--model", &s(&model), "--qparams", &s(&qp), "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fq = qlower::graph::load_model(&std::fs::read(&out).unwrap()).unwrap();
    assert!(fq.nodes.iter().any(|n| matches!(n.op, qlower::graph::Op::Bn(_))));
    assert!(fq.has_fake_quant());
}

#[test]
fn train_qat_reports_and_gates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = write_model(d, "toy.json", &toy_cnn(1, 4).unwrap());
    let data = write_dataset(d, "d", &synthetic_dataset(2, 2, 8, 0.5));
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"kernel": "pact", "epochs": 1, "bits": 4}"#).unwrap();
    let out = d.join("trained.json");
    let o = qlower(["train-qat", "--model", &s(&model), "--data", &s(&data), "--config", &s(&cfg), "--out", &s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let last: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
    assert_eq!(last["steps"], 2);
    qlower::graph::load_model(&std::fs::read(&out).unwrap()).unwrap();

    std::fs::write(&cfg, r#"{"kernel": "lsq", "epochs": 1, "min_accuracy": 1.01}"#).unwrap();
    let o = qlower(["train-qat", "--model", &s(&model), "--data", &s(&data), "--config", &s(&cfg), "--out", &s(&out)]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));

    std::fs::write(&cfg, r#"{"epochz": 1}"#).unwrap();
    let o = qlower(["train-qat", "--model", &s(&model), "--data", &s(&data), "--config", &s(&cfg), "--out", &s(&out)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn presets_lists_all_and_filters() {
    let o = qlower(["presets"]);
    assert_eq!(code(&o), 0);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, qlower::quantizer::PRESET_NAMES);
    let o = qlower(["presets", "tv"]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows.len(), 1);
    let o = qlower(["presets", "--pretty"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("fbgemm"));
}

#[test]
fn unknown_preset_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let g = one_conv();
    let model = write_model(dir.path(), "m.json", &g);
    let data = write_dataset(dir.path(), "d", &random_inputs(1, &g, 1, 1));
    let o = qlower(["calibrate", "--model", &s(&model), "--data", &s(&data), "--preset", "npu"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn one_conv_compare_and_float_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = one_conv();
    let model = write_model(d, "m.json", &g);
    let data = write_dataset(d, "d", &random_inputs(4, &g, 2, 4));
    let qp = d.join("q.json");
    let o = qlower(["calibrate", "--model", &s(&model), "--data", &s(&data), "--preset", "snpe", "--out", &s(&qp)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = qlower(["compare", "--model", &s(&model), "--qparams", &s(&qp), "--preset", "snpe", "--data", &s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["final"]["bitexact_frac"].as_f64().unwrap() >= 0.999, "{report}");

    let o = qlower(["run", "--model", &s(&model), "--data", &s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["mode"], "float");
    let want = qlower::graph::infer(&g, &[random_inputs(4, &g, 2, 4).batches[0].input.clone()]).unwrap();
    let got: Vec<f32> = report["batches"][0][0]["data"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap() as f32)
        .collect();
    assert_eq!(got, want[0].data());
}

#[test]
fn mse_activation_choice_differs_on_outliers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = one_conv();
    let model = write_model(d, "m.json", &g);
    // Cubing stretches the tails far past the bulk.
    let mut ds = random_inputs(4, &g, 8, 16);
    for b in &mut ds.batches {
        let x = b.input.data().iter().map(|v| (3.0 * v).powi(3)).collect();
        b.input = qlower::Tensor::new(b.input.shape().to_vec(), x).unwrap();
    }
    let data = write_dataset(d, "d", &ds);
    let table = |calib: &str| {
        let out = d.join(format!("{calib}.json"));
        let o = qlower(["calibrate", "--model", &s(&model), "--data", &s(&data), "--act-calib", calib, "--out", &s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        load_qparams(&std::fs::read(&out).unwrap()).unwrap()
    };
    let (mm, mse) = (table("minmax"), table("mse"));
    assert_eq!(mm.len(), mse.len());
    assert_ne!(mm, mse);
}
