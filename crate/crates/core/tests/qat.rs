use proptest::prelude::*;
use qlower::calibration::CalibConfig;
use qlower::graph::{collect_qparams, save_model, Kernel};
use qlower::models::{synthetic_dataset, toy_cnn};
use qlower::pipeline::Prepare;
use qlower::qat::{accuracy, lr_at, train_qat, KernelChoice, TrainConfig};
use qlower::quantizer::backend_preset;
use qlower::Error;

fn prepared(bits: u8, fold: Option<u8>) -> (qlower::graph::Graph, qlower::data::Dataset) {
    let data = synthetic_dataset(1, 4, 16, 0.5);
    let preset = backend_preset("academic").unwrap().with_bits(bits).unwrap();
    let prep = Prepare {
        preset,
        policy: None,
        fold,
    };
    let g = prep.calibrated(&toy_cnn(0, 4).unwrap(), &data, &CalibConfig::default()).unwrap();
    (g, data)
}

#[test]
fn zero_epochs_leaves_the_model_untouched() {
    let (g, data) = prepared(8, None);
    let cfg = TrainConfig {
        epochs: 0,
        kernel: Some(KernelChoice::Lsq),
        ..Default::default()
    };
    let out = train_qat(&g, &data, &cfg).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(save_model(&out.graph), save_model(&g));
}

#[test]
fn training_is_deterministic() {
    let (g, data) = prepared(4, Some(2));
    for k in [KernelChoice::Lsq, KernelChoice::LsqPlus, KernelChoice::Pact, KernelChoice::Dorefa, KernelChoice::Dsq] {
        let cfg = TrainConfig {
            kernel: Some(k),
            epochs: 1,
            seed: 4,
            ..Default::default()
        };
        let a = train_qat(&g, &data, &cfg).unwrap();
        let b = train_qat(&g, &data, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics, "{k:?}");
        assert_eq!(save_model(&a.graph), save_model(&b.graph), "{k:?}");
        assert_eq!(a.metrics.len(), data.len());
    }
}

#[test]
fn kernel_override_is_recorded_on_every_quantizer() {
    let (g, data) = prepared(4, None);
    let cfg = TrainConfig {
        kernel: Some(KernelChoice::Pact),
        epochs: 1,
        ..Default::default()
    };
    let out = train_qat(&g, &data, &cfg).unwrap();
    let kernels: Vec<_> = out.graph.fake_quant_nodes().map(|(_, a)| a.kernel.clone()).collect();
    assert!(!kernels.is_empty());
    assert!(kernels.iter().any(|k| matches!(k, Kernel::Pact { .. })));
    // Learned parameters are written back as calibrated values.
    assert_eq!(collect_qparams(&out.graph).len(), collect_qparams(&g).len());
    accuracy(&out.graph, &data).unwrap();
}

#[test]
fn huge_learning_rate_diverges() {
    // Without quantizers nothing clips the activations.
    let g = toy_cnn(0, 4).unwrap();
    let data = synthetic_dataset(1, 4, 16, 0.5);
    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e30,
        warmup_epochs: 0,
        ..Default::default()
    };
    match train_qat(&g, &data, &cfg) {
        Err(e @ Error::Divergence { .. }) => assert_eq!(e.exit_code(), 5),
        Err(e) => panic!("unexpected error {e}"),
        Ok(o) => panic!("training survived: last loss {:?}", o.metrics.last()),
    }
}

#[test]
fn uncalibrated_graph_is_rejected() {
    let data = synthetic_dataset(1, 2, 8, 0.5);
    let g = Prepare::new(backend_preset("academic").unwrap()).apply(&toy_cnn(0, 4).unwrap()).unwrap();
    assert!(matches!(train_qat(&g, &data, &TrainConfig::default()), Err(Error::CalibrationRequired(_))));
}

#[test]
fn empty_dataset_is_rejected() {
    let (g, _) = prepared(8, None);
    let e = train_qat(&g, &qlower::data::Dataset::new(vec![]), &TrainConfig::default()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn config_rejects_unknown_fields() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "lrate": 1}"#).is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"kernel": "lsq+", "epochs": 2}"#).unwrap();
    assert_eq!(cfg.kernel, Some(KernelChoice::LsqPlus));
    assert_eq!(KernelChoice::parse("dsq").unwrap(), KernelChoice::Dsq);
    assert!(KernelChoice::parse("sgd").is_err());
}

#[test]
fn schedule_shape() {
    assert_eq!(lr_at(0, 100, 10, 1.0), 0.0);
    assert!((lr_at(5, 100, 10, 1.0) - 0.5).abs() < 1e-6);
    assert!((lr_at(10, 100, 10, 1.0) - 1.0).abs() < 1e-6);
    assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-6);
    assert!(lr_at(100, 100, 10, 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_decays_after_warmup(total in 2usize..500, warm in 0usize..50, peak in 0.001f32..1.0) {
        let warm = warm.min(total - 1);
        let mut prev = f32::INFINITY;
        for t in 0..total {
            let lr = lr_at(t, total, warm, peak);
            prop_assert!((0.0..=peak * (1.0 + 1e-6)).contains(&lr));
            if t >= warm {
                prop_assert!(lr <= prev * (1.0 + 1e-6));
                prev = lr;
            }
        }
    }
}
