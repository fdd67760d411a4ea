//! Quantization-aware training: trainable quantizer kernels and an SGD loop
//! with linear warm-up and cosine annealing.

mod forward;
pub mod kernels;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::forward::{quant_key, step, QState, TrainState, Trainable};
use self::kernels::{
    dorefa_act_qparams, dorefa_weight_qparams, dsq_weight_range, pact_qparams, range_qparams, ClipMode, DSQ_ALPHA,
    PACT_ALPHA_FLOOR, PACT_INIT_ALPHA, PACT_INIT_BETA,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::exec::{effective_weight, infer, uncalibrated};
use crate::graph::{FqRole, Graph, Kernel, Op};
use crate::quantizer::{QParams, ScaleForm, Symmetry, SCALE_FLOOR};
use crate::tensor::Tensor;

pub use self::kernels::{
    dorefa_weight_transform, dsq_forward, lsq_backward, lsq_forward, lsq_grad_scale, lsq_init, pact_backward,
    pact_forward, LsqGrads, LsqInit, PactGrads,
};

/// Kernel assigned to every quantizer by [`train_qat`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Fixed,
    Lsq,
    #[serde(rename = "lsq+")]
    LsqPlus,
    Pact,
    Dorefa,
    Dsq,
}

impl KernelChoice {
    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown QAT kernel `{name}`")))
    }

    fn kernel(self) -> Kernel {
        match self {
            KernelChoice::Fixed => Kernel::Fixed,
            KernelChoice::Lsq => Kernel::Lsq {
                learn_zero_point: false,
                zero_points: None,
            },
            KernelChoice::LsqPlus => Kernel::Lsq {
                learn_zero_point: true,
                zero_points: None,
            },
            KernelChoice::Pact => Kernel::Pact {
                alpha: PACT_INIT_ALPHA,
                beta: PACT_INIT_BETA,
            },
            KernelChoice::Dorefa => Kernel::Dorefa,
            KernelChoice::Dsq => Kernel::Dsq { alpha: DSQ_ALPHA },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Overrides the kernel of every quantizer; `None` keeps the graph's.
    pub kernel: Option<KernelChoice>,
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub nesterov: bool,
    pub weight_decay: f32,
    /// Also decay quantizer scales and clip parameters.
    pub quant_weight_decay: bool,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Pipeline settings used by the command-line front end.
    pub preset: Option<String>,
    pub bits: Option<u8>,
    pub fold_bn: Option<u8>,
    /// Final-epoch accuracy below this fails the run (threshold exit).
    pub min_accuracy: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kernel: None,
            epochs: 1,
            lr: 0.01,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            quant_weight_decay: false,
            warmup_epochs: 1,
            seed: 0,
            preset: None,
            bits: None,
            fold_bn: None,
            min_accuracy: None,
        }
    }
}

/// Learning rate at `step` of `total`: linear from 0 over `warmup` steps,
/// then cosine annealing to 0.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f32) -> f32 {
    if step < warmup {
        return peak * step as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = (step - warmup) as f64 / span;
    (f64::from(peak) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
    pub acc: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: Graph,
    pub metrics: Vec<StepMetric>,
}

impl TrainOutcome {
    /// JSON-lines metrics, one object per step.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }

    /// Mean accuracy over the last epoch's steps.
    pub fn final_accuracy(&self, steps_per_epoch: usize) -> Option<f32> {
        let n = steps_per_epoch.min(self.metrics.len());
        (n > 0).then(|| self.metrics[self.metrics.len() - n..].iter().map(|m| m.acc).sum::<f32>() / n as f32)
    }
}

/// Evaluation-mode accuracy of `g` on a labeled dataset.
pub fn accuracy(g: &Graph, data: &Dataset) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for b in &data.batches {
        let labels = b
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("accuracy needs labeled batches".into()))?;
        let out = infer(g, std::slice::from_ref(&b.input))?;
        let logits = crate::graph::exec::linear_input(&out[0])?;
        correct += forward::count_correct(&logits, labels);
        total += labels.len();
    }
    Ok(correct as f32 / total as f32)
}

fn scale_key(key: &str) -> String {
    format!("{key}#scale")
}

fn zero_key(key: &str) -> String {
    format!("{key}#zero_point")
}

fn alpha_key(key: &str) -> String {
    format!("{key}#alpha")
}

fn beta_key(key: &str) -> String {
    format!("{key}#beta")
}

fn trainable(value: Tensor, quant: bool) -> Trainable {
    Trainable {
        momentum: Tensor::zeros(value.shape()),
        value,
        quant,
    }
}

fn init_state(g: &Graph) -> Result<(TrainState, Vec<String>)> {
    let mut trainables = BTreeMap::new();
    let mut frozen = Vec::new();
    for n in &g.nodes {
        match &n.op {
            Op::Conv2d(a) | Op::Linear(a) => {
                let mut names = vec![a.weight.clone()];
                names.extend(a.bias.clone());
                if let Some(bn) = &a.bn {
                    names.extend([bn.gamma.clone(), bn.beta.clone()]);
                }
                for name in names {
                    trainables.insert(name.clone(), trainable(g.param(&name)?.clone(), false));
                }
            }
            Op::Bn(a) => {
                for name in [&a.gamma, &a.beta] {
                    trainables.insert(name.clone(), trainable(g.param(name)?.clone(), false));
                }
            }
            _ => {}
        }
    }
    let mut quant = HashMap::new();
    for (n, a) in g.fake_quant_nodes() {
        let key = quant_key(n, a);
        if quant.contains_key(&key) {
            continue;
        }
        let qp = a
            .qparams
            .clone()
            .ok_or_else(|| Error::CalibrationRequired(vec![n.id.clone()]))?;
        let state = match (&a.kernel, a.role) {
            (Kernel::Fixed, _) => QState::Fixed(qp),
            (Kernel::Lsq { learn_zero_point, zero_points }, _) => {
                let learn_z = *learn_zero_point && a.scheme.symmetry == Symmetry::Asymmetric;
                let z: Vec<f32> = match zero_points {
                    Some(z) if z.len() == qp.len() => z.clone(),
                    _ => qp.zero_points.iter().map(|&z| z as f32).collect(),
                };
                trainables.insert(scale_key(&key), trainable(Tensor::from_vec(qp.scales.clone()), true));
                trainables.insert(zero_key(&key), trainable(Tensor::from_vec(z), true));
                if !learn_z {
                    frozen.push(zero_key(&key));
                }
                QState::Lsq {
                    scale: scale_key(&key),
                    zero_point: zero_key(&key),
                    learn_z,
                    qmin: qp.qmin,
                    qmax: qp.qmax,
                }
            }
            (Kernel::Pact { alpha, beta }, FqRole::Activation) => {
                let mode = ClipMode::for_scheme(&a.scheme, Some(&qp));
                trainables.insert(alpha_key(&key), trainable(Tensor::from_vec(vec![*alpha]), true));
                trainables.insert(beta_key(&key), trainable(Tensor::from_vec(vec![*beta]), true));
                if mode != ClipMode::Asymmetric {
                    frozen.push(beta_key(&key));
                }
                QState::Pact {
                    alpha: alpha_key(&key),
                    beta: beta_key(&key),
                    mode,
                }
            }
            (Kernel::Pact { .. } | Kernel::Dorefa, FqRole::Weight) => QState::Dorefa { act: None },
            (Kernel::Dorefa, FqRole::Activation) => QState::Dorefa {
                act: Some(Arc::new(dorefa_act_qparams(&a.scheme, Some(&qp))?)),
            },
            (Kernel::Dsq { alpha }, role) => QState::Dsq {
                alpha: *alpha,
                range: (role == FqRole::Activation).then(|| {
                    let z = qp.zero_point();
                    ((qp.qmin - z) as f32 * qp.scale(), (qp.qmax - z) as f32 * qp.scale())
                }),
            },
        };
        quant.insert(key, state);
    }
    Ok((TrainState { trainables, quant }, frozen))
}

/// Projects quantizer parameters back into their legal sets.
fn project(st: &mut TrainState) {
    for q in st.quant.values() {
        match q {
            QState::Lsq { scale, .. } => {
                if let Some(t) = st.trainables.get_mut(scale) {
                    for s in t.value.data_mut() {
                        *s = s.max(SCALE_FLOOR);
                    }
                }
            }
            QState::Pact { alpha, beta, mode } => {
                let a = {
                    let t = st.trainables.get_mut(alpha).expect("pact alpha");
                    let a = &mut t.value.data_mut()[0];
                    *a = a.max(PACT_ALPHA_FLOOR);
                    *a
                };
                if *mode == ClipMode::Asymmetric {
                    let t = st.trainables.get_mut(beta).expect("pact beta");
                    let b = &mut t.value.data_mut()[0];
                    *b = b.min(a - PACT_ALPHA_FLOOR);
                }
            }
            _ => {}
        }
    }
}

fn sgd(p: &mut Trainable, grad: &Tensor, lr: f32, cfg: &TrainConfig) {
    let wd = if p.quant && !cfg.quant_weight_decay {
        0.0
    } else {
        cfg.weight_decay
    };
    let mu = cfg.momentum;
    let (value, buf) = (p.value.data_mut(), p.momentum.data_mut());
    for ((w, b), &g) in value.iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
        let d = g + wd * *w;
        *b = mu * *b + d;
        let d = if cfg.nesterov { d + mu * *b } else { *b };
        *w -= lr * d;
    }
}

fn snap(qp: QParams, form: ScaleForm) -> Result<QParams> {
    match form {
        ScaleForm::Pot => qp.snapped_pot(),
        ScaleForm::Fp32 => Ok(qp),
    }
}

/// Writes the trained state back into a graph and resolves every quantizer
/// to the hard parameters evaluation uses.
fn export(g: &Graph, st: &TrainState) -> Result<Graph> {
    let mut out = g.clone();
    for (name, t) in &st.trainables {
        if out.params.contains_key(name) {
            out.params.insert(name.clone(), t.value.clone());
        }
    }
    let mut resolved: HashMap<String, Arc<QParams>> = HashMap::new();
    let snapshot = out.clone();
    for ni in 0..out.nodes.len() {
        let Op::FakeQuant(a) = &out.nodes[ni].op else { continue };
        let key = quant_key(&out.nodes[ni], a);
        let a = a.clone();
        let value = |name: &str| st.trainables[name].value.data().to_vec();
        let mut kernel = a.kernel.clone();
        let qp = if let Some(q) = resolved.get(&key) {
            q.clone()
        } else {
            let q = match &st.quant[&key] {
                QState::Fixed(q) => q.clone(),
                QState::Lsq { scale, zero_point, learn_z, qmin, qmax } => {
                    let z = value(zero_point);
                    let zi = z
                        .iter()
                        .map(|v| (v.round_ties_even() as i32).clamp(*qmin, *qmax))
                        .collect();
                    let s = value(scale).iter().map(|v| v.max(SCALE_FLOOR)).collect();
                    kernel = Kernel::Lsq {
                        learn_zero_point: *learn_z,
                        zero_points: learn_z.then_some(z),
                    };
                    Arc::new(snap(QParams::new(s, zi, *qmin, *qmax, ScaleForm::Fp32)?, a.scheme.scale_form)?)
                }
                QState::Pact { alpha, beta, mode } => {
                    let (al, be) = (value(alpha)[0], value(beta)[0]);
                    kernel = Kernel::Pact { alpha: al, beta: be };
                    Arc::new(pact_qparams(&a.scheme, *mode, al, be)?)
                }
                QState::Dorefa { act: Some(q) } => q.clone(),
                QState::Dorefa { act: None } | QState::Dsq { range: None, .. } => {
                    let layer = snapshot
                        .nodes
                        .iter()
                        .find(|n| n.op.is_layer() && n.inputs.get(1) == Some(&snapshot.nodes[ni].id))
                        .ok_or_else(|| Error::Contract(format!("weight quantizer `{key}` has no layer")))?;
                    let (w, _) = effective_weight(&snapshot, layer, layer.op.layer().expect("layer"))?;
                    if matches!(st.quant[&key], QState::Dsq { .. }) {
                        let (lo, hi) = dsq_weight_range(&w, a.scheme.channel_axis())?;
                        Arc::new(QParams::from_range(&a.scheme, &lo, &hi)?)
                    } else {
                        Arc::new(dorefa_weight_qparams(&a.scheme, &w)?)
                    }
                }
                QState::Dsq { range: Some((lo, hi)), .. } => Arc::new(range_qparams(&a.scheme, *lo, *hi)?),
            };
            resolved.insert(key.clone(), q.clone());
            q
        };
        if let Op::FakeQuant(fa) = &mut out.nodes[ni].op {
            fa.qparams = Some(qp);
            fa.kernel = kernel;
        }
    }
    out.validate()?;
    Ok(out)
}

fn assign_kernel(g: &Graph, choice: KernelChoice) -> Graph {
    let mut out = g.clone();
    for n in &mut out.nodes {
        if let Op::FakeQuant(a) = &mut n.op {
            a.kernel = choice.kernel();
        }
    }
    out
}

/// Runs `cfg.epochs` epochs of SGD over `data`, whose batches must carry labels.
pub fn train_qat(g: &Graph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            graph: g.clone(),
            metrics: Vec::new(),
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.batches.iter().any(|b| b.labels.is_none()) {
        return Err(Error::InvalidArgument("training needs labeled batches".into()));
    }
    let missing = uncalibrated(g);
    if !missing.is_empty() {
        return Err(Error::CalibrationRequired(missing));
    }
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be finite and >= 0, got {}", cfg.lr)));
    }
    let mut work = match cfg.kernel {
        Some(k) => assign_kernel(g, k),
        None => g.clone(),
    };
    let (mut st, frozen) = init_state(&work)?;
    let steps_per_epoch = data.len();
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(total);
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &bi in &order {
            let b = &data.batches[bi];
            let lr = lr_at(t, total, warmup, cfg.lr);
            let r = match step(&work, &st, &b.input, b.labels.as_deref().expect("checked")) {
                // After an update, non-finite intermediates mean the parameters blew up.
                Err(Error::NumericInput { .. } | Error::DegenerateInput { .. }) if t > 0 => {
                    return Err(Error::Divergence { step: t })
                }
                r => r?,
            };
            if !r.loss.is_finite() {
                return Err(Error::Divergence { step: t });
            }
            for (name, grad) in &r.grads {
                if frozen.contains(name) {
                    continue;
                }
                if let Some(p) = st.trainables.get_mut(name) {
                    sgd(p, grad, lr, cfg);
                }
            }
            project(&mut st);
            if st.trainables.values().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { step: t });
            }
            for (mean, var, m, bm, bv) in r.updates.bn {
                for (name, batch) in [(mean, bm), (var, bv)] {
                    let cur = work.param(&name)?;
                    let next: Vec<f32> = cur.data().iter().zip(&batch).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                    work.params.insert(name, Tensor::new(cur.shape().to_vec(), next)?);
                }
            }
            for (key, lo, hi) in r.updates.dsq {
                if let Some(QState::Dsq { range, .. }) = st.quant.get_mut(&key) {
                    *range = Some((lo, hi));
                }
            }
            metrics.push(StepMetric {
                step: t,
                lr,
                loss: r.loss,
                acc: r.correct as f32 / r.total as f32,
            });
            t += 1;
        }
    }
    // Buffers live in `work`; learnable values in `st`.
    let graph = export(&work, &st)?;
    Ok(TrainOutcome { graph, metrics })
}
