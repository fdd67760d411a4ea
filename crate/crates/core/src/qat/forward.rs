//! Training-mode forward pass on a tape.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{
    self, dorefa_act_qparams, dorefa_weight_qparams, dorefa_weight_transform, dsq_weight_range, ClipMode,
    DSQ_RANGE_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::graph::exec::linear_input;
use crate::graph::{FakeQuantAttrs, FqRole, Graph, LayerAttrs, Node, Op};
use crate::quantizer::{fake_quantize, Granularity, QParams, QScheme};
use crate::tensor::ops;
use crate::tensor::{Tape, Tensor, Var};

/// Learned or tracked state of one quantizer (or share group).
#[derive(Debug, Clone)]
pub(crate) enum QState {
    Fixed(Arc<QParams>),
    Lsq {
        scale: String,
        zero_point: String,
        learn_z: bool,
        qmin: i32,
        qmax: i32,
    },
    Pact {
        alpha: String,
        beta: String,
        mode: ClipMode,
    },
    /// DoReFa: fixed interval for activations, tanh transform for weights.
    Dorefa { act: Option<Arc<QParams>> },
    Dsq {
        alpha: f32,
        /// EMA clip range of activations.
        range: Option<(f32, f32)>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Trainable {
    pub value: Tensor,
    pub momentum: Tensor,
    pub quant: bool,
}

/// Everything a training step reads and updates.
#[derive(Debug, Clone)]
pub(crate) struct TrainState {
    pub trainables: BTreeMap<String, Trainable>,
    pub quant: HashMap<String, QState>,
}

/// Key of the quantizer state governing fake-quant node `n`.
pub(crate) fn quant_key(n: &Node, a: &FakeQuantAttrs) -> String {
    a.share_group.clone().unwrap_or_else(|| n.id.clone())
}

/// `(mean name, var name, momentum, batch mean, batch var)`.
pub(crate) type BnUpdate = (String, String, f32, Vec<f32>, Vec<f32>);

/// Buffer updates gathered during a step.
#[derive(Debug, Default)]
pub(crate) struct Updates {
    pub bn: Vec<BnUpdate>,
    pub dsq: Vec<(String, f32, f32)>,
}

pub(crate) struct StepResult {
    pub loss: f32,
    pub correct: usize,
    pub total: usize,
    pub grads: BTreeMap<String, Tensor>,
    pub updates: Updates,
}

struct Fwd<'a> {
    g: &'a Graph,
    st: &'a TrainState,
    tape: Tape,
    vars: HashMap<String, Var>,
    leaves: BTreeMap<String, Var>,
    updates: Updates,
}

fn axis_of(gran: Granularity) -> Option<usize> {
    match gran {
        Granularity::PerTensor => None,
        Granularity::PerChannel { axis } => Some(axis),
    }
}

impl Fwd<'_> {
    fn var(&self, id: &str) -> Result<Var> {
        self.vars.get(id).copied().ok_or_else(|| Error::DanglingReference {
            node: "<train>".into(),
            target: id.into(),
        })
    }

    /// Leaf for a trainable parameter, constant for anything else.
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.leaves.get(name) {
            return Ok(*v);
        }
        let v = match self.st.trainables.get(name) {
            Some(t) => {
                let v = self.tape.leaf(t.value.clone());
                self.leaves.insert(name.to_string(), v);
                v
            }
            None => self.tape.constant(self.g.param(name)?.clone()),
        };
        Ok(v)
    }

    fn value(&self, v: Var) -> Result<Tensor> {
        Ok(self.tape.value(v)?.clone())
    }

    fn state(&self, key: &str) -> Result<&QState> {
        self.st
            .quant
            .get(key)
            .ok_or_else(|| Error::Contract(format!("no training state for quantizer `{key}`")))
    }

    fn hard(&mut self, x: Var, qp: Arc<QParams>, gran: Granularity) -> Result<Var> {
        let xv = self.value(x)?;
        let y = fake_quantize(&xv, &qp, gran)?;
        self.tape.custom(
            &[x],
            y,
            Box::new(move |up| vec![Some(kernels::ste_backward(&xv, &qp, gran, up).expect("shape checked in forward"))]),
        )
    }

    fn lsq(&mut self, x: Var, key: &str, gran: Granularity, per_sample: bool) -> Result<Var> {
        let QState::Lsq { scale, zero_point, learn_z, qmin, qmax } = self.state(key)?.clone() else {
            unreachable!()
        };
        let s_var = self.param(&scale)?;
        let z_var = self.param(&zero_point)?;
        let xv = self.value(x)?;
        let s = self.value(s_var)?.into_data();
        let z = self.value(z_var)?.into_data();
        let axis = axis_of(gran);
        let m = match axis {
            Some(a) => xv.numel() / xv.shape()[a],
            None if per_sample && xv.rank() > 1 => xv.numel() / xv.shape()[0],
            None => xv.numel(),
        };
        let g = vec![kernels::lsq_grad_scale(m, qmax); s.len()];
        let y = kernels::lsq_forward(&xv, &s, &z, qmin, qmax, axis)?;
        self.tape.custom(
            &[x, s_var, z_var],
            y,
            Box::new(move |up| {
                let r = kernels::lsq_backward(&xv, &s, &z, qmin, qmax, axis, &g, up).expect("shape checked in forward");
                vec![
                    Some(r.dx),
                    Some(Tensor::from_vec(r.ds)),
                    learn_z.then(|| Tensor::from_vec(r.dz)),
                ]
            }),
        )
    }

    fn pact(&mut self, x: Var, key: &str, scheme: QScheme) -> Result<Var> {
        let QState::Pact { alpha, beta, mode } = self.state(key)?.clone() else {
            unreachable!()
        };
        let a_var = self.param(&alpha)?;
        let b_var = self.param(&beta)?;
        let a = self.value(a_var)?.data()[0];
        let b = self.value(b_var)?.data()[0];
        let xv = self.value(x)?;
        let y = kernels::pact_forward(&xv, &scheme, mode, a, b)?;
        self.tape.custom(
            &[x, a_var, b_var],
            y,
            Box::new(move |up| {
                let r = kernels::pact_backward(&xv, mode, a, b, up);
                vec![
                    Some(r.dx),
                    Some(Tensor::scalar(r.dalpha).reshape(vec![1]).expect("one element")),
                    Some(Tensor::scalar(r.dbeta).reshape(vec![1]).expect("one element")),
                ]
            }),
        )
    }

    fn dsq(&mut self, x: Var, qp: QParams, gran: Granularity, alpha: f32) -> Result<Var> {
        let xv = self.value(x)?;
        let y = kernels::dsq_forward(&xv, &qp, gran, alpha)?;
        self.tape.custom(
            &[x],
            y,
            Box::new(move |up| vec![Some(kernels::dsq_backward(&xv, &qp, gran, alpha, up).expect("shape checked"))]),
        )
    }

    fn activation_fq(&mut self, node: &Node, a: &FakeQuantAttrs) -> Result<Var> {
        let x = self.var(&node.inputs[0])?;
        let key = quant_key(node, a);
        match self.state(&key)?.clone() {
            QState::Fixed(qp) => self.hard(x, qp, Granularity::PerTensor),
            QState::Lsq { .. } => self.lsq(x, &key, Granularity::PerTensor, true),
            QState::Pact { .. } => self.pact(x, &key, a.scheme),
            QState::Dorefa { act } => {
                let qp = match act {
                    Some(q) => q,
                    None => Arc::new(dorefa_act_qparams(&a.scheme, a.qparams.as_deref())?),
                };
                let (lo, hi) = (qp.qmin as f32 - qp.zero_point() as f32, qp.qmax as f32 - qp.zero_point() as f32);
                let (lo, hi) = (lo * qp.scale(), hi * qp.scale());
                let xv = self.value(x)?;
                let clipped = xv.map(|v| v.clamp(lo, hi));
                let y = fake_quantize(&clipped, &qp, Granularity::PerTensor)?;
                self.tape.custom(
                    &[x],
                    y,
                    Box::new(move |up| {
                        vec![Some(
                            xv.zip_map(up, |v, u| if v > lo && v < hi { u } else { 0.0 })
                                .expect("same shape"),
                        )]
                    }),
                )
            }
            QState::Dsq { alpha, range } => {
                let xv = self.value(x)?;
                let (bl, bh) = kernels::channel_range(&xv, None)?;
                let (lo, hi) = match range {
                    Some((l, h)) => (
                        DSQ_RANGE_MOMENTUM * l + (1.0 - DSQ_RANGE_MOMENTUM) * bl[0],
                        DSQ_RANGE_MOMENTUM * h + (1.0 - DSQ_RANGE_MOMENTUM) * bh[0],
                    ),
                    None => (bl[0], bh[0]),
                };
                self.updates.dsq.push((key, lo, hi));
                let qp = kernels::range_qparams(&a.scheme, lo, hi)?;
                self.dsq(x, qp, Granularity::PerTensor, alpha)
            }
        }
    }

    /// Applies the layer's weight quantizer to the effective weight `w`.
    fn weight_fq(&mut self, node: &Node, w: Var) -> Result<Var> {
        let Some((wn, a)) = self.g.weight_quant(node) else {
            return Ok(w);
        };
        let a = a.clone();
        let key = quant_key(wn, &a);
        let gran = a.scheme.granularity;
        match self.state(&key)?.clone() {
            QState::Fixed(qp) => self.hard(w, qp, gran),
            QState::Lsq { .. } => self.lsq(w, &key, gran, false),
            QState::Pact { .. } | QState::Dorefa { .. } => {
                let wv = self.value(w)?;
                let (wt, m) = dorefa_weight_transform(&wv);
                let qp = dorefa_weight_qparams(&a.scheme, &wt)?;
                let y = fake_quantize(&wt, &qp, gran)?;
                self.tape.custom(
                    &[w],
                    y,
                    Box::new(move |up| {
                        let through = kernels::ste_backward(&wt, &qp, gran, up).expect("shape checked");
                        vec![Some(kernels::dorefa_weight_backward(&wv, m, &through).expect("same shape"))]
                    }),
                )
            }
            QState::Dsq { alpha, .. } => {
                let wv = self.value(w)?;
                let (lo, hi) = dsq_weight_range(&wv, axis_of(gran))?;
                let qp = QParams::from_range(&a.scheme, &lo, &hi)?;
                self.dsq(w, qp, gran, alpha)
            }
        }
    }

    fn apply(&mut self, attrs: &LayerAttrs, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match attrs.conv {
            Some(p) => self.tape.conv2d(x, w, b, p),
            None => {
                let xv = self.tape.value(x)?;
                let x = if xv.rank() == 4 {
                    let shape = linear_input(xv)?.shape().to_vec();
                    self.tape.reshape(x, shape)?
                } else {
                    x
                };
                self.tape.linear(x, w, b)
            }
        }
    }

    fn zeros_like_channels(&mut self, c: usize) -> Var {
        self.tape.constant(Tensor::zeros(&[c]))
    }

    fn layer(&mut self, node: &Node, attrs: &LayerAttrs) -> Result<Var> {
        let x = self.var(&node.inputs[0])?;
        let w = self.param(&attrs.weight)?;
        let b = attrs.bias.as_ref().map(|n| self.param(n)).transpose()?;
        let Some(bn) = attrs.bn.clone() else {
            let wq = self.weight_fq(node, w)?;
            return self.apply(attrs, x, wq, b);
        };
        let c = self.g.param(&attrs.weight)?.shape()[0];
        let gamma = self.param(&bn.gamma)?;
        let beta = self.param(&bn.beta)?;
        let r_mean = self.g.param(&bn.mean)?.clone();
        let r_var = self.g.param(&bn.var)?.clone();
        let sigma = |v: &[f32]| Tensor::from_vec(v.iter().map(|x| (x + bn.eps).sqrt()).collect());
        let sigma_r = self.tape.constant(sigma(r_var.data()));
        let b_var = match b {
            Some(b) => b,
            None => self.zeros_like_channels(c),
        };
        // Pre-BN statistics of the FP32 layer, detached.
        let batch_stats = |fw: &mut Self| -> Result<(Vec<f32>, Vec<f32>)> {
            let xv = fw.value(x)?;
            let wv = fw.value(w)?;
            let bv = fw.value(b_var)?;
            let y = match attrs.conv {
                Some(p) => ops::conv2d(&xv, &wv, Some(&bv), p)?,
                None => ops::linear(&linear_input(&xv)?, &wv, Some(&bv))?,
            };
            ops::channel_stats(&y)
        };
        match bn.strategy {
            1 => {
                let cr = self.tape.div_channel(gamma, sigma_r, 0)?;
                let wf = self.tape.mul_channel(w, cr, 0)?;
                let wq = self.weight_fq(node, wf)?;
                let mu = self.tape.constant(r_mean);
                let t = self.tape.sub(b_var, mu)?;
                let t = self.tape.mul(t, cr)?;
                let bias = self.tape.add(beta, t)?;
                self.apply(attrs, x, wq, Some(bias))
            }
            2 => {
                let (mb, vb) = batch_stats(self)?;
                let sigma_b = self.tape.constant(sigma(&vb));
                let cb = self.tape.div_channel(gamma, sigma_b, 0)?;
                let wf = self.tape.mul_channel(w, cb, 0)?;
                let wq = self.weight_fq(node, wf)?;
                let mu = self.tape.constant(Tensor::from_vec(mb.clone()));
                let t = self.tape.sub(b_var, mu)?;
                let t = self.tape.mul(t, cb)?;
                let bias = self.tape.add(beta, t)?;
                self.updates.bn.push((bn.mean.clone(), bn.var.clone(), bn.momentum, mb, vb));
                self.apply(attrs, x, wq, Some(bias))
            }
            3 => {
                let (mb, vb) = batch_stats(self)?;
                let cr = self.tape.div_channel(gamma, sigma_r, 0)?;
                let wf = self.tape.mul_channel(w, cr, 0)?;
                let wq = self.weight_fq(node, wf)?;
                let y = self.apply(attrs, x, wq, None)?;
                let corr: Vec<f32> = sigma(r_var.data())
                    .data()
                    .iter()
                    .zip(sigma(&vb).data())
                    .map(|(r, b)| r / b)
                    .collect();
                let corr = self.tape.constant(Tensor::from_vec(corr));
                let y = self.tape.mul_channel(y, corr, 1)?;
                let sigma_b = self.tape.constant(sigma(&vb));
                let cb = self.tape.div_channel(gamma, sigma_b, 0)?;
                let mu = self.tape.constant(Tensor::from_vec(mb.clone()));
                let t = self.tape.sub(b_var, mu)?;
                let t = self.tape.mul(t, cb)?;
                let bias = self.tape.add(beta, t)?;
                self.updates.bn.push((bn.mean.clone(), bn.var.clone(), bn.momentum, mb, vb));
                self.tape.add_channel(y, bias, 1)
            }
            4 => {
                let cr = self.tape.div_channel(gamma, sigma_r, 0)?;
                let wf = self.tape.mul_channel(w, cr, 0)?;
                let wq = self.weight_fq(node, wf)?;
                let y = self.apply(attrs, x, wq, None)?;
                let y = self.tape.div_channel(y, cr, 1)?;
                let y = self.tape.add_channel(y, b_var, 1)?;
                let (out, mb, vb) = self.tape.batchnorm_train(y, gamma, beta, bn.eps)?;
                self.updates.bn.push((bn.mean.clone(), bn.var.clone(), bn.momentum, mb, vb));
                Ok(out)
            }
            s => Err(Error::InvalidArgument(format!("unknown fold strategy {s}"))),
        }
    }

    fn node(&mut self, node: &Node) -> Result<Var> {
        let inp = |f: &Self, i: usize| f.var(&node.inputs[i]);
        match &node.op {
            Op::Input { .. } => unreachable!("inputs are bound before the pass"),
            Op::Conv2d(a) | Op::Linear(a) => self.layer(node, a),
            Op::Bn(a) => {
                let x = inp(self, 0)?;
                let gamma = self.param(&a.gamma)?;
                let beta = self.param(&a.beta)?;
                let (y, m, v) = self.tape.batchnorm_train(x, gamma, beta, a.eps)?;
                self.updates.bn.push((a.mean.clone(), a.var.clone(), a.momentum, m, v));
                Ok(y)
            }
            Op::Relu => {
                let x = inp(self, 0)?;
                self.tape.relu(x)
            }
            Op::Relu6 => {
                let x = inp(self, 0)?;
                self.tape.relu6(x)
            }
            Op::Add { .. } => {
                let (a, b) = (inp(self, 0)?, inp(self, 1)?);
                self.tape.add(a, b)
            }
            Op::Concat { axis } => {
                let xs: Vec<Var> = (0..node.inputs.len()).map(|i| inp(self, i)).collect::<Result<_>>()?;
                self.tape.concat(&xs, *axis)
            }
            Op::Gap => {
                let x = inp(self, 0)?;
                self.tape.global_avg_pool(x)
            }
            Op::FakeQuant(a) => match a.role {
                FqRole::Weight => Ok(self.tape.constant(Tensor::scalar(0.0))),
                FqRole::Activation => self.activation_fq(node, a),
            },
        }
    }
}

/// Number of correct argmax predictions.
pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count()
}

/// One forward/backward pass on a labeled batch.
pub(crate) fn step(g: &Graph, st: &TrainState, input: &Tensor, labels: &[usize]) -> Result<StepResult> {
    if g.inputs.len() != 1 || g.outputs.is_empty() {
        return Err(Error::InvalidArgument("training needs one graph input and a logits output".into()));
    }
    let mut f = Fwd {
        g,
        st,
        tape: Tape::new(),
        vars: HashMap::new(),
        leaves: BTreeMap::new(),
        updates: Updates::default(),
    };
    let x = f.tape.constant(input.clone());
    f.vars.insert(g.inputs[0].clone(), x);
    for node in &g.nodes {
        if matches!(node.op, Op::Input { .. }) {
            continue;
        }
        let v = f.node(node)?;
        f.vars.insert(node.id.clone(), v);
    }
    let out = f.var(&g.outputs[0])?;
    let logits = {
        let v = f.tape.value(out)?;
        if v.rank() == 4 {
            let s = linear_input(v)?.shape().to_vec();
            f.tape.reshape(out, s)?
        } else {
            out
        }
    };
    let lv = f.tape.value(logits)?.clone();
    if lv.rank() != 2 {
        return Err(Error::shape("train", format!("logits must be N×K, got {:?}", lv.shape())));
    }
    let loss = f.tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = f.tape.value(loss)?.data()[0];
    let mut grads = BTreeMap::new();
    if loss_value.is_finite() {
        let mut gr = f.tape.backward(loss)?;
        for (name, v) in &f.leaves {
            if let Some(t) = gr.take(*v) {
                grads.insert(name.clone(), t);
            }
        }
    }
    Ok(StepResult {
        loss: loss_value,
        correct: count_correct(&lv, labels),
        total: labels.len(),
        grads,
        updates: f.updates,
    })
}
