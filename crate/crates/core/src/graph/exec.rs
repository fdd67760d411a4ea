//! Evaluation-mode executor (FP32 and fake-quantized).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::fold::{bn_scale, inference_affine};
use super::ir::{FqRole, Graph, Kernel, LayerAttrs, Node, Op};
use crate::error::{Error, Result};
use crate::quantizer::{fake_quantize, quantize_bias, Granularity, QParams};
use crate::tensor::ops::{self, mul_channel};
use crate::tensor::Tensor;

/// Options of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Apply fake-quantize nodes; when false they are identities.
    pub quantize: bool,
    /// Normalize BN (standalone or fused) with the batch's own statistics and
    /// record them, as BN statistic re-estimation needs.
    pub batch_stats: bool,
}

impl EvalOptions {
    pub const FLOAT: Self = Self {
        quantize: false,
        batch_stats: false,
    };
    pub const QUANT: Self = Self {
        quantize: true,
        batch_stats: false,
    };
}

/// Batch statistics `(mean, biased variance)` seen by a BN during one pass.
pub type BnBatchStats = BTreeMap<String, (Vec<f32>, Vec<f32>)>;

/// All values computed in one pass.
#[derive(Debug, Default)]
pub struct Trace {
    pub values: HashMap<String, Tensor>,
    pub bn_stats: BnBatchStats,
}

impl Trace {
    pub fn value(&self, id: &str) -> Result<&Tensor> {
        self.values.get(id).ok_or_else(|| Error::DanglingReference {
            node: "<trace>".into(),
            target: id.into(),
        })
    }
}

/// Called with `(fake-quant id, tensor it quantizes)`; weight quantizers
/// receive the effective weight of their layer.
pub type Observe<'a> = &'a mut dyn FnMut(&str, &Tensor) -> Result<()>;

/// Ids of fake-quant nodes without parameters.
pub fn uncalibrated(g: &Graph) -> Vec<String> {
    g.fake_quant_nodes()
        .filter(|(_, a)| a.qparams.is_none())
        .map(|(n, _)| n.id.clone())
        .collect()
}

/// Quantizer parameters of value `id`, when it is an activation quantizer or
/// a concat over one shared quantizer.
pub fn value_qparams(g: &Graph, id: &str) -> Option<Arc<QParams>> {
    let n = g.node(id)?;
    match &n.op {
        Op::FakeQuant(a) if a.role == FqRole::Activation => a.qparams.clone(),
        Op::Concat { .. } => {
            let first = value_qparams(g, &n.inputs[0])?;
            n.inputs[1..]
                .iter()
                .all(|i| value_qparams(g, i).is_some_and(|q| Arc::ptr_eq(&q, &first)))
                .then_some(first)
        }
        _ => None,
    }
}

/// `tanh(w) / max|tanh(w)|`; all-zero weights pass through unchanged.
pub fn dorefa_transform(w: &Tensor) -> Tensor {
    let t = w.map(f32::tanh);
    let m = t.abs_max();
    if m > 0.0 {
        t.map(|v| v / m)
    } else {
        w.clone()
    }
}

/// Whether the weight quantizer of a layer applies the DoReFa transform.
pub fn uses_weight_transform(kernel: &Kernel) -> bool {
    matches!(kernel, Kernel::Dorefa | Kernel::Pact { .. })
}

/// Inference-time (weight, bias) of a layer before weight quantization,
/// including the DoReFa transform when its weight quantizer asks for it.
pub fn effective_weight(g: &Graph, node: &Node, attrs: &LayerAttrs) -> Result<(Tensor, Tensor)> {
    let (w, b) = inference_affine(g, attrs)?;
    match g.weight_quant(node) {
        Some((_, fq)) if uses_weight_transform(&fq.kernel) => Ok((dorefa_transform(&w), b)),
        _ => Ok((w, b)),
    }
}

/// Bias rounded onto the `s_w·s_x` grid.
pub fn rounded_bias(b: &Tensor, wq: &QParams, s_x: f32) -> Tensor {
    let d: Vec<f32> = b
        .data()
        .iter()
        .enumerate()
        .map(|(o, &v)| {
            let s_w = wq.scales[if wq.len() == 1 { 0 } else { o }];
            let sb = s_w as f64 * s_x as f64;
            (quantize_bias(v, s_w, s_x) as f64 * sb) as f32
        })
        .collect();
    Tensor::from_vec(d)
}

/// Flattens `[N, C, 1, 1]` to `[N, C]` for linear layers.
pub fn linear_input(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 4 && x.shape()[2] == 1 && x.shape()[3] == 1 {
        x.reshape(vec![x.shape()[0], x.shape()[1]])
    } else {
        Ok(x.clone())
    }
}

pub(crate) fn apply_layer(attrs: &LayerAttrs, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match attrs.conv {
        Some(p) => ops::conv2d(x, w, b, p),
        None => ops::linear(&linear_input(x)?, w, b),
    }
}

fn fq_qparams<'a>(node: &Node, qp: &'a Option<Arc<QParams>>) -> Result<&'a QParams> {
    qp.as_deref()
        .ok_or_else(|| Error::CalibrationRequired(vec![node.id.clone()]))
}

fn normalize_with(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f32], var: &[f32], eps: f32) -> Result<Tensor> {
    Ok(ops::batchnorm(
        x,
        gamma,
        beta,
        &Tensor::from_vec(mean.to_vec()),
        &Tensor::from_vec(var.to_vec()),
        eps,
        ops::BatchNormMode::Infer,
    )?
    .output)
}

struct Pass<'g, 'o> {
    g: &'g Graph,
    opts: EvalOptions,
    observe: Option<Observe<'o>>,
    trace: Trace,
}

impl Pass<'_, '_> {
    fn get(&self, id: &str) -> Result<&Tensor> {
        self.trace.value(id)
    }

    fn layer(&mut self, node: &Node, attrs: &LayerAttrs) -> Result<Tensor> {
        let g = self.g;
        let x = self.get(&node.inputs[0])?.clone();
        let (w_eff, b_eff) = effective_weight(g, node, attrs)?;
        if let (Some(obs), Some((wn, _))) = (self.observe.as_mut(), g.weight_quant(node)) {
            obs(&wn.id, &w_eff)?;
        }
        let wfq = match g.weight_quant(node) {
            Some((wn, fq)) if self.opts.quantize => Some((fq_qparams(wn, &fq.qparams)?, fq.scheme.granularity)),
            _ => None,
        };
        let quant_w = |w: &Tensor| -> Result<Tensor> {
            match wfq {
                Some((qp, gran)) => fake_quantize(w, qp, gran),
                None => Ok(w.clone()),
            }
        };

        if let (true, Some(bn)) = (self.opts.batch_stats, &attrs.bn) {
            // Pre-BN response in the strategy-4 layout: conv(x, q(w·c)) / c + b.
            let gamma = g.param(&bn.gamma)?;
            let c = bn_scale(gamma, g.param(&bn.var)?, bn.eps)?;
            let w = g.param(&attrs.weight)?;
            let mut wc = mul_channel(w, &c, 0)?;
            if let Some((_, fq)) = g.weight_quant(node) {
                if uses_weight_transform(&fq.kernel) {
                    wc = dorefa_transform(&wc);
                }
            }
            let y = apply_layer(attrs, &x, &quant_w(&wc)?, None)?;
            let inv = Tensor::from_vec(c.data().iter().map(|v| 1.0 / v).collect());
            let mut pre = mul_channel(&y, &inv, 1)?;
            if let Some(b) = &attrs.bias {
                pre = ops::add_channel(&pre, g.param(b)?, 1)?;
            }
            let (mean, var) = ops::channel_stats(&pre)?;
            let out = normalize_with(&pre, gamma, g.param(&bn.beta)?, &mean, &var, bn.eps)?;
            self.trace.bn_stats.insert(node.id.clone(), (mean, var));
            return Ok(out);
        }

        let w_q = quant_w(&w_eff)?;
        let b = match (wfq, attrs.quant_bias) {
            (Some((qp, _)), true) => match value_qparams(g, &node.inputs[0]) {
                Some(xq) => rounded_bias(&b_eff, qp, xq.scale()),
                None => b_eff,
            },
            _ => b_eff,
        };
        apply_layer(attrs, &x, &w_q, Some(&b))
    }

    fn node(&mut self, node: &Node) -> Result<Tensor> {
        let g = self.g;
        Ok(match &node.op {
            Op::Input { .. } => unreachable!("inputs are bound before the pass"),
            Op::Conv2d(a) | Op::Linear(a) => self.layer(node, a)?,
            Op::Bn(a) => {
                let x = self.get(&node.inputs[0])?;
                let (gamma, beta) = (g.param(&a.gamma)?, g.param(&a.beta)?);
                if self.opts.batch_stats {
                    let (mean, var) = ops::channel_stats(x)?;
                    let out = normalize_with(x, gamma, beta, &mean, &var, a.eps)?;
                    self.trace.bn_stats.insert(node.id.clone(), (mean, var));
                    out
                } else {
                    let (m, v) = (g.param(&a.mean)?, g.param(&a.var)?);
                    normalize_with(x, gamma, beta, m.data(), v.data(), a.eps)?
                }
            }
            Op::Relu => ops::relu(self.get(&node.inputs[0])?),
            Op::Relu6 => ops::relu6(self.get(&node.inputs[0])?),
            Op::Add { .. } => ops::add(self.get(&node.inputs[0])?, self.get(&node.inputs[1])?)?,
            Op::Concat { axis } => {
                let vals: Vec<&Tensor> = node.inputs.iter().map(|i| self.get(i)).collect::<Result<_>>()?;
                ops::concat(&vals, *axis)?
            }
            Op::Gap => ops::global_avg_pool(self.get(&node.inputs[0])?)?,
            Op::FakeQuant(a) => match a.role {
                // Weight quantizers act inside their layer.
                FqRole::Weight => Tensor::scalar(0.0),
                FqRole::Activation => {
                    let x = self.get(&node.inputs[0])?.clone();
                    if let Some(obs) = self.observe.as_mut() {
                        obs(&node.id, &x)?;
                    }
                    if self.opts.quantize {
                        fake_quantize(&x, fq_qparams(node, &a.qparams)?, Granularity::PerTensor)?
                    } else {
                        x
                    }
                }
            },
        })
    }
}

/// Runs every node of `g` on `inputs` (one tensor per graph input).
pub fn evaluate(g: &Graph, inputs: &[Tensor], opts: EvalOptions, observe: Option<Observe<'_>>) -> Result<Trace> {
    if inputs.len() != g.inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "graph has {} inputs, {} tensors given",
            g.inputs.len(),
            inputs.len()
        )));
    }
    if opts.quantize {
        let missing = uncalibrated(g);
        if !missing.is_empty() {
            return Err(Error::CalibrationRequired(missing));
        }
    }
    let mut pass = Pass {
        g,
        opts,
        observe,
        trace: Trace::default(),
    };
    for (id, t) in g.inputs.iter().zip(inputs) {
        if let Some(i) = t.first_non_finite() {
            return Err(Error::NumericInput { op: "infer", index: i });
        }
        if let Some(Op::Input { shape: Some(s) }) = g.node(id).map(|n| &n.op) {
            if s.len() != t.rank() || s[1..] != t.shape()[1..] {
                return Err(Error::shape(
                    "infer",
                    format!("input `{id}` expects shape {s:?}, got {:?}", t.shape()),
                ));
            }
        }
        pass.trace.values.insert(id.clone(), t.clone());
    }
    for node in &g.nodes {
        if matches!(node.op, Op::Input { .. }) {
            continue;
        }
        let v = pass.node(node)?;
        pass.trace.values.insert(node.id.clone(), v);
    }
    Ok(pass.trace)
}

/// Graph outputs. Fake-quantize nodes are applied when present.
pub fn infer(g: &Graph, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let opts = if g.has_fake_quant() {
        EvalOptions::QUANT
    } else {
        EvalOptions::FLOAT
    };
    let trace = evaluate(g, inputs, opts, None)?;
    g.outputs.iter().map(|o| trace.value(o).cloned()).collect()
}

/// Graph outputs with every quantizer treated as identity.
pub fn infer_float(g: &Graph, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let trace = evaluate(g, inputs, EvalOptions::FLOAT, None)?;
    g.outputs.iter().map(|o| trace.value(o).cloned()).collect()
}
