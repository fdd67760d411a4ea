//! Batch-norm folding.
//!
//! ```text
//! w_fold = w · γ / √(σ² + ε)        b_fold = β + (b − μ) · γ / √(σ² + ε)
//! ```
//!
//! Strategy 0 rewrites the layer parameters and removes the BN node. Strategies
//! 1–4 keep the BN parameters on the layer (`LayerAttrs::bn`) so training can
//! apply the strategy's schedule; [`to_inference_form`] converts them back.

use super::ir::{FusedBn, Graph, LayerAttrs, Node, Op};
use crate::error::{Error, Result};
use crate::tensor::ops::mul_channel;
use crate::tensor::Tensor;

pub const STRATEGIES: [u8; 5] = [0, 1, 2, 3, 4];

/// Per-channel `γ / √(σ² + ε)`.
pub fn bn_scale(gamma: &Tensor, var: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("BN eps must be >= 0, got {eps}")));
    }
    let mut out = Vec::with_capacity(gamma.numel());
    for (ch, (&g, &v)) in gamma.data().iter().zip(var.data()).enumerate() {
        let d = v + eps;
        if !(d > 0.0) {
            return Err(Error::DegenerateInput {
                op: "fold_bn",
                detail: format!("channel {ch}: variance + eps = {d}"),
            });
        }
        out.push(g / d.sqrt());
    }
    Ok(Tensor::from_vec(out))
}

fn bias_or_zero(b: Option<&Tensor>, channels: usize) -> Tensor {
    b.cloned().unwrap_or_else(|| Tensor::zeros(&[channels]))
}

/// Folded (weight, bias) by the direct formula.
pub fn fold_affine(
    w: &Tensor,
    b: Option<&Tensor>,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<(Tensor, Tensor)> {
    let c = bn_scale(gamma, var, eps)?;
    let wf = mul_channel(w, &c, 0)?;
    let b = bias_or_zero(b, c.numel());
    let bf: Vec<f32> = (0..c.numel())
        .map(|o| beta.data()[o] + (b.data()[o] - mean.data()[o]) * c.data()[o])
        .collect();
    Ok((wf, Tensor::from_vec(bf)))
}

struct BnTensors<'a> {
    gamma: &'a Tensor,
    beta: &'a Tensor,
    mean: &'a Tensor,
    var: &'a Tensor,
}

fn fused_tensors<'a>(g: &'a Graph, bn: &FusedBn) -> Result<BnTensors<'a>> {
    Ok(BnTensors {
        gamma: g.param(&bn.gamma)?,
        beta: g.param(&bn.beta)?,
        mean: g.param(&bn.mean)?,
        var: g.param(&bn.var)?,
    })
}

/// Inference-time (weight, bias) of a layer. Fused layers follow their own
/// strategy's dataflow with batch statistics replaced by running statistics.
pub fn inference_affine(g: &Graph, attrs: &LayerAttrs) -> Result<(Tensor, Tensor)> {
    let w = g.param(&attrs.weight)?;
    let b = attrs.bias.as_ref().map(|n| g.param(n)).transpose()?;
    let Some(bn) = &attrs.bn else {
        return Ok((w.clone(), bias_or_zero(b, w.shape()[0])));
    };
    let t = fused_tensors(g, bn)?;
    let ch = w.shape()[0];
    let b = bias_or_zero(b, ch);
    let sigma: Vec<f32> = t
        .var
        .data()
        .iter()
        .map(|&v| (v + bn.eps).sqrt())
        .collect();
    // Validates eps and the denominators.
    bn_scale(t.gamma, t.var, bn.eps)?;
    let gd = t.gamma.data();
    let (md, bd) = (t.mean.data(), t.beta.data());
    match bn.strategy {
        1 => fold_affine(w, Some(&b), t.gamma, t.beta, t.mean, t.var, bn.eps),
        2 => {
            // Fold of "batch" statistics, which are the running ones at inference.
            let c: Vec<f32> = (0..ch).map(|o| gd[o] / sigma[o]).collect();
            let wf = mul_channel(w, &Tensor::from_vec(c.clone()), 0)?;
            let bf = (0..ch).map(|o| bd[o] - md[o] * c[o] + b.data()[o] * c[o]).collect();
            Ok((wf, Tensor::from_vec(bf)))
        }
        3 => {
            // Running-stat fold times the σ_running / σ_batch correction (= 1).
            let c: Vec<f32> = (0..ch).map(|o| gd[o] / sigma[o]).collect();
            let (running, batch) = (&sigma, &sigma);
            let corr: Vec<f32> = running.iter().zip(batch.iter()).map(|(r, b)| r / b).collect();
            let wq = mul_channel(w, &Tensor::from_vec(c.clone()), 0)?;
            let wf = mul_channel(&wq, &Tensor::from_vec(corr), 0)?;
            let bf = (0..ch).map(|o| bd[o] + (b.data()[o] - md[o]) * c[o]).collect();
            Ok((wf, Tensor::from_vec(bf)))
        }
        4 => {
            // conv(x, w·c) / c + b, then the explicit BN: (· − μ)·c + β.
            let c: Vec<f32> = (0..ch).map(|o| gd[o] / sigma[o]).collect();
            let wq = mul_channel(w, &Tensor::from_vec(c.clone()), 0)?;
            let unscale: Vec<f32> = c.iter().map(|v| 1.0 / v).collect();
            let inner = mul_channel(&wq, &Tensor::from_vec(unscale), 0)?;
            let wf = mul_channel(&inner, &Tensor::from_vec(c.clone()), 0)?;
            let bf = (0..ch).map(|o| (b.data()[o] - md[o]) * c[o] + bd[o]).collect();
            Ok((wf, Tensor::from_vec(bf)))
        }
        s => Err(Error::InvalidArgument(format!("unknown fold strategy {s}"))),
    }
}

/// Finds the layer feeding BN node `bn`, requiring direct adjacency and that
/// the layer output has no other reader.
fn bn_producer(g: &Graph, bn: &Node) -> Result<usize> {
    let src = &bn.inputs[0];
    let li = g
        .index_of(src)
        .ok_or_else(|| Error::BatchNormWithoutConv(bn.id.clone()))?;
    let layer = &g.nodes[li];
    match layer.op.layer() {
        Some(a) if a.bn.is_none() => {}
        _ => return Err(Error::BatchNormWithoutConv(bn.id.clone())),
    }
    if g.consumers(src).len() != 1 || g.outputs.contains(src) {
        return Err(Error::BatchNormWithoutConv(bn.id.clone()));
    }
    Ok(li)
}

fn prune_params(g: &mut Graph) {
    let mut used = std::collections::HashSet::new();
    for n in &g.nodes {
        match &n.op {
            Op::Conv2d(a) | Op::Linear(a) => {
                used.insert(a.weight.clone());
                used.extend(a.bias.clone());
                if let Some(bn) = &a.bn {
                    used.extend([bn.gamma.clone(), bn.beta.clone(), bn.mean.clone(), bn.var.clone()]);
                }
            }
            Op::Bn(a) => {
                used.extend([a.gamma.clone(), a.beta.clone(), a.mean.clone(), a.var.clone()]);
            }
            Op::FakeQuant(a) => used.extend(a.param.clone()),
            _ => {}
        }
    }
    g.params.retain(|k, _| used.contains(k));
}

pub fn fold_bn(g: &Graph, strategy: u8) -> Result<Graph> {
    if !STRATEGIES.contains(&strategy) {
        return Err(Error::InvalidArgument(format!(
            "fold strategy must be 0..=4, got {strategy}"
        )));
    }
    let mut out = g.clone();
    while let Some(bi) = out.nodes.iter().position(|n| matches!(n.op, Op::Bn(_))) {
        let bn_node = out.nodes[bi].clone();
        let Op::Bn(bn) = &bn_node.op else { unreachable!() };
        let li = bn_producer(&out, &bn_node)?;
        bn_scale(out.param(&bn.gamma)?, out.param(&bn.var)?, bn.eps)?;
        let layer_id = out.nodes[li].id.clone();
        let fused = FusedBn {
            gamma: bn.gamma.clone(),
            beta: bn.beta.clone(),
            mean: bn.mean.clone(),
            var: bn.var.clone(),
            eps: bn.eps,
            momentum: bn.momentum,
            strategy,
        };
        if strategy == 0 {
            let attrs = out.nodes[li].op.layer().expect("layer").clone();
            let w = out.param(&attrs.weight)?;
            let b = attrs.bias.as_ref().map(|n| out.param(n)).transpose()?;
            let t = fused_tensors(&out, &fused)?;
            let (wf, bf) = fold_affine(w, b, t.gamma, t.beta, t.mean, t.var, bn.eps)?;
            let bias_name = attrs.bias.clone().unwrap_or_else(|| format!("{layer_id}.bias"));
            out.params.insert(attrs.weight.clone(), wf);
            out.params.insert(bias_name.clone(), bf);
            out.nodes[li].op.layer_mut().expect("layer").bias = Some(bias_name);
        } else {
            out.nodes[li].op.layer_mut().expect("layer").bn = Some(fused);
        }
        out.nodes.remove(bi);
        out.redirect(&bn_node.id, &layer_id);
    }
    prune_params(&mut out);
    out.validate()?;
    Ok(out)
}

/// Replaces every fused layer by plain parameters and rejects standalone BN.
pub fn to_inference_form(g: &Graph) -> Result<Graph> {
    if let Some(n) = g.nodes.iter().find(|n| matches!(n.op, Op::Bn(_))) {
        return Err(Error::UnfoldedBatchNorm(n.id.clone()));
    }
    let mut out = g.clone();
    for i in 0..out.nodes.len() {
        let Some(attrs) = out.nodes[i].op.layer().cloned() else { continue };
        if attrs.bn.is_none() {
            continue;
        }
        let (wf, bf) = inference_affine(&out, &attrs)?;
        let id = out.nodes[i].id.clone();
        let bias_name = attrs.bias.clone().unwrap_or_else(|| format!("{id}.bias"));
        out.params.insert(attrs.weight.clone(), wf);
        out.params.insert(bias_name.clone(), bf);
        let l = out.nodes[i].op.layer_mut().expect("layer");
        l.bias = Some(bias_name);
        l.bn = None;
    }
    prune_params(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let w = Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap();
        let (wf, bf) = fold_affine(
            &w,
            Some(&Tensor::from_vec(vec![0.0])),
            &Tensor::from_vec(vec![2.0]),
            &Tensor::from_vec(vec![0.5]),
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_vec(vec![4.0]),
            0.0,
        )
        .unwrap();
        assert_eq!(wf.data(), &[0.7]);
        assert_eq!(bf.data(), &[-0.5]);
    }

    #[test]
    fn negative_eps_is_rejected() {
        let one = Tensor::from_vec(vec![1.0]);
        assert!(bn_scale(&one, &one, -1e-3).is_err());
        assert!(bn_scale(&one, &Tensor::from_vec(vec![0.0]), 0.0).is_err());
    }
}
