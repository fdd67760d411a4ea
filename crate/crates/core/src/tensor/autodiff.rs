//! Tape-based reverse-mode differentiation over the operator set in [`super::ops`].
//!
//! Each recorded node owns its forward value. `backward` walks the nodes in
//! strict reverse recording order, so a node's gradient is complete before it
//! is propagated to its inputs.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, Conv2dParams};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Vector-Jacobian product for a custom op: maps the upstream gradient to one
/// optional gradient per input (`None` means no gradient flows there).
pub type CustomBackward = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>> + Send + Sync>;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: Conv2dParams,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Var),
    Relu6(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulChannel {
        x: Var,
        v: Var,
        axis: usize,
    },
    DivChannel {
        x: Var,
        v: Var,
        axis: usize,
    },
    AddChannel {
        x: Var,
        v: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gap(Var),
    Sum(Var),
    Tanh(Var),
    Scale(Var, f32),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).is_ok() && self.nodes[v.index].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    fn check_all(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.check(v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: Conv2dParams) -> Result<Var> {
        self.check_all(&[x, w])?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let y = ops::conv2d(self.val(x), self.val(w), b.map(|b| self.val(b)), params)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, params }, &deps))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_all(&[x, w])?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let y = ops::linear(self.val(x), self.val(w), b.map(|b| self.val(b)))?;
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &deps))
    }

    /// Batch norm normalizing with batch statistics; returns the output and
    /// the (mean, biased variance) used.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        self.check_all(&[x, gamma, beta])?;
        let (mean, var) = ops::channel_stats(self.val(x))?;
        let y = self.normalize(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((y, mean, var))
    }

    /// Batch norm with fixed statistics.
    pub fn batchnorm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        self.check_all(&[x, gamma, beta])?;
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        batch_stats: bool,
    ) -> Result<Var> {
        let y = ops::batchnorm(
            self.val(x),
            self.val(gamma),
            self.val(beta),
            &Tensor::from_vec(mean.to_vec()),
            &Tensor::from_vec(var.to_vec()),
            eps,
            ops::BatchNormMode::Infer,
        )?
        .output;
        let inv_std = ops::inv_std(var, eps)?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = ops::relu(self.val(x));
        Ok(self.push(y, Op::Relu(x), &[x]))
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = ops::relu6(self.val(x));
        Ok(self.push(y, Op::Relu6(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_all(&[a, b])?;
        let y = ops::add(self.val(a), self.val(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_all(&[a, b])?;
        let y = self.val(a).zip_map(self.val(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_all(&[a, b])?;
        let y = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn mul_channel(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_all(&[x, v])?;
        let y = ops::mul_channel(self.val(x), self.val(v), axis)?;
        Ok(self.push(y, Op::MulChannel { x, v, axis }, &[x, v]))
    }

    pub fn div_channel(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_all(&[x, v])?;
        let recip = self.val(v).map(|s| 1.0 / s);
        let y = ops::mul_channel(self.val(x), &recip, axis)?;
        Ok(self.push(y, Op::DivChannel { x, v, axis }, &[x, v]))
    }

    pub fn add_channel(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_all(&[x, v])?;
        let y = ops::add_channel(self.val(x), self.val(v), axis)?;
        Ok(self.push(y, Op::AddChannel { x, v, axis }, &[x, v]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.check_all(inputs)?;
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.val(v)).collect();
        let y = ops::concat(&vals, axis)?;
        Ok(self.push(
            y,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = ops::global_avg_pool(self.val(x))?;
        Ok(self.push(y, Op::Gap(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = Tensor::scalar(self.val(x).sum());
        Ok(self.push(y, Op::Sum(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.val(x).map(f32::tanh);
        Ok(self.push(y, Op::Tanh(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.check(x)?;
        let y = self.val(x).map(|v| v * c);
        Ok(self.push(y, Op::Scale(x, c), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let y = self.val(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Mean softmax cross-entropy over the batch; yields a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(self.val(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Result<Var> {
        self.check_all(inputs)?;
        Ok(self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        ))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            for (v, g) in self.vjp(node, &up)? {
                if !self.nodes[v.index].requires_grad {
                    continue;
                }
                accumulate(&mut grads[v.index], g)?;
            }
            grads[i] = Some(up);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn vjp(&self, node: &Node, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, params } => {
                let (dx, dw, db) = ops::conv2d_backward(self.val(*x), self.val(*w), up, *params)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(self.val(*x), self.val(*w), up)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (dx, dg, db) = ops::batchnorm_backward(
                    self.val(*x),
                    self.val(*gamma),
                    mean,
                    inv_std,
                    up,
                    *batch_stats,
                )?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(x) => {
                let g = self.val(*x).zip_map(up, |v, u| if v > 0.0 { u } else { 0.0 })?;
                vec![(*x, g)]
            }
            Op::Relu6(x) => {
                let g = self
                    .val(*x)
                    .zip_map(up, |v, u| if v > 0.0 && v < 6.0 { u } else { 0.0 })?;
                vec![(*x, g)]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.map(|u| -u))],
            Op::Mul(a, b) => vec![
                (*a, up.zip_map(self.val(*b), |u, y| u * y)?),
                (*b, up.zip_map(self.val(*a), |u, x| u * x)?),
            ],
            Op::MulChannel { x, v, axis } => {
                let dx = ops::mul_channel(up, self.val(*v), *axis)?;
                let prod = up.zip_map(self.val(*x), |u, a| u * a)?;
                let dv = ops::reduce_to_channel(&prod, *axis)?.reshape(self.val(*v).shape().to_vec())?;
                vec![(*x, dx), (*v, dv)]
            }
            Op::DivChannel { x, v, axis } => {
                let vv = self.val(*v);
                let recip = vv.map(|s| 1.0 / s);
                let dx = ops::mul_channel(up, &recip, *axis)?;
                let prod = up.zip_map(self.val(*x), |u, a| u * a)?;
                let red = ops::reduce_to_channel(&prod, *axis)?;
                let dv = red
                    .zip_map(&vv.reshape(vec![vv.numel()])?, |r, s| -r / (s * s))?
                    .reshape(vv.shape().to_vec())?;
                vec![(*x, dx), (*v, dv)]
            }
            Op::AddChannel { v, x, axis } => {
                let dv = ops::reduce_to_channel(up, *axis)?.reshape(self.val(*v).shape().to_vec())?;
                vec![(*x, up.clone()), (*v, dv)]
            }
            Op::Concat { inputs, axis } => {
                let extents: Vec<usize> = inputs.iter().map(|v| self.val(*v).shape()[*axis]).collect();
                let parts = ops::concat_backward(up, &extents, *axis)?;
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Gap(x) => vec![(*x, ops::global_avg_pool_backward(self.val(*x).shape(), up)?)],
            Op::Sum(x) => {
                let u = up.data()[0];
                vec![(*x, Tensor::full(self.val(*x).shape(), u))]
            }
            Op::Tanh(x) => {
                let g = node.value.zip_map(up, |y, u| u * (1.0 - y * y))?;
                vec![(*x, g)]
            }
            Op::Scale(x, c) => vec![(*x, up.map(|u| u * c))],
            Op::Reshape(x) => vec![(*x, up.reshape(self.val(*x).shape().to_vec())?)],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = probs.shape()[1];
                let n = labels.len() as f32;
                let u = up.data()[0];
                let mut g = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= 1.0;
                }
                for v in &mut g {
                    *v *= u / n;
                }
                vec![(*logits, Tensor::new(probs.shape().to_vec(), g)?)]
            }
            Op::Custom { inputs, backward } => {
                let gs = backward(up);
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom backward returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                let mut out = Vec::new();
                for (v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        if g.shape() != self.val(*v).shape() {
                            return Err(Error::shape(
                                "custom_backward",
                                format!("gradient {:?} for input {:?}", g.shape(), self.val(*v).shape()),
                            ));
                        }
                        out.push((*v, g));
                    }
                }
                out
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("gradient shapes {:?} and {:?} differ", acc.shape(), g.shape()),
                ));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn relu_gates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(Tensor::zeros(&[1]));
        assert!(matches!(b.backward(x), Err(Error::NotOnTape)));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0]));
        let c = tape.constant(Tensor::from_vec(vec![2.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
        assert!(g.get(c).is_none());
    }
}
