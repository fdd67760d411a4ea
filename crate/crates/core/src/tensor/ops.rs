//! Forward kernels and their vector-Jacobian products.
//!
//! All reductions accumulate in plain `f32` in row-major order over the
//! reduction axes, so identical inputs give bit-identical outputs.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dParams {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: [1, 1],
            padding: [0, 0],
            groups: 1,
        }
    }
}

/// Resolved geometry of one conv2d invocation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub cin_per_group: usize,
    pub cout_per_group: usize,
    pub params: Conv2dParams,
}

impl ConvGeometry {
    pub(crate) fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        params: Conv2dParams,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be NCHW, got rank {}", input_shape.len()),
            ));
        }
        if weight_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be OIHW, got rank {}", weight_shape.len()),
            ));
        }
        let [n, c_in, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
        let [c_out, cin_g, kh, kw] =
            [weight_shape[0], weight_shape[1], weight_shape[2], weight_shape[3]];
        let groups = params.groups;
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("axes C_in={c_in}, C_out={c_out} not divisible by groups={groups}"),
            ));
        }
        if c_in / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input axis 1 ({c_in}) / groups ({groups}) != weight axis 1 ({cin_g})"
                ),
            ));
        }
        if params.stride[0] == 0 || params.stride[1] == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let hp = h + 2 * params.padding[0];
        let wp = w + 2 * params.padding[1];
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded spatial axes ({hp}, {wp}) smaller than kernel ({kh}, {kw})"),
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out: (hp - kh) / params.stride[0] + 1,
            w_out: (wp - kw) / params.stride[1] + 1,
            cin_per_group: cin_g,
            cout_per_group: c_out / groups,
            params,
        })
    }

    pub(crate) fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.h_out, self.w_out]
    }

    /// Input coordinate for output position `o` and kernel tap `k` along one axis.
    #[inline]
    pub(crate) fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    params: Conv2dParams,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), params)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} != [{}]", b.shape(), g.c_out),
            ));
        }
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0f32; g.n * g.c_out * g.h_out * g.w_out];
    let [sh, sw] = params.stride;
    let [ph, pw] = params.padding;
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / g.cout_per_group;
            let b = bias.map_or(0.0, |b| b.data()[o]);
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = 0.0f32;
                    for ic in 0..g.cin_per_group {
                        let c = grp * g.cin_per_group + ic;
                        for ky in 0..g.kh {
                            let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, g.h) else {
                                continue;
                            };
                            for kx in 0..g.kw {
                                let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, g.w) else {
                                    continue;
                                };
                                let xv = x[((n * g.c_in + c) * g.h + iy) * g.w + ix];
                                let wv = wt[((o * g.cin_per_group + ic) * g.kh + ky) * g.kw + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    out[((n * g.c_out + o) * g.h_out + oy) * g.w_out + ox] = acc + b;
                }
            }
        }
    }
    Tensor::new(g.output_shape(), out)
}

/// Gradients of conv2d with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
    params: Conv2dParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), params)?;
    if upstream.shape() != g.output_shape().as_slice() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?} != output {:?}", upstream.shape(), g.output_shape()),
        ));
    }
    let x = input.data();
    let wt = weight.data();
    let dy = upstream.data();
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; wt.len()];
    let mut db = vec![0.0f32; g.c_out];
    let [sh, sw] = params.stride;
    let [ph, pw] = params.padding;
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / g.cout_per_group;
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let d = dy[((n * g.c_out + o) * g.h_out + oy) * g.w_out + ox];
                    db[o] += d;
                    for ic in 0..g.cin_per_group {
                        let c = grp * g.cin_per_group + ic;
                        for ky in 0..g.kh {
                            let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, g.h) else {
                                continue;
                            };
                            for kx in 0..g.kw {
                                let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, g.w) else {
                                    continue;
                                };
                                let xi = ((n * g.c_in + c) * g.h + iy) * g.w + ix;
                                let wi = ((o * g.cin_per_group + ic) * g.kh + ky) * g.kw + kx;
                                dx[xi] += wt[wi] * d;
                                dw[wi] += x[xi] * d;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![g.c_out], db)?,
    ))
}

pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, k, m) = linear_dims(input, weight)?;
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} != [{m}]", b.shape()),
            ));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0f32;
            for t in 0..k {
                acc += x[i * k + t] * w[j * k + t];
            }
            out[i * m + j] = acc + bias.map_or(0.0, |b| b.data()[j]);
        }
    }
    Tensor::new(vec![n, m], out)
}

fn linear_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!(
                "expected N×K input and M×K weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    let (n, k) = (input.shape()[0], input.shape()[1]);
    let (m, k2) = (weight.shape()[0], weight.shape()[1]);
    if k != k2 {
        return Err(Error::shape(
            "linear",
            format!("input axis 1 ({k}) != weight axis 1 ({k2})"),
        ));
    }
    Ok((n, k, m))
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, k, m) = linear_dims(input, weight)?;
    let x = input.data();
    let w = weight.data();
    let dy = upstream.data();
    let mut dx = vec![0.0f32; n * k];
    let mut dw = vec![0.0f32; m * k];
    let mut db = vec![0.0f32; m];
    for i in 0..n {
        for j in 0..m {
            let d = dy[i * m + j];
            db[j] += d;
            for t in 0..k {
                dx[i * k + t] += d * w[j * k + t];
                dw[j * k + t] += d * x[i * k + t];
            }
        }
    }
    Ok((
        Tensor::new(vec![n, k], dx)?,
        Tensor::new(vec![m, k], dw)?,
        Tensor::new(vec![m], db)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update running statistics.
    Train { momentum: f32 },
    /// Normalize with running statistics.
    Infer,
}

#[derive(Debug, Clone)]
pub struct BatchNormOutput {
    pub output: Tensor,
    /// Statistics used for normalization (running stats in infer mode).
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Channel layout of an `N × C × …` tensor: (N, C, elements per channel per sample).
pub(crate) fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel biased mean and variance over the N and spatial axes.
pub(crate) fn channel_stats(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (n, c, inner) = channel_layout("batchnorm", x.shape())?;
    let count = n * inner;
    if count == 0 {
        return Err(Error::DegenerateInput {
            op: "batchnorm",
            detail: "zero elements per channel".into(),
        });
    }
    let d = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for v in &d[base..base + inner] {
                s += f64::from(*v);
            }
        }
        let m = (s / count as f64) as f32;
        let mut sq = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for v in &d[base..base + inner] {
                let dev = f64::from(*v - m);
                sq += dev * dev;
            }
        }
        mean[ch] = m;
        var[ch] = (sq / count as f64) as f32;
    }
    Ok((mean, var))
}

pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
    mode: BatchNormMode,
) -> Result<BatchNormOutput> {
    let (n, c, inner) = channel_layout("batchnorm", input.shape())?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!("{name} shape {:?} != [{c}]", t.shape()),
            ));
        }
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("batchnorm eps must be >= 0, got {eps}")));
    }
    let (mean, var, new_rm, new_rv) = match mode {
        BatchNormMode::Infer => (
            running_mean.data().to_vec(),
            running_var.data().to_vec(),
            running_mean.data().to_vec(),
            running_var.data().to_vec(),
        ),
        BatchNormMode::Train { momentum } => {
            let (m, v) = channel_stats(input)?;
            let rm = running_mean
                .data()
                .iter()
                .zip(&m)
                .map(|(&r, &b)| (1.0 - momentum) * r + momentum * b)
                .collect();
            let rv = running_var
                .data()
                .iter()
                .zip(&v)
                .map(|(&r, &b)| (1.0 - momentum) * r + momentum * b)
                .collect();
            (m, v, rm, rv)
        }
    };
    let inv_std = inv_std(&var, eps)?;
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let (g, be, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in base..base + inner {
                out[i] = g * ((x[i] - m) * is) + be;
            }
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        batch_mean: Tensor::from_vec(mean),
        batch_var: Tensor::from_vec(var),
        running_mean: Tensor::from_vec(new_rm),
        running_var: Tensor::from_vec(new_rv),
    })
}

pub(crate) fn inv_std(var: &[f32], eps: f32) -> Result<Vec<f32>> {
    var.iter()
        .enumerate()
        .map(|(ch, &v)| {
            let d = v + eps;
            if d > 0.0 {
                Ok(1.0 / d.sqrt())
            } else {
                Err(Error::DegenerateInput {
                    op: "batchnorm",
                    detail: format!("channel {ch}: variance + eps = {d}"),
                })
            }
        })
        .collect()
}

/// VJP of batch norm. `batch_stats` selects train-mode semantics, where the
/// mean and variance depend on the input.
pub(crate) fn batchnorm_backward(
    input: &Tensor,
    gamma: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    upstream: &Tensor,
    batch_stats: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, inner) = channel_layout("batchnorm_backward", input.shape())?;
    let x = input.data();
    let dy = upstream.data();
    let count = (n * inner) as f32;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (m, is, g) = (mean[ch], inv_std[ch], gamma.data()[ch]);
        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let xhat = (x[i] - m) * is;
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        for b in 0..n {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                dx[i] = if batch_stats {
                    let xhat = (x[i] - m) * is;
                    g * is / count * (count * dy[i] - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * is * dy[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Relu,
    Relu6,
    Add,
}

pub fn elementwise(kind: ElementwiseKind, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match kind {
        ElementwiseKind::Relu => Ok(relu(a)),
        ElementwiseKind::Relu6 => Ok(relu6(a)),
        ElementwiseKind::Add => {
            let b = b.ok_or_else(|| Error::InvalidArgument("add needs two operands".into()))?;
            add(a, b)
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu6(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 6.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    a.zip_map(b, |x, y| x + y)
}

pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} >= rank {rank}")));
    }
    for (i, t) in inputs.iter().enumerate() {
        if t.rank() != rank {
            return Err(Error::shape(
                "concat",
                format!("input {i} has rank {} != {rank}", t.rank()),
            ));
        }
        for ax in (0..rank).filter(|&ax| ax != axis) {
            if t.shape()[ax] != first.shape()[ax] {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "input {i} axis {ax} extent {} != {}",
                        t.shape()[ax],
                        first.shape()[ax]
                    ),
                ));
            }
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(shape, data)
}

/// Splits `upstream` back into the per-input pieces of a concat.
pub(crate) fn concat_backward(upstream: &Tensor, extents: &[usize], axis: usize) -> Result<Vec<Tensor>> {
    let shape = upstream.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total: usize = extents.iter().sum();
    let mut parts: Vec<Vec<f32>> = extents.iter().map(|e| Vec::with_capacity(outer * e * inner)).collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (p, &e) in parts.iter_mut().zip(extents) {
            p.extend_from_slice(&upstream.data()[offset..offset + e * inner]);
            offset += e * inner;
        }
    }
    parts
        .into_iter()
        .zip(extents)
        .map(|(p, &e)| {
            let mut s = shape.to_vec();
            s[axis] = e;
            Tensor::new(s, p)
        })
        .collect()
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("input must be NCHW, got {:?}", input.shape()),
        ));
    }
    let [n, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let hw = h * w;
    let out: Vec<f32> = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f32>() / hw as f32)
        .collect();
    Tensor::new(vec![n, c, 1, 1], out)
}

pub(crate) fn global_avg_pool_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let hw = input_shape[2] * input_shape[3];
    let mut dx = Vec::with_capacity(hw * upstream.numel());
    for &d in upstream.data() {
        dx.extend(std::iter::repeat_n(d / hw as f32, hw));
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Multiplies every slice along `axis` by the matching entry of `scale`.
pub fn mul_channel(x: &Tensor, scale: &Tensor, axis: usize) -> Result<Tensor> {
    channel_apply("mul_channel", x, scale, axis, |a, s| a * s)
}

/// Adds the matching entry of `offset` to every slice along `axis`.
pub fn add_channel(x: &Tensor, offset: &Tensor, axis: usize) -> Result<Tensor> {
    channel_apply("add_channel", x, offset, axis, |a, s| a + s)
}

fn channel_apply(
    op: &'static str,
    x: &Tensor,
    v: &Tensor,
    axis: usize,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let (outer, c, inner) = axis_layout(op, x.shape(), axis)?;
    if v.numel() != c {
        return Err(Error::shape(
            op,
            format!("vector of {} entries for axis {axis} of extent {c}", v.numel()),
        ));
    }
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let s = v.data()[ch];
            let base = (o * c + ch) * inner;
            for e in &mut out[base..base + inner] {
                *e = f(*e, s);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
pub(crate) fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Sums `x` over every axis except `axis`.
pub(crate) fn reduce_to_channel(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, c, inner) = axis_layout("reduce_to_channel", x.shape(), axis)?;
    let mut out = vec![0.0f32; c];
    for o in 0..outer {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (o * c + ch) * inner;
            for v in &x.data()[base..base + inner] {
                *acc += v;
            }
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Mean softmax cross-entropy of `logits` (N × classes) against `labels`.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let k = logits.shape()[1];
    let mut probs = vec![0.0f32; logits.numel()];
    let mut loss = 0.0f32;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!("label {label} >= {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * k + j] = e;
            z += e;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p /= z;
        }
        loss -= (probs[i * k + label]).max(f32::MIN_POSITIVE).ln();
    }
    Ok((loss / labels.len() as f32, Tensor::new(logits.shape().to_vec(), probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_scalar_product() {
        let y = conv2d(&t(&[1, 1, 1, 1], &[2.0]), &t(&[1, 1, 1, 1], &[3.0]), None, Conv2dParams::default()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv2d_sum_of_ones() {
        let y = conv2d(
            &Tensor::ones(&[1, 1, 3, 3]),
            &Tensor::ones(&[1, 1, 3, 3]),
            None,
            Conv2dParams::default(),
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_bad_groups() {
        let p = Conv2dParams { groups: 2, ..Default::default() };
        let err = conv2d(&Tensor::ones(&[1, 3, 4, 4]), &Tensor::ones(&[2, 1, 3, 3]), None, p).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(linear(&x, &eye, None).unwrap().data(), &[1.0, 2.0]);
        let y = linear(&x, &t(&[1, 2], &[3.0, 4.0]), Some(&t(&[1], &[1.0]))).unwrap();
        assert_eq!(y.data(), &[12.0]);
        assert!(linear(&x, &t(&[1, 3], &[1.0; 3]), None).is_err());
    }

    #[test]
    fn batchnorm_identity_in_infer_mode() {
        let x = t(&[1, 2, 1, 2], &[0.5, -1.0, 3.0, 2.0]);
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        let out = batchnorm(&x, &ones, &zeros, &zeros, &ones, 0.0, BatchNormMode::Infer).unwrap();
        assert_eq!(out.output, x);
    }

    #[test]
    fn batchnorm_constant_input_has_zero_variance() {
        let x = Tensor::full(&[2, 2, 2, 2], 0.1);
        let beta = t(&[2], &[0.25, -0.5]);
        let out = batchnorm(
            &x,
            &Tensor::ones(&[2]),
            &beta,
            &Tensor::zeros(&[2]),
            &Tensor::ones(&[2]),
            1e-5,
            BatchNormMode::Train { momentum: 0.1 },
        )
        .unwrap();
        assert_eq!(out.batch_var.data(), &[0.0, 0.0]);
        for (i, v) in out.output.data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(*v, beta.data()[ch]);
        }
        assert!((out.running_mean.data()[0] - 0.01).abs() < 1e-7);
        assert!((out.running_var.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn batchnorm_train_needs_positive_denominator() {
        let x = Tensor::full(&[2, 1, 1, 1], 1.0);
        let one = Tensor::ones(&[1]);
        let zero = Tensor::zeros(&[1]);
        let err = batchnorm(&x, &one, &zero, &zero, &one, 0.0, BatchNormMode::Train { momentum: 0.1 });
        assert!(matches!(err, Err(Error::DegenerateInput { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let x = t(&[2], &[-1.0, 2.0]);
        assert_eq!(elementwise(ElementwiseKind::Relu, &x, None).unwrap().data(), &[0.0, 2.0]);
        assert_eq!(
            elementwise(ElementwiseKind::Relu6, &t(&[1], &[7.0]), None).unwrap().data(),
            &[6.0]
        );
        let s = elementwise(ElementwiseKind::Add, &t(&[2], &[1.0, 2.0]), Some(&t(&[2], &[3.0, 4.0]))).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
        assert!(add(&t(&[2], &[1.0, 2.0]), &t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = t(&[1, 1], &[1.0]);
        let b = t(&[1, 1], &[2.0]);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[1.0, 2.0]);
        assert_eq!(concat(&[&a], 0).unwrap(), a);
        assert!(concat(&[&a, &t(&[1, 2], &[1.0, 2.0])], 0).is_err());
        assert!(concat(&[], 0).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let z = global_avg_pool(&Tensor::zeros(&[2, 3, 2, 2])).unwrap();
        assert_eq!(z.shape(), &[2, 3, 1, 1]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, p) = softmax_cross_entropy(&Tensor::zeros(&[2, 4]), &[0, 3]).unwrap();
        assert!((loss - 4.0f32.ln()).abs() < 1e-6);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
