//! Integer execution of lowered programs with checked INT32 arithmetic.

use std::collections::HashMap;

use super::{Cast, Domain, QOp, QuantizedGraph, RequantRecord};
use crate::error::{Error, Result};
use crate::quantizer::quantize_scalar;
use crate::tensor::ops::ConvGeometry;
use crate::tensor::{Conv2dParams, DType, IntTensor, Tensor};

/// One graph output: its integers, their domain and the dequantized values.
#[derive(Debug, Clone, PartialEq)]
pub struct IntOutput {
    pub id: String,
    pub domain: Domain,
    pub values: IntTensor,
    pub dequantized: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) enum Value {
    Float(Tensor),
    Int { shape: Vec<usize>, data: Vec<i32> },
}

fn channel_index(shape: &[usize], i: usize) -> usize {
    if shape.len() < 2 {
        return 0;
    }
    let inner: usize = shape[2..].iter().product();
    (i / inner) % shape[1]
}

fn pick<T: Copy>(v: &[T], c: usize) -> T {
    v[if v.len() == 1 { 0 } else { c }]
}

fn check_channels(id: &str, shape: &[usize], n: usize) -> Result<()> {
    let channels = if shape.len() < 2 { 1 } else { shape[1] };
    if n != 1 && n != channels {
        return Err(Error::shape(
            "run_int",
            format!("node `{id}`: {n} channel parameters for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn to_i32(v: i64, id: &str) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::Overflow(id.to_string()))
}

/// `x / 2^k` rounded half to even (`k ≤ 0` shifts left).
fn round_shift(x: i64, k: i32) -> Option<i64> {
    if k <= 0 {
        return x.checked_mul(1i64.checked_shl((-k) as u32)?);
    }
    if k >= 63 {
        return Some(0);
    }
    let q = x >> k;
    let r = x - (q << k);
    let half = 1i64 << (k - 1);
    Some(if r > half || (r == half && q & 1 == 1) { q + 1 } else { q })
}

/// `clip(round_half_even(m·acc) + z_out, qmin, qmax)` in double precision.
pub fn requantize_scalar(acc: i64, m: f64, z_out: i32, qmin: i32, qmax: i32) -> i32 {
    let r = (m * acc as f64).round_ties_even() + f64::from(z_out);
    r.clamp(f64::from(qmin), f64::from(qmax)) as i32
}

fn requant_one(v: i64, c: usize, rec: &RequantRecord) -> i32 {
    let d = v - i64::from(rec.input_zero_point);
    match rec.shifts.as_deref().and_then(|s| round_shift(d, pick(s, c))) {
        Some(r) => (r + i64::from(rec.output_zero_point)).clamp(i64::from(rec.qmin), i64::from(rec.qmax)) as i32,
        None => requantize_scalar(d, pick(&rec.multipliers, c), rec.output_zero_point, rec.qmin, rec.qmax),
    }
}

/// Requantizes accumulator (or lattice) values channel-wise along axis 1.
pub fn requantize(acc: &IntTensor, rec: &RequantRecord) -> Result<IntTensor> {
    check_channels("requantize", acc.shape(), rec.multipliers.len())?;
    let data = acc
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| requant_one(i64::from(v), channel_index(acc.shape(), i), rec))
        .collect();
    let dtype = if rec.qmin >= -128 && rec.qmax <= 127 {
        DType::I8Range
    } else {
        DType::I32Range
    };
    IntTensor::new(acc.shape().to_vec(), dtype, data)
}

fn apply_cast(id: &str, shape: &[usize], data: &[i32], cast: &Cast) -> Result<Vec<i32>> {
    check_channels(id, shape, cast.multipliers.len())?;
    let integral: Option<Vec<i64>> = cast
        .multipliers
        .iter()
        .map(|&m| (m.fract() == 0.0 && m.abs() < 2f64.powi(31)).then_some(m as i64))
        .collect();
    data.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = channel_index(shape, i);
            let d = i64::from(v) - i64::from(cast.zero_point);
            let r = match &integral {
                Some(k) => d * pick(k, c),
                None => {
                    let r = (d as f64 * pick(&cast.multipliers, c)).round_ties_even();
                    if r.abs() > 2f64.powi(62) {
                        return Err(Error::Overflow(id.to_string()));
                    }
                    r as i64
                }
            };
            to_i32(r, id)
        })
        .collect()
}

fn centered_weight(weight: &IntTensor, zps: &[i32]) -> Vec<i32> {
    let per_out = weight.numel() / weight.shape()[0];
    weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, &q)| q - pick(zps, i / per_out))
        .collect()
}

fn mac(acc: i32, a: i32, b: i32, id: &str) -> Result<i32> {
    a.checked_mul(b)
        .and_then(|p| acc.checked_add(p))
        .ok_or_else(|| Error::Overflow(id.to_string()))
}

#[allow(clippy::too_many_arguments)]
fn conv_int(
    id: &str,
    shape: &[usize],
    x: &[i32],
    z_x: i32,
    weight: &IntTensor,
    zps: &[i32],
    bias: &[i32],
    params: Conv2dParams,
) -> Result<(Vec<usize>, Vec<i32>)> {
    let g = ConvGeometry::new(shape, weight.shape(), params)?;
    if bias.len() != g.c_out {
        return Err(Error::shape("run_int", format!("node `{id}`: {} biases for {} channels", bias.len(), g.c_out)));
    }
    let w = centered_weight(weight, zps);
    let xc: Vec<i32> = x.iter().map(|&q| q - z_x).collect();
    let [sh, sw] = g.params.stride;
    let [ph, pw] = g.params.padding;
    let mut out = Vec::with_capacity(g.n * g.c_out * g.h_out * g.w_out);
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / g.cout_per_group;
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = bias[o];
                    for ci in 0..g.cin_per_group {
                        let c = grp * g.cin_per_group + ci;
                        for ky in 0..g.kh {
                            let Some(iy) = ConvGeometry::source(oy, ky, sh, ph, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = ConvGeometry::source(ox, kx, sw, pw, g.w) else { continue };
                                let xv = xc[((n * g.c_in + c) * g.h + iy) * g.w + ix];
                                let wv = w[((o * g.cin_per_group + ci) * g.kh + ky) * g.kw + kx];
                                acc = mac(acc, xv, wv, id)?;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok((g.output_shape(), out))
}

fn linear_int(
    id: &str,
    shape: &[usize],
    x: &[i32],
    z_x: i32,
    weight: &IntTensor,
    zps: &[i32],
    bias: &[i32],
) -> Result<(Vec<usize>, Vec<i32>)> {
    let n = shape[0];
    let k: usize = shape[1..].iter().product();
    let (o_dim, wk) = (weight.shape()[0], weight.shape()[1]);
    let flat_ok = shape.len() == 2 || (shape.len() == 4 && shape[2] == 1 && shape[3] == 1);
    if !flat_ok || k != wk || bias.len() != o_dim {
        return Err(Error::shape(
            "run_int",
            format!("node `{id}`: input {shape:?} against weight {:?}", weight.shape()),
        ));
    }
    let w = centered_weight(weight, zps);
    let mut out = Vec::with_capacity(n * o_dim);
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        for o in 0..o_dim {
            let mut acc = bias[o];
            for (&q, &wv) in row.iter().zip(&w[o * k..(o + 1) * k]) {
                acc = mac(acc, q - z_x, wv, id)?;
            }
            out.push(acc);
        }
    }
    Ok((vec![n, o_dim], out))
}

fn concat_int(shapes: &[&[usize]], parts: &[Vec<i32>], axis: usize, id: &str) -> Result<(Vec<usize>, Vec<i32>)> {
    let first = shapes[0];
    if axis >= first.len() {
        return Err(Error::shape("run_int", format!("node `{id}`: concat axis {axis} out of range")));
    }
    for s in shapes {
        if s.len() != first.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d]) {
            return Err(Error::shape("run_int", format!("node `{id}`: cannot concat {first:?} and {s:?}")));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut shape = first.to_vec();
    shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (s, p) in shapes.iter().zip(parts) {
            let chunk = s[axis] * inner;
            out.extend_from_slice(&p[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok((shape, out))
}

fn int_of<'a>(values: &'a HashMap<String, Value>, id: &str, node: &str) -> Result<(&'a [usize], &'a [i32])> {
    match values.get(id) {
        Some(Value::Int { shape, data }) => Ok((shape, data)),
        Some(Value::Float(_)) => Err(Error::Contract(format!("node `{node}` reads FP32 value `{id}`"))),
        None => Err(Error::DanglingReference {
            node: node.to_string(),
            target: id.to_string(),
        }),
    }
}

/// Runs the program and returns every computed value by node id.
pub(crate) fn execute(qg: &QuantizedGraph, inputs: &[Tensor]) -> Result<HashMap<String, Value>> {
    if inputs.len() != qg.inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "program has {} inputs, {} tensors given",
            qg.inputs.len(),
            inputs.len()
        )));
    }
    let mut values: HashMap<String, Value> = HashMap::new();
    for (id, t) in qg.inputs.iter().zip(inputs) {
        if let Some(i) = t.first_non_finite() {
            return Err(Error::NumericInput { op: "run_int", index: i });
        }
        values.insert(id.clone(), Value::Float(t.clone()));
    }
    for node in &qg.nodes {
        let id = node.id.as_str();
        let (shape, data) = match &node.op {
            QOp::Input => continue,
            QOp::Quantize {
                scale,
                zero_point,
                qmin,
                qmax,
            } => {
                let Some(Value::Float(x)) = values.get(&node.inputs[0]) else {
                    return Err(Error::Contract(format!("node `{id}` expects an FP32 input")));
                };
                let data = x
                    .data()
                    .iter()
                    .map(|&v| quantize_scalar(v, *scale, *zero_point, *qmin, *qmax))
                    .collect();
                (x.shape().to_vec(), data)
            }
            QOp::Requantize(rec) => {
                let (shape, x) = int_of(&values, &node.inputs[0], id)?;
                check_channels(id, shape, rec.multipliers.len())?;
                let data = x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| requant_one(i64::from(v), channel_index(shape, i), rec))
                    .collect();
                (shape.to_vec(), data)
            }
            QOp::Conv2d {
                weight,
                weight_zero_points,
                bias,
                params,
            } => {
                let (shape, x) = int_of(&values, &node.inputs[0], id)?;
                conv_int(id, shape, x, input_zero_point(qg, &node.inputs[0])?, weight, weight_zero_points, bias, *params)?
            }
            QOp::Linear {
                weight,
                weight_zero_points,
                bias,
            } => {
                let (shape, x) = int_of(&values, &node.inputs[0], id)?;
                linear_int(id, shape, x, input_zero_point(qg, &node.inputs[0])?, weight, weight_zero_points, bias)?
            }
            QOp::Relu { floor } => {
                let (shape, x) = int_of(&values, &node.inputs[0], id)?;
                (shape.to_vec(), x.iter().map(|&v| v.max(*floor)).collect())
            }
            QOp::Relu6 { cast, hi } => {
                let (shape, x) = int_of(&values, &node.inputs[0], id)?;
                let x = match cast {
                    Some(c) => apply_cast(id, shape, x, c)?,
                    None => x.to_vec(),
                };
                check_channels(id, shape, hi.len())?;
                let data = x
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v.clamp(0, pick(hi, channel_index(shape, i))))
                    .collect();
                (shape.to_vec(), data)
            }
            QOp::Add { casts } => {
                let (sa, a) = int_of(&values, &node.inputs[0], id)?;
                let (sb, b) = int_of(&values, &node.inputs[1], id)?;
                if sa != sb {
                    return Err(Error::shape("run_int", format!("node `{id}`: add of {sa:?} and {sb:?}")));
                }
                let a = apply_cast(id, sa, a, &casts[0])?;
                let b = apply_cast(id, sb, b, &casts[1])?;
                let data = a
                    .iter()
                    .zip(&b)
                    .map(|(&x, &y)| x.checked_add(y).ok_or_else(|| Error::Overflow(id.to_string())))
                    .collect::<Result<_>>()?;
                (sa.to_vec(), data)
            }
            QOp::Concat { axis, casts } => {
                let mut shapes = Vec::with_capacity(node.inputs.len());
                let mut parts = Vec::with_capacity(node.inputs.len());
                for (k, inp) in node.inputs.iter().enumerate() {
                    let (s, x) = int_of(&values, inp, id)?;
                    shapes.push(s);
                    parts.push(match casts {
                        Some(c) => apply_cast(id, s, x, &c[k])?,
                        None => x.to_vec(),
                    });
                }
                concat_int(&shapes, &parts, *axis, id)?
            }
            QOp::Gap { zero_point, hw } => {
                let (shape, x) = int_of(&values, &node.inputs[0], id)?;
                if shape.len() != 4 || shape[2] * shape[3] != *hw {
                    return Err(Error::shape(
                        "run_int",
                        format!("node `{id}` was lowered for {hw} positions, got shape {shape:?}"),
                    ));
                }
                let data = x
                    .chunks(*hw)
                    .map(|c| to_i32(c.iter().map(|&v| i64::from(v) - i64::from(*zero_point)).sum(), id))
                    .collect::<Result<_>>()?;
                (vec![shape[0], shape[1], 1, 1], data)
            }
        };
        values.insert(node.id.clone(), Value::Int { shape, data });
    }
    Ok(values)
}

fn input_zero_point(qg: &QuantizedGraph, id: &str) -> Result<i32> {
    match qg.node(id).map(|n| &n.domain) {
        Some(Domain::Int { zero_point, .. }) => Ok(*zero_point),
        _ => Err(Error::Contract(format!("layer input `{id}` is not on a quantized lattice"))),
    }
}

pub(crate) fn dequantize_value(domain: &Domain, shape: &[usize], data: &[i32]) -> Result<Tensor> {
    let d = match domain {
        Domain::Float => return Err(Error::Contract("FP32 value has no integer form".into())),
        Domain::Int { scale, zero_point, .. } => data.iter().map(|&q| (q - zero_point) as f32 * scale).collect(),
        Domain::Acc { scales } => data
            .iter()
            .enumerate()
            .map(|(i, &a)| (f64::from(a) * pick(scales, channel_index(shape, i))) as f32)
            .collect(),
    };
    Tensor::new(shape.to_vec(), d)
}

fn output_of(qg: &QuantizedGraph, values: &HashMap<String, Value>, id: &str) -> Result<IntOutput> {
    let node = qg.node(id).ok_or_else(|| Error::DanglingReference {
        node: "<outputs>".into(),
        target: id.to_string(),
    })?;
    let (shape, data) = int_of(values, id, "<outputs>")?;
    let dtype = match node.domain {
        Domain::Int { qmin, qmax, .. } if qmin >= -128 && qmax <= 127 => DType::I8Range,
        _ => DType::I32Range,
    };
    Ok(IntOutput {
        id: id.to_string(),
        domain: node.domain.clone(),
        values: IntTensor::new(shape.to_vec(), dtype, data.to_vec())?,
        dequantized: dequantize_value(&node.domain, shape, data)?,
    })
}

/// Integer outputs of the program and their dequantization.
pub fn run_int(qg: &QuantizedGraph, inputs: &[Tensor]) -> Result<Vec<IntOutput>> {
    let values = execute(qg, inputs)?;
    qg.outputs.iter().map(|o| output_of(qg, &values, o)).collect()
}

/// Every integer value of the program, in node order.
pub fn run_int_trace(qg: &QuantizedGraph, inputs: &[Tensor]) -> Result<Vec<IntOutput>> {
    let values = execute(qg, inputs)?;
    qg.nodes
        .iter()
        .filter(|n| n.domain != Domain::Float)
        .map(|n| output_of(qg, &values, &n.id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize_scalar(1234, 0.001 / 0.1, 0, -128, 127), 12);
        assert_eq!(requantize_scalar(0, 0.37, 5, -128, 127), 5);
        assert_eq!(requantize_scalar(1 << 20, 1.0, 0, -128, 127), 127);
    }

    #[test]
    fn shifts_round_half_even() {
        for x in -4096i64..4096 {
            for k in 0..6 {
                let want = (x as f64 / f64::from(1 << k)).round_ties_even() as i64;
                assert_eq!(round_shift(x, k), Some(want), "x={x} k={k}");
            }
        }
        assert_eq!(round_shift(3, -2), Some(12));
    }
}
