//! Lowering of calibrated fake-quantized graphs to integer-only programs.
//!
//! Every value of a lowered program lives in one static [`Domain`]: the FP32
//! graph input, a quantized lattice `s·(q − z)`, or an INT32 accumulator
//! `s_c·acc` with one scale per channel. Layers produce accumulators; an
//! activation quantizer requantizes whatever reaches it.

mod compare;
mod run;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::exec::{effective_weight, evaluate, uncalibrated, EvalOptions};
use crate::graph::{to_inference_form, FqRole, Graph, Node, Op};
use crate::quantizer::{quantize, quantize_bias, QParams, ScaleForm};
use crate::tensor::{Conv2dParams, DType, IntTensor, Tensor};

pub use compare::{compare_fake_real, CompareReport, FinalReport, LayerReport};
pub use run::{requantize, requantize_scalar, run_int, run_int_trace, IntOutput};

pub const PROGRAM_VERSION: u32 = 1;

/// Extra bits of resolution used when a quantized value must be carried as an
/// accumulator (adds across scales, relu6).
pub const FINE_BITS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Domain {
    Float,
    Int {
        scale: f32,
        zero_point: i32,
        qmin: i32,
        qmax: i32,
    },
    Acc {
        /// One scale per channel (axis 1), or a single shared scale.
        scales: Vec<f64>,
    },
}

impl Domain {
    fn int(qp: &QParams) -> Self {
        Domain::Int {
            scale: qp.scale(),
            zero_point: qp.zero_point(),
            qmin: qp.qmin,
            qmax: qp.qmax,
        }
    }

    /// Scale and zero-point of a value in this domain as seen by a cast.
    fn source(&self) -> Option<(Vec<f64>, i32)> {
        match self {
            Domain::Float => None,
            Domain::Int { scale, zero_point, .. } => Some((vec![f64::from(*scale)], *zero_point)),
            Domain::Acc { scales } => Some((scales.clone(), 0)),
        }
    }
}

/// `v' = round((v − zero_point)·m_c)` into an accumulator domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cast {
    pub zero_point: i32,
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequantRecord {
    pub input_scales: Vec<f64>,
    pub input_zero_point: i32,
    pub output_scale: f32,
    pub output_zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    /// `m_c = s_in,c / s_out`.
    pub multipliers: Vec<f64>,
    /// Right shifts when every multiplier is an exact power of two.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shifts: Option<Vec<i32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum QOp {
    Input,
    /// FP32 graph input onto its first quantizer's lattice.
    Quantize {
        scale: f32,
        zero_point: i32,
        qmin: i32,
        qmax: i32,
    },
    Requantize(RequantRecord),
    Conv2d {
        #[serde(with = "int_tensor_json")]
        weight: IntTensor,
        weight_zero_points: Vec<i32>,
        bias: Vec<i32>,
        params: Conv2dParams,
    },
    Linear {
        #[serde(with = "int_tensor_json")]
        weight: IntTensor,
        weight_zero_points: Vec<i32>,
        bias: Vec<i32>,
    },
    /// `max(v, floor)`; the floor is the zero-point on a lattice, 0 otherwise.
    Relu { floor: i32 },
    /// Accumulator clamp to `[0, hi_c]`, `hi_c = round(6 / s_c)`.
    Relu6 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cast: Option<Cast>,
        hi: Vec<i32>,
    },
    Add { casts: [Cast; 2] },
    Concat {
        axis: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        casts: Option<Vec<Cast>>,
    },
    /// Exact channel sum `Σ(v − zero_point)` over a fixed `hw` positions;
    /// the `1/hw` factor lives in the output scale.
    Gap { zero_point: i32, hw: usize },
}

// `deny_unknown_fields` does not combine with the flattened op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNode {
    pub id: String,
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: QOp,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizedGraph {
    pub version: u32,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub nodes: Vec<QNode>,
}

impl QuantizedGraph {
    pub fn node(&self, id: &str) -> Option<&QNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec(self).expect("program serializes");
        v.push(b'\n');
        v
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let qg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if qg.version != PROGRAM_VERSION {
            return Err(Error::Schema {
                path: "version".into(),
                message: format!("unsupported program version {}", qg.version),
            });
        }
        Ok(qg)
    }
}

mod int_tensor_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::{DType, IntTensor, TensorFile};

    pub fn serialize<S: Serializer>(t: &IntTensor, s: S) -> Result<S::Ok, S::Error> {
        TensorFile::from_int(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<IntTensor, D::Error> {
        let f = TensorFile::deserialize(d)?;
        let t = f.to_int(DType::I32Range).map_err(serde::de::Error::custom)?;
        let dtype = super::narrowest(t.data());
        IntTensor::new(t.shape().to_vec(), dtype, t.into_data()).map_err(serde::de::Error::custom)
    }
}

/// Weight storage type: the narrowest range holding every level, so that a
/// program reloads to an identical value.
fn narrowest(data: &[i32]) -> DType {
    if data.iter().all(|v| (-128..=127).contains(v)) {
        DType::I8Range
    } else {
        DType::I32Range
    }
}

/// Per-channel requantization multipliers; shifts when all are powers of two.
fn requant_record(input_scales: Vec<f64>, input_zero_point: i32, out: &QParams) -> RequantRecord {
    let s_out = f64::from(out.scale());
    let multipliers: Vec<f64> = input_scales.iter().map(|s| s / s_out).collect();
    let shifts = (out.scale_form == ScaleForm::Pot)
        .then(|| {
            multipliers
                .iter()
                .map(|m| {
                    let e = m.log2();
                    (e.fract() == 0.0).then_some(-e as i32)
                })
                .collect::<Option<Vec<i32>>>()
        })
        .flatten();
    RequantRecord {
        input_scales,
        input_zero_point,
        output_scale: out.scale(),
        output_zero_point: out.zero_point(),
        qmin: out.qmin,
        qmax: out.qmax,
        multipliers,
        shifts,
    }
}

fn cast_to(src: &Domain, target: &[f64]) -> Cast {
    let (scales, zero_point) = src.source().expect("numeric domain");
    let n = scales.len().max(target.len());
    let multipliers = (0..n)
        .map(|c| scales[if scales.len() == 1 { 0 } else { c }] / target[if target.len() == 1 { 0 } else { c }])
        .collect();
    Cast {
        zero_point,
        multipliers,
    }
}

/// Accumulator domain for a lattice value: `s / 2^FINE_BITS`.
fn fine(scale: f32) -> Vec<f64> {
    vec![f64::from(scale) / f64::from(1u32 << FINE_BITS)]
}

fn unquantized(node: &Node, input: &str) -> Error {
    Error::Contract(format!(
        "node `{}` ({}) reads `{input}`, which carries no integer representation",
        node.id,
        node.op.name()
    ))
}

fn lower_layer(g: &Graph, node: &Node, x: &Domain) -> Result<(QOp, Domain)> {
    let attrs = node.op.layer().expect("layer node");
    let Domain::Int { scale: s_x, .. } = *x else {
        return Err(unquantized(node, &node.inputs[0]));
    };
    let (_, fq) = g
        .weight_quant(node)
        .ok_or_else(|| Error::PolicyMismatch(format!("layer `{}` has no weight quantizer", node.id)))?;
    let wqp = fq
        .qparams
        .as_deref()
        .ok_or_else(|| Error::CalibrationRequired(vec![node.inputs[1].clone()]))?;
    let (w, b) = effective_weight(g, node, attrs)?;
    let q = quantize(&w, wqp, fq.scheme.granularity)?;
    let dtype = narrowest(q.data());
    let weight = IntTensor::new(q.shape().to_vec(), dtype, q.into_data())?;
    let s_w = |o: usize| wqp.scales[if wqp.len() == 1 { 0 } else { o }];
    let bias = b
        .data()
        .iter()
        .enumerate()
        .map(|(o, &v)| {
            i32::try_from(quantize_bias(v, s_w(o), s_x)).map_err(|_| Error::Overflow(format!("{} (bias)", node.id)))
        })
        .collect::<Result<Vec<i32>>>()?;
    let scales = wqp.scales.iter().map(|&s| f64::from(s) * f64::from(s_x)).collect();
    let weight_zero_points = wqp.zero_points.clone();
    let op = match attrs.conv {
        Some(params) => QOp::Conv2d {
            weight,
            weight_zero_points,
            bias,
            params,
        },
        None => QOp::Linear {
            weight,
            weight_zero_points,
            bias,
        },
    };
    Ok((op, Domain::Acc { scales }))
}

fn elementwise_min(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|c| a[if a.len() == 1 { 0 } else { c }].min(b[if b.len() == 1 { 0 } else { c }]))
        .collect()
}

/// Common accumulator scale for an add. An accumulator operand keeps its
/// scale; two equal lattices add exactly; otherwise the finer lattice is
/// refined by `FINE_BITS`.
fn add_target(node: &Node, a: &Domain, b: &Domain) -> Result<Vec<f64>> {
    Ok(match (a, b) {
        (Domain::Float, _) => return Err(unquantized(node, &node.inputs[0])),
        (_, Domain::Float) => return Err(unquantized(node, &node.inputs[1])),
        (Domain::Acc { scales: x }, Domain::Acc { scales: y }) => {
            if x.len() != y.len() && x.len() != 1 && y.len() != 1 {
                return Err(Error::shape(
                    "lower",
                    format!("add `{}` mixes {} and {} channel scales", node.id, x.len(), y.len()),
                ));
            }
            elementwise_min(x, y)
        }
        (Domain::Acc { scales }, Domain::Int { .. }) | (Domain::Int { .. }, Domain::Acc { scales }) => scales.clone(),
        (Domain::Int { scale: sa, .. }, Domain::Int { scale: sb, .. }) => {
            if sa == sb {
                vec![f64::from(*sa)]
            } else {
                fine(sa.min(*sb))
            }
        }
    })
}

fn lower_node(
    g: &Graph,
    node: &Node,
    domains: &HashMap<String, Domain>,
    shapes: Option<&HashMap<String, Vec<usize>>>,
) -> Result<Option<(QOp, Domain)>> {
    let input = |i: usize| -> Result<&Domain> {
        domains.get(&node.inputs[i]).ok_or_else(|| Error::DanglingReference {
            node: node.id.clone(),
            target: node.inputs[i].clone(),
        })
    };
    Ok(Some(match &node.op {
        Op::Input { .. } => (QOp::Input, Domain::Float),
        Op::FakeQuant(a) if a.role == FqRole::Weight => return Ok(None),
        Op::FakeQuant(a) => {
            let qp = a
                .qparams
                .as_deref()
                .ok_or_else(|| Error::CalibrationRequired(vec![node.id.clone()]))?;
            if qp.len() != 1 {
                return Err(Error::PolicyMismatch(format!("activation quantizer `{}` is per-channel", node.id)));
            }
            let op = match input(0)? {
                Domain::Float => QOp::Quantize {
                    scale: qp.scale(),
                    zero_point: qp.zero_point(),
                    qmin: qp.qmin,
                    qmax: qp.qmax,
                },
                d => {
                    let (scales, z) = d.source().expect("numeric domain");
                    QOp::Requantize(requant_record(scales, z, qp))
                }
            };
            (op, Domain::int(qp))
        }
        Op::Conv2d(_) | Op::Linear(_) => lower_layer(g, node, input(0)?)?,
        Op::Bn(_) => return Err(Error::UnfoldedBatchNorm(node.id.clone())),
        Op::Relu => match input(0)? {
            Domain::Float => return Err(unquantized(node, &node.inputs[0])),
            d @ Domain::Int { zero_point, .. } => (QOp::Relu { floor: *zero_point }, d.clone()),
            d @ Domain::Acc { .. } => (QOp::Relu { floor: 0 }, d.clone()),
        },
        Op::Relu6 => {
            let (cast, scales) = match input(0)? {
                Domain::Float => return Err(unquantized(node, &node.inputs[0])),
                d @ Domain::Int { scale, .. } => {
                    let t = fine(*scale);
                    (Some(cast_to(d, &t)), t)
                }
                Domain::Acc { scales } => (None, scales.clone()),
            };
            let hi = scales
                .iter()
                .map(|s| {
                    let h = (6.0 / s).round_ties_even();
                    if h > f64::from(i32::MAX) {
                        Err(Error::Overflow(node.id.clone()))
                    } else {
                        Ok(h as i32)
                    }
                })
                .collect::<Result<_>>()?;
            (QOp::Relu6 { cast, hi }, Domain::Acc { scales })
        }
        Op::Add { .. } => {
            let (a, b) = (input(0)?, input(1)?);
            let target = add_target(node, a, b)?;
            let casts = [cast_to(a, &target), cast_to(b, &target)];
            (QOp::Add { casts }, Domain::Acc { scales: target })
        }
        Op::Concat { axis } => {
            let ds: Vec<&Domain> = (0..node.inputs.len()).map(input).collect::<Result<_>>()?;
            if let Some(i) = ds.iter().position(|d| **d == Domain::Float) {
                return Err(unquantized(node, &node.inputs[i]));
            }
            if ds.iter().all(|d| *d == ds[0] && matches!(d, Domain::Int { .. })) {
                (QOp::Concat { axis: *axis, casts: None }, ds[0].clone())
            } else if let (1, Some(shapes)) = (*axis, shapes) {
                // Channel-wise scales survive a channel concat unchanged.
                let mut scales = Vec::new();
                let mut casts = Vec::with_capacity(ds.len());
                for (k, d) in ds.iter().enumerate() {
                    let channels = shapes.get(&node.inputs[k]).map_or(1, |s| s[1]);
                    let (src, _) = d.source().expect("numeric domain");
                    let own: Vec<f64> = (0..channels).map(|c| src[if src.len() == 1 { 0 } else { c }]).collect();
                    casts.push(cast_to(d, &own));
                    scales.extend(own);
                }
                (
                    QOp::Concat {
                        axis: 1,
                        casts: Some(casts),
                    },
                    Domain::Acc { scales },
                )
            } else {
                // One shared scale, the finest any input offers.
                let t = ds
                    .iter()
                    .flat_map(|d| match d {
                        Domain::Int { scale, .. } => fine(*scale),
                        Domain::Acc { scales } => scales.clone(),
                        Domain::Float => unreachable!(),
                    })
                    .fold(f64::INFINITY, f64::min);
                let casts = ds.iter().map(|d| cast_to(d, &[t])).collect();
                (
                    QOp::Concat {
                        axis: *axis,
                        casts: Some(casts),
                    },
                    Domain::Acc { scales: vec![t] },
                )
            }
        }
        Op::Gap => {
            let (scales, zero_point) = input(0)?.source().ok_or_else(|| unquantized(node, &node.inputs[0]))?;
            let shape = shapes.and_then(|s| s.get(&node.inputs[0])).ok_or_else(|| {
                Error::Contract(format!("pooling node `{}` needs static input shapes", node.id))
            })?;
            let hw: usize = shape[2..].iter().product();
            let scales = scales.iter().map(|s| s / hw as f64).collect();
            (QOp::Gap { zero_point, hw }, Domain::Acc { scales })
        }
    }))
}

/// Value shapes for a batch of one, when every graph input declares its shape.
fn static_shapes(g: &Graph) -> Result<Option<HashMap<String, Vec<usize>>>> {
    let mut inputs = Vec::with_capacity(g.inputs.len());
    for id in &g.inputs {
        match g.node(id).map(|n| &n.op) {
            Some(Op::Input { shape: Some(s) }) => {
                let mut s = s.clone();
                s[0] = 1;
                inputs.push(Tensor::zeros(&s));
            }
            _ => return Ok(None),
        }
    }
    let trace = evaluate(g, &inputs, EvalOptions::FLOAT, None)?;
    Ok(Some(trace.values.into_iter().map(|(k, v)| (k, v.shape().to_vec())).collect()))
}

/// Lowers a calibrated graph whose batch norms are folded (strategy 0) or
/// fused (strategies 1–4, converted to inference form here).
pub fn lower(g: &Graph) -> Result<QuantizedGraph> {
    let missing = uncalibrated(g);
    if !missing.is_empty() {
        return Err(Error::CalibrationRequired(missing));
    }
    if !g.has_fake_quant() {
        return Err(Error::PolicyMismatch("graph has no quantizers to lower".into()));
    }
    let g = to_inference_form(g)?;
    let shapes = static_shapes(&g)?;
    let mut domains: HashMap<String, Domain> = HashMap::new();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let Some((op, domain)) = lower_node(&g, node, &domains, shapes.as_ref())? else {
            continue;
        };
        domains.insert(node.id.clone(), domain.clone());
        let inputs = match &op {
            QOp::Conv2d { .. } | QOp::Linear { .. } => vec![node.inputs[0].clone()],
            _ => node.inputs.clone(),
        };
        nodes.push(QNode {
            id: node.id.clone(),
            inputs,
            op,
            domain,
        });
    }
    Ok(QuantizedGraph {
        version: PROGRAM_VERSION,
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        nodes,
    })
}
