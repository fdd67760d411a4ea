//! Model JSON and QParams sidecar (de)serialization.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ir::{default_momentum, BnAttrs, FakeQuantAttrs, FusedBn, Graph, LayerAttrs, Node, Op, MODEL_VERSION};
use crate::error::{Error, Result};
use crate::quantizer::QParams;
use crate::tensor::{Conv2dParams, TensorFile};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelJson {
    version: u32,
    inputs: Vec<String>,
    outputs: Vec<String>,
    nodes: Vec<NodeJson>,
    #[serde(default)]
    params: BTreeMap<String, TensorFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeJson {
    id: String,
    op: String,
    #[serde(default = "empty_object")]
    attrs: Value,
    #[serde(default)]
    inputs: Vec<String>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

fn one() -> usize {
    1
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvJson {
    weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default = "unit_stride")]
    stride: [usize; 2],
    #[serde(default)]
    padding: [usize; 2],
    #[serde(default = "one")]
    groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<FusedBn>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    quant_bias: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinearJson {
    weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<FusedBn>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    quant_bias: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmptyJson {}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AddJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    residual: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConcatJson {
    #[serde(default = "one")]
    axis: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnJson {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
    eps: f32,
    #[serde(default = "default_momentum")]
    momentum: f32,
}

fn attrs<T: DeserializeOwned>(v: &Value, path: &str) -> Result<T> {
    serde_path_to_error::deserialize(v.clone()).map_err(|e| Error::Schema {
        path: format!("{path}.{}", e.path()),
        message: e.inner().to_string(),
    })
}

fn parse_op(n: &NodeJson, i: usize) -> Result<Op> {
    let path = format!("nodes[{i}].attrs");
    Ok(match n.op.as_str() {
        "input" => Op::Input {
            shape: attrs::<InputJson>(&n.attrs, &path)?.shape,
        },
        "conv2d" => {
            let a: ConvJson = attrs(&n.attrs, &path)?;
            Op::Conv2d(LayerAttrs {
                weight: a.weight,
                bias: a.bias,
                conv: Some(Conv2dParams {
                    stride: a.stride,
                    padding: a.padding,
                    groups: a.groups,
                }),
                bn: a.bn,
                quant_bias: a.quant_bias,
            })
        }
        "linear" => {
            let a: LinearJson = attrs(&n.attrs, &path)?;
            Op::Linear(LayerAttrs {
                weight: a.weight,
                bias: a.bias,
                conv: None,
                bn: a.bn,
                quant_bias: a.quant_bias,
            })
        }
        "bn" => {
            let a: BnJson = attrs(&n.attrs, &path)?;
            Op::Bn(BnAttrs {
                gamma: a.gamma,
                beta: a.beta,
                mean: a.mean,
                var: a.var,
                eps: a.eps,
                momentum: a.momentum,
            })
        }
        "relu" | "relu6" | "gap" => {
            attrs::<EmptyJson>(&n.attrs, &path)?;
            match n.op.as_str() {
                "relu" => Op::Relu,
                "relu6" => Op::Relu6,
                _ => Op::Gap,
            }
        }
        "add" => Op::Add {
            residual: attrs::<AddJson>(&n.attrs, &path)?.residual,
        },
        "concat" => Op::Concat {
            axis: attrs::<ConcatJson>(&n.attrs, &path)?.axis,
        },
        "fakequant" => Op::FakeQuant(attrs::<FakeQuantAttrs>(&n.attrs, &path)?),
        other => {
            return Err(Error::Schema {
                path: format!("nodes[{i}].op"),
                message: format!("unknown op `{other}` in node `{}`", n.id),
            })
        }
    })
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("attribute structs serialize infallibly")
}

fn op_attrs(op: &Op) -> Value {
    match op {
        Op::Input { shape } => to_value(&InputJson { shape: shape.clone() }),
        Op::Conv2d(a) => {
            let c = a.conv.unwrap_or_default();
            to_value(&ConvJson {
                weight: a.weight.clone(),
                bias: a.bias.clone(),
                stride: c.stride,
                padding: c.padding,
                groups: c.groups,
                bn: a.bn.clone(),
                quant_bias: a.quant_bias,
            })
        }
        Op::Linear(a) => to_value(&LinearJson {
            weight: a.weight.clone(),
            bias: a.bias.clone(),
            bn: a.bn.clone(),
            quant_bias: a.quant_bias,
        }),
        Op::Bn(a) => to_value(&BnJson {
            gamma: a.gamma.clone(),
            beta: a.beta.clone(),
            mean: a.mean.clone(),
            var: a.var.clone(),
            eps: a.eps,
            momentum: a.momentum,
        }),
        Op::Relu | Op::Relu6 | Op::Gap => empty_object(),
        Op::Add { residual } => to_value(&AddJson { residual: *residual }),
        Op::Concat { axis } => to_value(&ConcatJson { axis: *axis }),
        Op::FakeQuant(a) => to_value(a),
    }
}

pub fn load_model(bytes: &[u8]) -> Result<Graph> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let m: ModelJson = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if m.version != MODEL_VERSION {
        return Err(Error::Schema {
            path: "version".into(),
            message: format!("unsupported model version {}", m.version),
        });
    }
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for (i, n) in m.nodes.iter().enumerate() {
        nodes.push(Node {
            id: n.id.clone(),
            op: parse_op(n, i)?,
            inputs: n.inputs.clone(),
        });
    }
    let mut params = BTreeMap::new();
    for (name, tf) in &m.params {
        let t = tf.to_tensor().map_err(|e| Error::Schema {
            path: format!("params.{name}"),
            message: e.to_string(),
        })?;
        params.insert(name.clone(), t);
    }
    let mut g = Graph {
        inputs: m.inputs,
        outputs: m.outputs,
        nodes,
        params,
    };
    g.unify_share_groups()?;
    g.validate()?;
    Ok(g)
}

pub fn save_model(g: &Graph) -> Vec<u8> {
    let m = ModelJson {
        version: MODEL_VERSION,
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        nodes: g
            .nodes
            .iter()
            .map(|n| NodeJson {
                id: n.id.clone(),
                op: n.op.name().to_string(),
                attrs: op_attrs(&n.op),
                inputs: n.inputs.clone(),
            })
            .collect(),
        params: g
            .params
            .iter()
            .map(|(k, t)| (k.clone(), TensorFile::from_tensor(t)))
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&m).expect("model serializes infallibly");
    out.push(b'\n');
    out
}

/// QParams of every calibrated fake-quant node, keyed by node id.
pub fn collect_qparams(g: &Graph) -> BTreeMap<String, QParams> {
    g.fake_quant_nodes()
        .filter_map(|(n, a)| a.qparams.as_ref().map(|q| (n.id.clone(), (**q).clone())))
        .collect()
}

/// Attaches sidecar parameters to the graph's fake-quant nodes.
pub fn apply_qparams(g: &mut Graph, table: &BTreeMap<String, QParams>) -> Result<()> {
    for (id, qp) in table {
        qp.validate()?;
        let node = g.node_mut(id).ok_or_else(|| Error::DanglingReference {
            node: "<qparams>".into(),
            target: id.clone(),
        })?;
        match &mut node.op {
            Op::FakeQuant(a) => a.qparams = Some(Arc::new(qp.clone())),
            _ => {
                return Err(Error::Contract(format!(
                    "qparams entry `{id}` does not name a fake-quant node"
                )))
            }
        }
    }
    g.unify_share_groups()
}

pub fn load_qparams(bytes: &[u8]) -> Result<BTreeMap<String, QParams>> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn save_qparams(table: &BTreeMap<String, QParams>) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(table).expect("qparams serialize infallibly");
    out.push(b'\n');
    out
}
