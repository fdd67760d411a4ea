use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{QParams, QScheme};
use crate::tensor::{Conv2dParams, Tensor};

pub const MODEL_VERSION: u32 = 1;

/// Batch-norm parameters fused into a conv/linear node by a folding strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedBn {
    pub gamma: String,
    pub beta: String,
    pub mean: String,
    pub var: String,
    pub eps: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub strategy: u8,
}

pub(crate) fn default_momentum() -> f32 {
    0.1
}

/// Attributes shared by conv2d and linear nodes. `conv` is `None` for linear.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttrs {
    pub weight: String,
    pub bias: Option<String>,
    pub conv: Option<Conv2dParams>,
    pub bn: Option<FusedBn>,
    /// Round the bias onto the `s_w·s_x` grid in evaluation, as integer
    /// backends store it in INT32.
    pub quant_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnAttrs {
    pub gamma: String,
    pub beta: String,
    pub mean: String,
    pub var: String,
    pub eps: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FqRole {
    Activation,
    Weight,
}

/// Training behavior of a fake-quantize node. Evaluation is always the hard
/// fake-quantize over the resolved parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Kernel {
    Fixed,
    Lsq {
        /// Learn a continuous zero-point (LSQ+); `zero_points` holds it.
        #[serde(default)]
        learn_zero_point: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        zero_points: Option<Vec<f32>>,
    },
    Pact {
        alpha: f32,
        beta: f32,
    },
    Dorefa,
    Dsq {
        alpha: f32,
    },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Fixed => "fixed",
            Kernel::Lsq { learn_zero_point: true, .. } => "lsq+",
            Kernel::Lsq { .. } => "lsq",
            Kernel::Pact { .. } => "pact",
            Kernel::Dorefa => "dorefa",
            Kernel::Dsq { .. } => "dsq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FakeQuantAttrs {
    pub role: FqRole,
    /// Weight parameter name (weight role only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    pub scheme: QScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qparams: Option<Arc<QParams>>,
    #[serde(default = "fixed_kernel")]
    pub kernel: Kernel,
    /// Nodes with the same group share one `QParams` instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_group: Option<String>,
}

fn fixed_kernel() -> Kernel {
    Kernel::Fixed
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { shape: Option<Vec<usize>> },
    Conv2d(LayerAttrs),
    Linear(LayerAttrs),
    Bn(BnAttrs),
    Relu,
    Relu6,
    /// `residual` names the input index that stays unquantized under graph2.
    Add { residual: Option<usize> },
    Concat { axis: usize },
    Gap,
    FakeQuant(FakeQuantAttrs),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d(_) => "conv2d",
            Op::Linear(_) => "linear",
            Op::Bn(_) => "bn",
            Op::Relu => "relu",
            Op::Relu6 => "relu6",
            Op::Add { .. } => "add",
            Op::Concat { .. } => "concat",
            Op::Gap => "gap",
            Op::FakeQuant(_) => "fakequant",
        }
    }

    pub fn layer(&self) -> Option<&LayerAttrs> {
        match self {
            Op::Conv2d(a) | Op::Linear(a) => Some(a),
            _ => None,
        }
    }

    pub fn layer_mut(&mut self) -> Option<&mut LayerAttrs> {
        match self {
            Op::Conv2d(a) | Op::Linear(a) => Some(a),
            _ => None,
        }
    }

    pub fn fake_quant(&self) -> Option<&FakeQuantAttrs> {
        match self {
            Op::FakeQuant(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_layer(&self) -> bool {
        matches!(self, Op::Conv2d(_) | Op::Linear(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub nodes: Vec<Node>,
    pub params: BTreeMap<String, Tensor>,
}

impl Graph {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::DanglingReference {
            node: "<params>".into(),
            target: name.into(),
        })
    }

    /// Ids of the nodes that read `id`, in node order (repeated per edge).
    pub fn consumers(&self, id: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ni, n) in self.nodes.iter().enumerate() {
            for (slot, inp) in n.inputs.iter().enumerate() {
                if inp == id {
                    out.push((ni, slot));
                }
            }
        }
        out
    }

    pub fn fake_quant_nodes(&self) -> impl Iterator<Item = (&Node, &FakeQuantAttrs)> {
        self.nodes.iter().filter_map(|n| n.op.fake_quant().map(|a| (n, a)))
    }

    pub fn has_fake_quant(&self) -> bool {
        self.fake_quant_nodes().next().is_some()
    }

    /// Renames every reference to value `from` (node inputs and graph outputs).
    pub fn redirect(&mut self, from: &str, to: &str) {
        for n in &mut self.nodes {
            for inp in &mut n.inputs {
                if inp == from {
                    *inp = to.to_string();
                }
            }
        }
        for o in &mut self.outputs {
            if o == from {
                *o = to.to_string();
            }
        }
    }

    /// Activation input of a conv/linear node (its first input).
    pub fn layer_input<'a>(&self, node: &'a Node) -> &'a str {
        &node.inputs[0]
    }

    /// Weight fake-quant node attached to a conv/linear node, if any.
    pub fn weight_quant(&self, node: &Node) -> Option<(&Node, &FakeQuantAttrs)> {
        let id = node.inputs.get(1)?;
        let n = self.node(id)?;
        n.op.fake_quant().map(|a| (n, a))
    }

    /// Makes every fake-quant node in one share group hold the same `Arc`.
    pub fn unify_share_groups(&mut self) -> Result<()> {
        let mut seen: HashMap<String, Option<Arc<QParams>>> = HashMap::new();
        for n in &mut self.nodes {
            if let Op::FakeQuant(a) = &mut n.op {
                let Some(group) = &a.share_group else { continue };
                match seen.get(group) {
                    None => {
                        seen.insert(group.clone(), a.qparams.clone());
                    }
                    Some(first) => {
                        match (first, &a.qparams) {
                            (Some(f), Some(q)) if **f != **q => {
                                return Err(Error::Contract(format!(
                                    "share group `{group}` holds different parameters at `{}`",
                                    n.id
                                )))
                            }
                            (Some(_), None) | (None, Some(_)) => {
                                return Err(Error::Contract(format!(
                                    "share group `{group}` is only partly calibrated at `{}`",
                                    n.id
                                )))
                            }
                            _ => {}
                        }
                        a.qparams = first.clone();
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks references, ordering, arities and parameter shapes.
    pub fn validate(&self) -> Result<()> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(Error::Contract(format!("duplicate node id `{}`", n.id)));
            }
        }
        for id in &self.inputs {
            match index.get(id.as_str()) {
                Some(&i) if matches!(self.nodes[i].op, Op::Input { .. }) => {}
                Some(_) => {
                    return Err(Error::Contract(format!("graph input `{id}` is not an input node")))
                }
                None => {
                    return Err(Error::DanglingReference {
                        node: "<inputs>".into(),
                        target: id.clone(),
                    })
                }
            }
        }
        for id in &self.outputs {
            if !index.contains_key(id.as_str()) {
                return Err(Error::DanglingReference {
                    node: "<outputs>".into(),
                    target: id.clone(),
                });
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                match index.get(inp.as_str()) {
                    None => {
                        return Err(Error::DanglingReference {
                            node: n.id.clone(),
                            target: inp.clone(),
                        })
                    }
                    Some(&j) if j >= i => {
                        return Err(Error::Contract(format!(
                            "node `{}` reads `{inp}`, which is not defined earlier",
                            n.id
                        )))
                    }
                    _ => {}
                }
            }
            self.validate_node(n)?;
        }
        Ok(())
    }

    fn require_param(&self, node: &Node, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::DanglingReference {
            node: node.id.clone(),
            target: name.to_string(),
        })
    }

    fn arity(node: &Node, expected: std::ops::RangeInclusive<usize>) -> Result<()> {
        if expected.contains(&node.inputs.len()) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "node `{}` ({}) has {} inputs, expected {:?}",
                node.id,
                node.op.name(),
                node.inputs.len(),
                expected
            )))
        }
    }

    fn validate_node(&self, n: &Node) -> Result<()> {
        match &n.op {
            Op::Input { .. } => Self::arity(n, 0..=0),
            Op::Conv2d(a) | Op::Linear(a) => {
                Self::arity(n, 1..=2)?;
                let w = self.require_param(n, &a.weight)?;
                let want_rank = if a.conv.is_some() { 4 } else { 2 };
                if w.rank() != want_rank {
                    return Err(Error::shape(
                        "validate",
                        format!("node `{}` weight `{}` has shape {:?}", n.id, a.weight, w.shape()),
                    ));
                }
                let out_ch = w.shape()[0];
                if let Some(c) = &a.conv {
                    if c.groups == 0 || out_ch % c.groups != 0 {
                        return Err(Error::shape(
                            "validate",
                            format!("node `{}`: {out_ch} output channels, {} groups", n.id, c.groups),
                        ));
                    }
                }
                if let Some(b) = &a.bias {
                    let bt = self.require_param(n, b)?;
                    if bt.shape() != [out_ch] {
                        return Err(Error::shape(
                            "validate",
                            format!("node `{}` bias `{b}` has shape {:?}", n.id, bt.shape()),
                        ));
                    }
                }
                if let Some(bn) = &a.bn {
                    for name in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
                        let t = self.require_param(n, name)?;
                        if t.shape() != [out_ch] {
                            return Err(Error::shape(
                                "validate",
                                format!("node `{}` fused BN `{name}` has shape {:?}", n.id, t.shape()),
                            ));
                        }
                    }
                    if !(1..=4).contains(&bn.strategy) {
                        return Err(Error::InvalidArgument(format!(
                            "node `{}`: fused BN strategy {} (expected 1..=4)",
                            n.id, bn.strategy
                        )));
                    }
                }
                if n.inputs.len() == 2 {
                    match self.weight_quant(n) {
                        Some((_, fq)) if fq.role == FqRole::Weight && fq.param.as_deref() == Some(&a.weight) => {}
                        _ => {
                            return Err(Error::Contract(format!(
                                "node `{}`: second input must be the weight fake-quant of `{}`",
                                n.id, a.weight
                            )))
                        }
                    }
                }
                Ok(())
            }
            Op::Bn(a) => {
                Self::arity(n, 1..=1)?;
                for name in [&a.gamma, &a.beta, &a.mean, &a.var] {
                    self.require_param(n, name)?;
                }
                Ok(())
            }
            Op::Relu | Op::Relu6 | Op::Gap => Self::arity(n, 1..=1),
            Op::Add { residual } => {
                Self::arity(n, 2..=2)?;
                if matches!(residual, Some(r) if *r > 1) {
                    return Err(Error::Contract(format!("node `{}`: residual index out of range", n.id)));
                }
                Ok(())
            }
            Op::Concat { .. } => Self::arity(n, 1..=usize::MAX),
            Op::FakeQuant(a) => {
                a.scheme.validate()?;
                if let Some(qp) = &a.qparams {
                    qp.validate()?;
                }
                match a.role {
                    FqRole::Weight => {
                        Self::arity(n, 0..=0)?;
                        let name = a.param.as_ref().ok_or_else(|| {
                            Error::Contract(format!("weight fake-quant `{}` names no parameter", n.id))
                        })?;
                        self.require_param(n, name)?;
                    }
                    FqRole::Activation => {
                        Self::arity(n, 1..=1)?;
                        if a.scheme.is_per_channel() {
                            return Err(Error::PolicyMismatch(format!(
                                "activation fake-quant `{}` is per-channel",
                                n.id
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}
