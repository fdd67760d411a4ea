//! Fake-quantize insertion policies and the graph scans that verify them.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::ir::{FakeQuantAttrs, FqRole, Graph, Kernel, Node, Op};
use crate::error::{Error, Result};
use crate::quantizer::{BackendPreset, Granularity, GraphPolicy, QScheme};

/// Index of the add input treated as the residual (non-shortcut) branch.
///
/// Explicit `residual` attributes win. Otherwise the input produced by a
/// conv/linear/bn node is the residual; when both are, input 0 is.
pub fn residual_slot(g: &Graph, add: &Node) -> usize {
    if let Op::Add { residual: Some(r) } = add.op {
        return r;
    }
    let layer_like = |id: &str| {
        g.node(id)
            .is_some_and(|n| matches!(n.op, Op::Conv2d(_) | Op::Linear(_) | Op::Bn(_)))
    };
    if !layer_like(&add.inputs[0]) && layer_like(&add.inputs[1]) {
        1
    } else {
        0
    }
}

fn activation_fq(scheme: QScheme, share_group: Option<String>) -> Op {
    Op::FakeQuant(FakeQuantAttrs {
        role: FqRole::Activation,
        param: None,
        scheme,
        qparams: None,
        kernel: Kernel::Fixed,
        share_group,
    })
}

fn check_preset(preset: &BackendPreset) -> Result<()> {
    if preset.activation.is_per_channel() {
        return Err(Error::PolicyMismatch(format!(
            "preset `{}` requests a per-channel activation scheme",
            preset.name
        )));
    }
    if let Granularity::PerChannel { axis } = preset.weight.granularity {
        if axis != 0 {
            return Err(Error::PolicyMismatch(format!(
                "per-channel weights must use the output-channel axis 0, got {axis}"
            )));
        }
    }
    preset.weight.validate()?;
    preset.activation.validate()
}

pub fn insert_fake_quant(g: &Graph, preset: &BackendPreset) -> Result<Graph> {
    insert_fake_quant_with(g, preset, preset.policy)
}

/// Inserts fake-quant nodes according to `policy` using the preset's schemes.
pub fn insert_fake_quant_with(g: &Graph, preset: &BackendPreset, policy: GraphPolicy) -> Result<Graph> {
    if g.has_fake_quant() {
        return Err(Error::AlreadyQuantized);
    }
    check_preset(preset)?;
    g.validate()?;
    let shared = policy != GraphPolicy::Graph1;

    // Consumer edges that must read a quantized value.
    let mut wants: HashSet<(usize, usize)> = HashSet::new();
    for (ni, n) in g.nodes.iter().enumerate() {
        match &n.op {
            Op::Conv2d(_) | Op::Linear(_) => {
                wants.insert((ni, 0));
            }
            Op::Add { .. } if shared => {
                let r = residual_slot(g, n);
                for slot in 0..2 {
                    if policy == GraphPolicy::Graph3 || slot != r {
                        wants.insert((ni, slot));
                    }
                }
            }
            _ => {}
        }
    }
    // Under shared policies concat inputs get one grouped quantizer per edge,
    // which leaves the concat output on the shared grid already.
    let mut quantized_values: HashSet<String> = HashSet::new();
    if shared {
        for n in &g.nodes {
            if matches!(n.op, Op::Concat { .. }) {
                quantized_values.insert(n.id.clone());
            }
        }
    }
    let mut shared_values: HashSet<String> = HashSet::new();
    if shared {
        for &(ni, slot) in &wants {
            let v = &g.nodes[ni].inputs[slot];
            if !quantized_values.contains(v) {
                shared_values.insert(v.clone());
            }
        }
        for o in &g.outputs {
            if !quantized_values.contains(o) {
                shared_values.insert(o.clone());
            }
        }
    }

    let mut nodes: Vec<Node> = Vec::with_capacity(g.nodes.len() * 2);
    let mut defined: HashSet<String> = HashSet::new();
    for (ni, n) in g.nodes.iter().enumerate() {
        let mut node = n.clone();
        if n.op.is_layer() {
            let attrs = n.op.layer().expect("layer node");
            let wq = format!("{}.wq", n.id);
            nodes.push(Node {
                id: wq.clone(),
                op: Op::FakeQuant(FakeQuantAttrs {
                    role: FqRole::Weight,
                    param: Some(attrs.weight.clone()),
                    scheme: preset.weight,
                    qparams: None,
                    kernel: Kernel::Fixed,
                    share_group: None,
                }),
                inputs: vec![],
            });
            node.inputs.truncate(1);
            node.inputs.push(wq);
            if let Some(l) = node.op.layer_mut() {
                l.quant_bias = preset.is_hardware();
            }
        }
        for slot in 0..n.inputs.len() {
            let v = n.inputs[slot].clone();
            let edge_wanted = wants.contains(&(ni, slot));
            if matches!(n.op, Op::Concat { .. }) && shared {
                let id = format!("{}.q{slot}", n.id);
                nodes.push(Node {
                    id: id.clone(),
                    op: activation_fq(preset.activation, Some(n.id.clone())),
                    inputs: vec![v],
                });
                node.inputs[slot] = id;
            } else if edge_wanted && shared {
                if !quantized_values.contains(&v) {
                    node.inputs[slot] = format!("{v}.q");
                }
            } else if edge_wanted {
                let id = format!("{}.xq", n.id);
                nodes.push(Node {
                    id: id.clone(),
                    op: activation_fq(preset.activation, None),
                    inputs: vec![v],
                });
                node.inputs[slot] = id;
            }
        }
        let id = n.id.clone();
        nodes.push(node);
        if shared_values.contains(&id) && defined.insert(id.clone()) {
            nodes.push(Node {
                id: format!("{id}.q"),
                op: activation_fq(preset.activation, None),
                inputs: vec![id],
            });
        }
    }
    let outputs = g
        .outputs
        .iter()
        .map(|o| if shared_values.contains(o) { format!("{o}.q") } else { o.clone() })
        .collect();
    let out = Graph {
        inputs: g.inputs.clone(),
        outputs,
        nodes,
        params: g.params.clone(),
    };
    out.validate()?;
    Ok(out)
}

/// Whether value `id` is already quantized: a fake-quant output, or a concat
/// whose inputs all are.
pub fn is_quantized_value(g: &Graph, id: &str) -> bool {
    match g.node(id).map(|n| &n.op) {
        Some(Op::FakeQuant(a)) => a.role == FqRole::Activation,
        Some(Op::Concat { .. }) => {
            let n = g.node(id).expect("node exists");
            n.inputs.iter().all(|i| is_quantized_value(g, i))
        }
        _ => false,
    }
}

/// Counts gathered by [`scan_policy`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyScan {
    pub weight_quantizers: usize,
    pub activation_quantizers: usize,
    /// `(add id, number of quantized inputs)`.
    pub adds: Vec<(String, usize)>,
    pub concat_groups: usize,
}

/// Checks `g` against the placement rules of `policy`.
pub fn scan_policy(g: &Graph, policy: GraphPolicy) -> Result<PolicyScan> {
    let mut scan = PolicyScan::default();
    let bad = |msg: String| Err(Error::PolicyMismatch(msg));
    for (ni, n) in g.nodes.iter().enumerate() {
        match &n.op {
            Op::FakeQuant(a) => {
                match a.role {
                    FqRole::Weight => scan.weight_quantizers += 1,
                    FqRole::Activation => scan.activation_quantizers += 1,
                }
                if policy == GraphPolicy::Graph1 {
                    for (ci, slot) in g.consumers(&n.id) {
                        let c = &g.nodes[ci];
                        let ok = c.op.is_layer()
                            && match a.role {
                                FqRole::Activation => slot == 0,
                                FqRole::Weight => slot == 1,
                            };
                        if !ok {
                            return bad(format!(
                                "graph1: quantizer `{}` feeds `{}` ({})",
                                n.id,
                                c.id,
                                c.op.name()
                            ));
                        }
                    }
                    if g.outputs.contains(&n.id) {
                        return bad(format!("graph1: output `{}` is quantized", n.id));
                    }
                }
            }
            Op::Conv2d(_) | Op::Linear(_) => {
                if !is_quantized_value(g, &n.inputs[0]) {
                    return bad(format!("layer `{}` reads an unquantized activation", n.id));
                }
                if g.weight_quant(n).is_none() {
                    return bad(format!("layer `{}` has no weight quantizer", n.id));
                }
                if policy == GraphPolicy::Graph1 {
                    // Each layer owns its activation quantizer.
                    let fq = &n.inputs[0];
                    let owners = g
                        .consumers(fq)
                        .into_iter()
                        .filter(|&(ci, _)| ci != ni)
                        .count();
                    if owners > 0 {
                        return bad(format!("graph1: activation quantizer `{fq}` is shared"));
                    }
                }
            }
            Op::Add { .. } => {
                let q = n.inputs.iter().filter(|i| is_quantized_value(g, i)).count();
                scan.adds.push((n.id.clone(), q));
                let want = match policy {
                    GraphPolicy::Graph1 => 0,
                    GraphPolicy::Graph2 => 1,
                    GraphPolicy::Graph3 => 2,
                };
                if q != want {
                    return bad(format!(
                        "{policy}: add `{}` has {q} quantized inputs, expected {want}",
                        n.id
                    ));
                }
            }
            Op::Concat { .. } if policy != GraphPolicy::Graph1 => {
                scan.concat_groups += 1;
                let mut arcs = Vec::new();
                let mut groups = HashSet::new();
                for i in &n.inputs {
                    match g.node(i).map(|x| &x.op) {
                        Some(Op::FakeQuant(a)) => {
                            groups.insert(a.share_group.clone());
                            arcs.push(a.qparams.clone());
                        }
                        _ => return bad(format!("concat `{}` input `{i}` is unquantized", n.id)),
                    }
                }
                if groups.len() != 1 || groups.contains(&None) {
                    return bad(format!("concat `{}` inputs are not in one share group", n.id));
                }
                if arcs.iter().any(Option::is_some) {
                    let first = arcs[0].as_ref();
                    let same = arcs.iter().all(|a| match (a.as_ref(), first) {
                        (Some(x), Some(y)) => Arc::ptr_eq(x, y),
                        _ => false,
                    });
                    if !same {
                        return bad(format!("concat `{}` inputs hold distinct QParams", n.id));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(scan)
}

/// Groups fake-quant node ids by share group (ungrouped nodes stand alone).
pub fn quantizer_groups(g: &Graph) -> Vec<Vec<String>> {
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut by_group: HashMap<String, usize> = HashMap::new();
    for (n, a) in g.fake_quant_nodes() {
        match &a.share_group {
            Some(grp) => match by_group.get(grp) {
                Some(&i) => order[i].push(n.id.clone()),
                None => {
                    by_group.insert(grp.clone(), order.len());
                    order.push(vec![n.id.clone()]);
                }
            },
            None => order.push(vec![n.id.clone()]),
        }
    }
    order
}
