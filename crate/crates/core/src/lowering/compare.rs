//! Paired comparison of the fake-quantized simulation and the integer program.

use serde::{Deserialize, Serialize};

use super::run::{execute, Value};
use super::{Domain, QuantizedGraph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::exec::{evaluate, EvalOptions};
use crate::graph::{FqRole, Graph, Op};
use crate::quantizer::quantize_scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub id: String,
    pub max_level_diff: i64,
    pub bitexact_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    /// Output elements compared.
    pub elements: u64,
    pub max_level_diff: i64,
    pub bitexact_frac: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub per_layer: Vec<LayerReport>,
    #[serde(rename = "final")]
    pub final_: FinalReport,
}

impl CompareReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec(self).expect("report serializes");
        v.push(b'\n');
        v
    }

    /// Level differences other than 0 and ±1 anywhere in the report.
    pub fn within_one_level(&self) -> bool {
        self.final_.max_level_diff <= 1 && self.per_layer.iter().all(|l| l.max_level_diff <= 1)
    }
}

#[derive(Default)]
struct Tally {
    max: i64,
    same: u64,
    total: u64,
}

impl Tally {
    fn add(&mut self, a: i32, b: i32) {
        let d = (i64::from(a) - i64::from(b)).abs();
        self.max = self.max.max(d);
        self.same += u64::from(d == 0);
        self.total += 1;
    }

    fn frac(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.same as f64 / self.total as f64
        }
    }
}

/// Fake-path value placed on the integer grid of `domain`.
fn levels(domain: &Domain, y: &Tensor) -> Vec<i32> {
    match domain {
        Domain::Float => Vec::new(),
        Domain::Int {
            scale,
            zero_point,
            qmin,
            qmax,
        } => y
            .data()
            .iter()
            .map(|&v| quantize_scalar(v, *scale, *zero_point, *qmin, *qmax))
            .collect(),
        Domain::Acc { scales } => {
            let shape = y.shape();
            let inner: usize = shape.get(2..).map_or(1, |s| s.iter().product());
            let channels = shape.get(1).copied().unwrap_or(1);
            y.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let s = scales[if scales.len() == 1 { 0 } else { (i / inner) % channels }];
                    (f64::from(v) / s).round_ties_even().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
                })
                .collect()
        }
    }
}

fn check_topology(g: &Graph, qg: &QuantizedGraph) -> Result<()> {
    if !g.has_fake_quant() {
        return Err(Error::TopologyMismatch("reference graph carries no quantizers".into()));
    }
    let expected: Vec<&str> = g
        .nodes
        .iter()
        .filter(|n| !matches!(&n.op, Op::FakeQuant(a) if a.role == FqRole::Weight))
        .map(|n| n.id.as_str())
        .collect();
    let got: Vec<&str> = qg.nodes.iter().map(|n| n.id.as_str()).collect();
    if expected != got {
        let at = expected.iter().zip(&got).position(|(a, b)| a != b).unwrap_or(expected.len().min(got.len()));
        return Err(Error::TopologyMismatch(format!(
            "node lists diverge at position {at}: `{}` vs `{}`",
            expected.get(at).unwrap_or(&"<end>"),
            got.get(at).unwrap_or(&"<end>")
        )));
    }
    if g.outputs != qg.outputs {
        return Err(Error::TopologyMismatch("graph outputs differ".into()));
    }
    Ok(())
}

/// Runs both paths over `data` and reports per-node and final level agreement.
pub fn compare_fake_real(g: &Graph, qg: &QuantizedGraph, data: &Dataset) -> Result<CompareReport> {
    check_topology(g, qg)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let compared: Vec<_> = qg.nodes.iter().filter(|n| n.domain != Domain::Float).collect();
    let mut tallies: Vec<Tally> = compared.iter().map(|_| Tally::default()).collect();
    let mut fin = Tally::default();
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for batch in &data.batches {
        let inputs = std::slice::from_ref(&batch.input);
        let fake = evaluate(g, inputs, EvalOptions::QUANT, None)?;
        let real = execute(qg, inputs)?;
        for (node, tally) in compared.iter().zip(&mut tallies) {
            let y = fake.value(&node.id)?;
            let Some(Value::Int { shape, data }) = real.get(&node.id) else {
                return Err(Error::TopologyMismatch(format!("`{}` has no integer value", node.id)));
            };
            if y.shape() != shape.as_slice() {
                return Err(Error::TopologyMismatch(format!(
                    "`{}` has shape {:?} in the simulation but {shape:?} in the program",
                    node.id,
                    y.shape()
                )));
            }
            let want = levels(&node.domain, y);
            for (&a, &b) in data.iter().zip(&want) {
                tally.add(a, b);
            }
            if qg.outputs.contains(&node.id) {
                for (&a, &b) in data.iter().zip(&want) {
                    fin.add(a, b);
                }
                let deq = super::run::dequantize_value(&node.domain, shape, data)?;
                for (&r, &f) in deq.data().iter().zip(y.data()) {
                    let (r, f) = (f64::from(r), f64::from(f));
                    dot += r * f;
                    na += r * r;
                    nb += f * f;
                }
            }
        }
    }
    let cosine = if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    };
    Ok(CompareReport {
        per_layer: compared
            .iter()
            .zip(&tallies)
            .map(|(n, t)| LayerReport {
                id: n.id.clone(),
                max_level_diff: t.max,
                bitexact_frac: t.frac(),
            })
            .collect(),
        final_: FinalReport {
            elements: fin.total,
            max_level_diff: fin.max,
            bitexact_frac: fin.frac(),
            cosine,
        },
    })
}
