//! Re-estimation of BN running statistics under quantization.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::exec::{evaluate, EvalOptions};
use crate::graph::{Graph, Op};
use crate::tensor::Tensor;

/// Forwards every batch with quantizers active and BN normalizing by batch
/// statistics, then replaces each BN's running mean and variance by the
/// average of its per-batch statistics.
pub fn recalibrate_bn_stats(g: &Graph, data: &Dataset) -> Result<Graph> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let opts = EvalOptions {
        quantize: g.has_fake_quant(),
        batch_stats: true,
    };
    let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for x in data.inputs() {
        let trace = evaluate(g, std::slice::from_ref(x), opts, None)?;
        for (id, (m, v)) in trace.bn_stats {
            let e = sums
                .entry(id)
                .or_insert_with(|| (vec![0.0; m.len()], vec![0.0; v.len()]));
            for (a, b) in e.0.iter_mut().zip(&m) {
                *a += f64::from(*b);
            }
            for (a, b) in e.1.iter_mut().zip(&v) {
                *a += f64::from(*b);
            }
        }
    }
    let n = data.len() as f64;
    let mut out = g.clone();
    for (id, (m, v)) in sums {
        let node = out.node(&id).expect("stats come from graph nodes");
        let (mean_name, var_name) = match &node.op {
            Op::Bn(a) => (a.mean.clone(), a.var.clone()),
            op => {
                let bn = op.layer().and_then(|l| l.bn.as_ref()).expect("fused layer");
                (bn.mean.clone(), bn.var.clone())
            }
        };
        let avg = |s: Vec<f64>| Tensor::from_vec(s.into_iter().map(|x| (x / n) as f32).collect());
        out.params.insert(mean_name, avg(m));
        out.params.insert(var_name, avg(v));
    }
    Ok(out)
}
