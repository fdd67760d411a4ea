//! Graph-level calibration: one observer per quantizer share group, fed by
//! FP32 forward passes over a dataset.

use std::collections::HashMap;
use std::sync::Arc;

use super::{calibrate, CalibMethod, Observer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::exec::{evaluate, EvalOptions};
use crate::graph::policy::quantizer_groups;
use crate::graph::{FqRole, Graph, Op};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibConfig {
    pub activation: CalibMethod,
    pub weight: CalibMethod,
    pub seed: u64,
    /// Worker threads; the dataset is split into contiguous chunks whose
    /// observers are merged in chunk order.
    pub threads: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            activation: CalibMethod::MinMax,
            weight: CalibMethod::MinMax,
            seed: 0,
            threads: 1,
        }
    }
}

struct Groups {
    /// Node id to group index.
    of: HashMap<String, usize>,
    /// `(representative node index, role)` per group.
    reps: Vec<(usize, FqRole)>,
}

fn groups(g: &Graph) -> Groups {
    let mut of = HashMap::new();
    let mut reps = Vec::new();
    for (gi, members) in quantizer_groups(g).into_iter().enumerate() {
        let ni = g.index_of(&members[0]).expect("group member exists");
        let role = g.nodes[ni].op.fake_quant().expect("fake-quant").role;
        reps.push((ni, role));
        for m in members {
            of.insert(m, gi);
        }
    }
    Groups { of, reps }
}

fn new_observers(g: &Graph, grp: &Groups, cfg: &CalibConfig, stream: u64) -> Result<Vec<Observer>> {
    grp.reps
        .iter()
        .enumerate()
        .map(|(gi, &(ni, role))| {
            let a = g.nodes[ni].op.fake_quant().expect("fake-quant");
            let method = match role {
                FqRole::Activation => cfg.activation,
                FqRole::Weight => cfg.weight,
            };
            let seed = cfg.seed ^ (stream << 32) ^ gi as u64;
            Observer::with_seed(method.observer_kind(), a.scheme.granularity, seed)
        })
        .collect()
}

fn observe_chunk(
    g: &Graph,
    grp: &Groups,
    cfg: &CalibConfig,
    batches: &[&Tensor],
    stream: u64,
    weights: bool,
) -> Result<Vec<Observer>> {
    let mut obs = new_observers(g, grp, cfg, stream)?;
    for (bi, x) in batches.iter().enumerate() {
        let weights_now = weights && bi == 0;
        let mut cb = |id: &str, t: &Tensor| -> Result<()> {
            let gi = grp.of[id];
            if grp.reps[gi].1 == FqRole::Weight && !weights_now {
                return Ok(());
            }
            obs[gi].observe(t)
        };
        evaluate(g, std::slice::from_ref(*x), EvalOptions::FLOAT, Some(&mut cb))?;
    }
    Ok(obs)
}

/// Attaches `QParams` to every fake-quant node of `g`.
pub fn calibrate_graph(g: &Graph, data: &Dataset, cfg: &CalibConfig) -> Result<Graph> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grp = groups(g);
    let inputs: Vec<&Tensor> = data.inputs().collect();
    let threads = cfg.threads.clamp(1, inputs.len());
    let chunk = inputs.len().div_ceil(threads);
    let parts: Vec<&[&Tensor]> = inputs.chunks(chunk).collect();
    let results: Vec<Result<Vec<Observer>>> = if parts.len() == 1 {
        vec![observe_chunk(g, &grp, cfg, parts[0], 0, true)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let grp = &grp;
                    s.spawn(move || observe_chunk(g, grp, cfg, p, i as u64, i == 0))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("calibration worker panicked"))
                .collect()
        })
    };
    let mut merged: Option<Vec<Observer>> = None;
    for r in results {
        let obs = r?;
        match &mut merged {
            None => merged = Some(obs),
            Some(m) => {
                for (a, b) in m.iter_mut().zip(&obs) {
                    a.merge(b)?;
                }
            }
        }
    }
    let merged = merged.expect("at least one chunk");
    let mut params = Vec::with_capacity(merged.len());
    for (gi, obs) in merged.iter().enumerate() {
        let (ni, role) = grp.reps[gi];
        let a = g.nodes[ni].op.fake_quant().expect("fake-quant");
        let method = match role {
            FqRole::Activation => cfg.activation,
            FqRole::Weight => cfg.weight,
        };
        if obs.is_empty() {
            return Err(Error::EmptyObserver(g.nodes[ni].id.clone()));
        }
        params.push(Arc::new(calibrate(obs, &a.scheme, method)?));
    }
    let mut out = g.clone();
    for n in &mut out.nodes {
        if let Op::FakeQuant(a) = &mut n.op {
            a.qparams = Some(params[grp.of[&n.id]].clone());
        }
    }
    out.validate()?;
    Ok(out)
}
