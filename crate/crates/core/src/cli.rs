//! Command-line front end.
//!
//! Every subcommand writes its artifact to `--out` (stdout when absent) and
//! maps library errors onto process exit codes via [`Error::exit_code`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibConfig, CalibMethod};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::graph::exec::{infer, uncalibrated};
use crate::graph::{apply_qparams, collect_qparams, load_model, load_qparams, save_model, save_qparams, Graph};
use crate::lowering::{compare_fake_real, lower, run_int, CompareReport, QuantizedGraph};
use crate::pipeline::Prepare;
use crate::qat::{accuracy, train_qat, TrainConfig};
use crate::quantizer::{backend_preset, BackendPreset, GraphPolicy, PRESET_NAMES};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "qlower", version, about = "Quantize, lower and simulate small CNN graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List backend presets, optionally filtered by name.
    Presets { filter: Option<String> },
    /// Observe a dataset and write quantizer parameters.
    Calibrate,
    /// Fold, insert quantizers, apply parameters and lower to an integer program.
    Quantize,
    /// Run a float model, its fake-quantized simulation, or an integer program.
    Run,
    /// Compare the fake-quantized simulation against the integer program.
    Compare,
    /// Calibrate, then fine-tune the quantized model.
    TrainQat,
}

#[derive(Debug, Clone, Args)]
pub struct Opts {
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub qparams: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true, default_value = "minmax")]
    pub act_calib: String,
    #[arg(long, global = true, default_value = "minmax")]
    pub wt_calib: String,
    #[arg(long, global = true)]
    pub bits: Option<u8>,
    /// Placement policy override: graph1, graph2 or graph3.
    #[arg(long, global = true)]
    pub graph: Option<String>,
    /// BN folding strategy 0-4.
    #[arg(long, global = true)]
    pub fold_bn: Option<u8>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true)]
    pub pretty: bool,
    /// JSON config: training settings for train-qat, thresholds for compare.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

/// Acceptance thresholds for `compare`; any violated bound exits with code 6.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub min_bitexact_frac: Option<f64>,
    pub max_level_diff: Option<i64>,
    pub min_cosine: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PresetRow {
    name: &'static str,
    weight: String,
    activation: String,
    graph: GraphPolicy,
    fold_bn: bool,
}

#[derive(Debug, Serialize)]
struct OutputRecord {
    id: String,
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<i32>>,
}

#[derive(Debug, Serialize)]
struct RunReport {
    mode: &'static str,
    batches: Vec<Vec<OutputRecord>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    steps: usize,
    final_loss: Option<f32>,
    accuracy: Option<f32>,
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::MissingInput(format!("{flag} is required for this subcommand")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn json_line<T: Serialize>(v: &T, pretty: bool) -> Vec<u8> {
    let mut out = if pretty {
        serde_json::to_vec_pretty(v)
    } else {
        serde_json::to_vec(v)
    }
    .expect("report serializes");
    out.push(b'\n');
    out
}

impl Opts {
    fn preset_named(&self, fallback: Option<&str>) -> Result<BackendPreset> {
        let name = self.preset.as_deref().or(fallback).unwrap_or("academic");
        let p = backend_preset(name)?;
        match self.bits {
            Some(b) => p.with_bits(b),
            None => Ok(p),
        }
    }

    fn prepare(&self) -> Result<Prepare> {
        Ok(Prepare {
            preset: self.preset_named(None)?,
            policy: self.graph.as_deref().map(GraphPolicy::parse).transpose()?,
            fold: self.fold_bn,
        })
    }

    fn calib(&self) -> Result<CalibConfig> {
        Ok(CalibConfig {
            activation: CalibMethod::parse(&self.act_calib)?,
            weight: CalibMethod::parse(&self.wt_calib)?,
            seed: self.seed.unwrap_or(0),
            threads: self.threads.max(1),
        })
    }

    fn model(&self) -> Result<Graph> {
        load_model(&read(need(&self.model, "--model")?)?)
    }

    fn dataset(&self) -> Result<Dataset> {
        load_dataset(need(&self.data, "--data")?)
    }

    /// The model with quantizers inserted and the sidecar parameters attached.
    fn fake_quantized(&self) -> Result<Graph> {
        let g = self.model()?;
        let mut fq = self.prepare()?.apply(&g)?;
        if let Some(path) = &self.qparams {
            apply_qparams(&mut fq, &load_qparams(&read(path)?)?)?;
        }
        let missing = uncalibrated(&fq);
        if !missing.is_empty() {
            return Err(Error::CalibrationRequired(missing));
        }
        Ok(fq)
    }

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

fn presets(opts: &Opts, filter: Option<&str>) -> Result<()> {
    let mut rows = Vec::new();
    for name in PRESET_NAMES {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let p = backend_preset(name)?;
        rows.push(PresetRow {
            name: p.name,
            weight: p.weight_description(),
            activation: p.activation_description(),
            graph: p.policy,
            fold_bn: p.fold_bn,
        });
    }
    if !opts.pretty {
        return emit(opts.out(), &json_line(&rows, false));
    }
    let mut s = format!("{:<10} {:<42} {:<42} {:<7} {}\n", "preset", "weight", "activation", "graph", "fold_bn");
    for r in &rows {
        s += &format!(
            "{:<10} {:<42} {:<42} {:<7} {}\n",
            r.name,
            r.weight,
            r.activation,
            r.graph.to_string(),
            if r.fold_bn { "yes" } else { "no" }
        );
    }
    emit(opts.out(), s.as_bytes())
}

fn calibrate(opts: &Opts) -> Result<()> {
    let g = opts.model()?;
    let data = opts.dataset()?;
    let calibrated = opts.prepare()?.calibrated(&g, &data, &opts.calib()?)?;
    let table = collect_qparams(&calibrated);
    log::info!("calibrated {} quantizers", table.len());
    emit(opts.out(), &save_qparams(&table))
}

fn quantize(opts: &Opts) -> Result<()> {
    let fq = opts.fake_quantized()?;
    match lower(&fq) {
        Ok(qg) => emit(opts.out(), &qg.to_json()),
        Err(Error::UnfoldedBatchNorm(id)) => {
            log::warn!("`{id}` keeps its batch norm; writing the fake-quantized model instead of a program");
            emit(opts.out(), &save_model(&fq))
        }
        Err(e) => Err(e),
    }
}

/// A lowered program is recognised by the `domain` field on its nodes.
fn is_program(bytes: &[u8]) -> bool {
    serde_json::from_slice::<serde_json::Value>(bytes)
        .ok()
        .and_then(|v| v.get("nodes")?.get(0)?.get("domain").cloned())
        .is_some()
}

fn argmax_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let n = logits.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return 0;
    }
    let width = logits.data().len() / n;
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * width..(i + 1) * width];
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == label
        })
        .count()
}

fn run(opts: &Opts) -> Result<()> {
    let data = opts.dataset()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bytes = read(need(&opts.model, "--model")?)?;
    let mut batches = Vec::with_capacity(data.len());
    let (mut hits, mut seen, mut labeled) = (0usize, 0usize, true);
    let mode;
    if is_program(&bytes) {
        mode = "integer";
        let qg = QuantizedGraph::from_json(&bytes)?;
        for b in &data.batches {
            let outs = run_int(&qg, std::slice::from_ref(&b.input))?;
            if let (Some(labels), Some(first)) = (&b.labels, outs.first()) {
                hits += argmax_hits(&first.dequantized, labels);
                seen += labels.len();
            } else {
                labeled = false;
            }
            batches.push(
                outs.into_iter()
                    .map(|o| OutputRecord {
                        id: o.id,
                        shape: o.dequantized.shape().to_vec(),
                        data: o.dequantized.into_data(),
                        levels: Some(o.values.into_data()),
                    })
                    .collect(),
            );
        }
    } else {
        let g = if opts.qparams.is_some() {
            mode = "fake-quant";
            opts.fake_quantized()?
        } else {
            mode = "float";
            load_model(&bytes)?
        };
        for b in &data.batches {
            let outs = infer(&g, std::slice::from_ref(&b.input))?;
            if let (Some(labels), Some(first)) = (&b.labels, outs.first()) {
                hits += argmax_hits(first, labels);
                seen += labels.len();
            } else {
                labeled = false;
            }
            batches.push(
                g.outputs
                    .iter()
                    .zip(outs)
                    .map(|(id, t)| OutputRecord {
                        id: id.clone(),
                        shape: t.shape().to_vec(),
                        data: t.into_data(),
                        levels: None,
                    })
                    .collect(),
            );
        }
    }
    let report = RunReport {
        mode,
        batches,
        accuracy: (labeled && seen > 0).then(|| hits as f64 / seen as f64),
    };
    emit(opts.out(), &json_line(&report, opts.pretty))
}

fn compare_table(r: &CompareReport) -> String {
    let mut s = format!("{:<24} {:>14} {:>14}\n", "node", "max_level_diff", "bitexact_frac");
    for l in &r.per_layer {
        s += &format!("{:<24} {:>14} {:>14.6}\n", l.id, l.max_level_diff, l.bitexact_frac);
    }
    s += &format!(
        "{:<24} {:>14} {:>14.6}  cosine {:.6}\n",
        "final", r.final_.max_level_diff, r.final_.bitexact_frac, r.final_.cosine
    );
    s
}

fn check_compare(r: &CompareReport, c: &CompareConfig) -> Result<()> {
    let f = &r.final_;
    if let Some(min) = c.min_bitexact_frac.filter(|&m| f.bitexact_frac < m) {
        return Err(Error::Threshold(format!("bitexact_frac {} < {min}", f.bitexact_frac)));
    }
    if let Some(max) = c.max_level_diff.filter(|&m| f.max_level_diff > m) {
        return Err(Error::Threshold(format!("max_level_diff {} > {max}", f.max_level_diff)));
    }
    if let Some(min) = c.min_cosine.filter(|&m| f.cosine < m) {
        return Err(Error::Threshold(format!("cosine {} < {min}", f.cosine)));
    }
    Ok(())
}

fn compare(opts: &Opts) -> Result<()> {
    let thresholds: CompareConfig = match &opts.config {
        Some(p) => serde_json::from_slice(&read(p)?)?,
        None => CompareConfig::default(),
    };
    let data = opts.dataset()?;
    let fq = opts.fake_quantized()?;
    let qg = lower(&fq)?;
    let report = compare_fake_real(&fq, &qg, &data)?;
    let bytes = if opts.pretty {
        compare_table(&report).into_bytes()
    } else {
        report.to_json()
    };
    emit(opts.out(), &bytes)?;
    check_compare(&report, &thresholds)
}

fn train(opts: &Opts) -> Result<()> {
    let mut cfg: TrainConfig = match &opts.config {
        Some(p) => serde_json::from_slice(&read(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let out = need(&opts.out, "--out")?;
    let g = opts.model()?;
    let data = opts.dataset()?;
    if cfg.epochs == 0 {
        return emit(Some(out), &save_model(&g));
    }
    let mut preset = opts.preset_named(cfg.preset.as_deref())?;
    if let (None, Some(bits)) = (opts.bits, cfg.bits) {
        preset = preset.with_bits(bits)?;
    }
    let prep = Prepare {
        preset,
        policy: opts.graph.as_deref().map(GraphPolicy::parse).transpose()?,
        fold: opts.fold_bn.or(cfg.fold_bn),
    };
    let calibrated = prep.calibrated(&g, &data, &opts.calib()?)?;
    let outcome = train_qat(&calibrated, &data, &cfg)?;
    emit(Some(out), &save_model(&outcome.graph))?;
    let acc = match data.batches.iter().all(|b| b.labels.is_some()) {
        true => Some(accuracy(&outcome.graph, &data)?),
        false => None,
    };
    let mut report = outcome.metrics_jsonl().into_bytes();
    report.extend(json_line(
        &TrainReport {
            steps: outcome.metrics.len(),
            final_loss: outcome.metrics.last().map(|m| m.loss),
            accuracy: acc,
        },
        false,
    ));
    emit(None, &report)?;
    match (cfg.min_accuracy, acc) {
        (Some(min), Some(a)) if a < min => Err(Error::Threshold(format!("accuracy {a} < {min}"))),
        (Some(_), None) => Err(Error::InvalidArgument("min_accuracy needs a labeled dataset".into())),
        _ => Ok(()),
    }
}

/// Runs one parsed invocation.
pub fn execute(cli: &Cli) -> Result<()> {
    let opts = &cli.opts;
    match &cli.command {
        Command::Presets { filter } => presets(opts, filter.as_deref()),
        Command::Calibrate => calibrate(opts),
        Command::Quantize => quantize(opts),
        Command::Run => run(opts),
        Command::Compare => compare(opts),
        Command::TrainQat => train(opts),
    }
}

/// Entry point of the `qlower` binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QLOWER_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_after_subcommand() {
        let cli = Cli::try_parse_from(["qlower", "calibrate", "--model", "m.json", "--seed", "7"]).unwrap();
        assert!(matches!(cli.command, Command::Calibrate));
        assert_eq!(cli.opts.seed, Some(7));
        assert_eq!(cli.opts.act_calib, "minmax");
    }
}
