//! Post-training calibration: observers and the range-selection algorithms
//! that turn observed statistics into [`QParams`].

mod bn;
mod driver;
mod histogram;
mod kld;
mod observer;

pub use bn::recalibrate_bn_stats;
pub use driver::{calibrate_graph, CalibConfig};
pub use histogram::{Histogram, BINS};
pub use kld::{kl_divergence_for, kld_search};
pub use observer::{ChannelStats, Observer, ObserverKind, MAX_NORM_ORDER, RESERVOIR_CAPACITY};

use crate::error::{Error, Result};
use crate::quantizer::{
    asymmetric_zero_point, fake_quantize_scalar, resolve_range, snap_pot, Granularity, QParams, QScheme,
    ScaleForm, Symmetry, SCALE_FLOOR,
};

pub const DEFAULT_QUANTILE: f32 = 0.9999;
pub const DEFAULT_MEANSTD_ALPHA: f32 = 3.0;
/// Clip multiplier used by DSQ weight ranges.
pub const DSQ_MEANSTD_ALPHA: f32 = 2.6;
pub const MSE_GRID: usize = 100;

/// How the Norm calibration aggregates `|x|^p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormReading {
    /// `mean(|x|^p)^(1/p)`: independent of tensor size.
    Mean,
    /// `(Σ |x|^p)^(1/p)`.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibMethod {
    MinMax,
    Quantile { alpha: f32 },
    Mse,
    Kld,
    Norm { p: u32, reading: NormReading },
    MeanStd { alpha: f32 },
}

impl CalibMethod {
    pub fn observer_kind(&self) -> ObserverKind {
        match self {
            Self::MinMax => ObserverKind::MinMax,
            Self::Quantile { .. } => ObserverKind::Quantile,
            Self::Mse => ObserverKind::Mse,
            Self::Kld => ObserverKind::Kld,
            Self::Norm { .. } => ObserverKind::Norm,
            Self::MeanStd { .. } => ObserverKind::MeanStd,
        }
    }

    /// Parses a method name. `lsq` is the LSQ initialization rule, i.e. the
    /// first-order Norm calibration.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "minmax" => Self::MinMax,
            "quantile" => Self::Quantile {
                alpha: DEFAULT_QUANTILE,
            },
            "mse" => Self::Mse,
            "kld" => Self::Kld,
            "norm" => Self::Norm {
                p: 2,
                reading: NormReading::Mean,
            },
            "norm-sum" => Self::Norm {
                p: 2,
                reading: NormReading::Sum,
            },
            "lsq" => Self::Norm {
                p: 1,
                reading: NormReading::Mean,
            },
            "meanstd" => Self::MeanStd {
                alpha: DEFAULT_MEANSTD_ALPHA,
            },
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown calibration method `{other}`"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MinMax => "minmax",
            Self::Quantile { .. } => "quantile",
            Self::Mse => "mse",
            Self::Kld => "kld",
            Self::Norm { p: 1, reading: NormReading::Mean } => "lsq",
            Self::Norm { reading: NormReading::Sum, .. } => "norm-sum",
            Self::Norm { .. } => "norm",
            Self::MeanStd { .. } => "meanstd",
        }
    }
}

pub fn calibrate(obs: &Observer, scheme: &QScheme, method: CalibMethod) -> Result<QParams> {
    match method {
        CalibMethod::MinMax => calib_minmax(obs, scheme),
        CalibMethod::Quantile { alpha } => calib_quantile(obs, scheme, alpha),
        CalibMethod::Mse => calib_mse(obs, scheme),
        CalibMethod::Kld => calib_kld(obs, scheme),
        CalibMethod::Norm { p, reading } => calib_norm(obs, scheme, p, reading),
        CalibMethod::MeanStd { alpha } => calib_meanstd(obs, scheme, alpha),
    }
}

fn nonempty(obs: &Observer) -> Result<()> {
    if obs.is_empty() {
        Err(Error::EmptyObserver(format!("{:?}", obs.kind()).to_lowercase()))
    } else {
        Ok(())
    }
}

fn check_granularity(obs: &Observer, scheme: &QScheme) -> Result<()> {
    if obs.granularity() != scheme.granularity {
        return Err(Error::InvalidArgument(format!(
            "observer granularity {:?} does not match scheme {:?}",
            obs.granularity(),
            scheme.granularity
        )));
    }
    Ok(())
}

fn per_tensor(scheme: &QScheme) -> QScheme {
    QScheme {
        granularity: Granularity::PerTensor,
        ..*scheme
    }
}

pub fn calib_minmax(obs: &Observer, scheme: &QScheme) -> Result<QParams> {
    nonempty(obs)?;
    check_granularity(obs, scheme)?;
    let lo: Vec<f32> = obs.channels().iter().map(|c| c.min).collect();
    let hi: Vec<f32> = obs.channels().iter().map(|c| c.max).collect();
    QParams::from_range_signed_by(scheme, &lo, &hi, obs.min())
}

fn samples(c: &ChannelStats) -> Result<Vec<f32>> {
    let s = c
        .samples()
        .ok_or_else(|| Error::InvalidArgument("observer does not retain samples".into()))?;
    if s.is_empty() {
        return Err(Error::EmptyObserver("sample buffer".into()));
    }
    let mut v = s.to_vec();
    v.sort_by(f32::total_cmp);
    Ok(v)
}

/// Linear-interpolated quantile of sorted data at `a·(n − 1)`.
pub fn quantile_sorted(sorted: &[f32], a: f64) -> f32 {
    let pos = a * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    let frac = (pos - i as f64) as f32;
    sorted[i] + frac * (sorted[i + 1] - sorted[i])
}

pub fn calib_quantile(obs: &Observer, scheme: &QScheme, alpha: f32) -> Result<QParams> {
    if !(alpha > 0.5 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile must lie in (0.5, 1], got {alpha}"
        )));
    }
    nonempty(obs)?;
    check_granularity(obs, scheme)?;
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for c in obs.channels() {
        let s = samples(c)?;
        let a = f64::from(alpha);
        lo.push(quantile_sorted(&s, 1.0 - a));
        hi.push(quantile_sorted(&s, a));
    }
    QParams::from_range_signed_by(scheme, &lo, &hi, obs.min())
}

/// Mean squared fake-quantization error of `x` under per-tensor `qp`.
pub fn quantization_mse(x: &[f32], qp: &QParams) -> f64 {
    let (s, z) = (qp.scale(), qp.zero_point());
    let sum: f64 = x
        .iter()
        .map(|&v| {
            let d = f64::from(v - fake_quantize_scalar(v, s, z, qp.qmin, qp.qmax));
            d * d
        })
        .sum();
    sum / x.len() as f64
}

/// Clip range for grid point `k` of the MSE search (`k = 1..=MSE_GRID`).
pub fn mse_candidate(min: f32, max: f32, k: usize) -> (f32, f32) {
    let f = k as f32 / MSE_GRID as f32;
    (f * min, f * max)
}

pub fn calib_mse(obs: &Observer, scheme: &QScheme) -> Result<QParams> {
    nonempty(obs)?;
    check_granularity(obs, scheme)?;
    let single = per_tensor(scheme);
    let data_min = obs.min();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for c in obs.channels() {
        let s = samples(c)?;
        let (smin, smax) = (s[0], s[s.len() - 1]);
        let mut best = (f64::INFINITY, smin, smax);
        for k in 1..=MSE_GRID {
            let (l, h) = mse_candidate(smin, smax, k);
            let qp = QParams::from_range_signed_by(&single, &[l], &[h], data_min)?;
            let err = quantization_mse(&s, &qp);
            if err <= best.0 {
                best = (err, l, h);
            }
        }
        lo.push(best.1);
        hi.push(best.2);
    }
    QParams::from_range_signed_by(scheme, &lo, &hi, data_min)
}

/// Number of quantization levels the KLD search merges bins into.
pub fn kld_levels(scheme: &QScheme, data_min: f32) -> usize {
    let (qmin, _) = resolve_range(scheme, data_min);
    if scheme.symmetry == Symmetry::Symmetric && qmin < 0 {
        1 << (scheme.bits - 1)
    } else {
        1 << scheme.bits
    }
}

pub fn calib_kld(obs: &Observer, scheme: &QScheme) -> Result<QParams> {
    nonempty(obs)?;
    if scheme.granularity != Granularity::PerTensor {
        return Err(Error::InvalidArgument(
            "KL-divergence calibration is per-tensor only".into(),
        ));
    }
    check_granularity(obs, scheme)?;
    let symmetric = scheme.symmetry == Symmetry::Symmetric;
    let hist = obs
        .histogram(symmetric)
        .ok_or_else(|| Error::InvalidArgument("observer has no histogram".into()))?;
    let data_min = obs.min();
    let keep = kld_search(hist.counts(), kld_levels(scheme, data_min));
    let edge = hist.edge(keep) as f32;
    if symmetric {
        let amax = obs.min().abs().max(obs.max().abs());
        let t = edge.min(amax);
        let lo = if data_min < 0.0 { -t } else { 0.0 };
        QParams::from_range_signed_by(scheme, &[lo], &[t], data_min)
    } else {
        QParams::from_range_signed_by(scheme, &[data_min], &[edge.min(obs.max())], data_min)
    }
}

pub fn calib_norm(obs: &Observer, scheme: &QScheme, p: u32, reading: NormReading) -> Result<QParams> {
    if p < 1 || p as usize > MAX_NORM_ORDER {
        return Err(Error::InvalidArgument(format!(
            "norm order must be in 1..={MAX_NORM_ORDER}, got {p}"
        )));
    }
    nonempty(obs)?;
    check_granularity(obs, scheme)?;
    let (qmin, qmax) = resolve_range(scheme, obs.min());
    let mut scales = Vec::new();
    let mut zps = Vec::new();
    for c in obs.channels() {
        let total = c.abs_pow[p as usize - 1];
        let agg = match reading {
            NormReading::Mean => total / c.count as f64,
            NormReading::Sum => total,
        };
        let norm = agg.powf(1.0 / f64::from(p));
        let mut s = ((norm * 2.0 / f64::from(qmax).sqrt()) as f32).max(SCALE_FLOOR);
        if scheme.scale_form == ScaleForm::Pot {
            s = snap_pot(s)?;
        }
        scales.push(s);
        zps.push(match scheme.symmetry {
            Symmetry::Symmetric => 0,
            Symmetry::Asymmetric => asymmetric_zero_point(c.min.min(0.0), s, qmin, qmax),
        });
    }
    QParams::new(scales, zps, qmin, qmax, scheme.scale_form)
}

pub fn calib_meanstd(obs: &Observer, scheme: &QScheme, alpha: f32) -> Result<QParams> {
    nonempty(obs)?;
    check_granularity(obs, scheme)?;
    let a = f64::from(alpha);
    let lo: Vec<f32> = obs.channels().iter().map(|c| (c.mean() - a * c.std()) as f32).collect();
    let hi: Vec<f32> = obs.channels().iter().map(|c| (c.mean() + a * c.std()) as f32).collect();
    QParams::from_range_signed_by(scheme, &lo, &hi, obs.min())
}
