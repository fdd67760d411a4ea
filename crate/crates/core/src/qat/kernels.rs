//! Trainable quantizer kernels: forward values and their gradient rules.
//!
//! Every kernel takes an optional channel axis; `None` means one parameter
//! for the whole tensor.

use crate::calibration::DSQ_MEANSTD_ALPHA;
use crate::error::{Error, Result};
use crate::quantizer::{Granularity, QParams, QScheme, ScaleForm, Signedness, Symmetry, SCALE_FLOOR};
use crate::tensor::ops::axis_layout;
use crate::tensor::Tensor;

/// PACT lower bound after projection.
pub const PACT_ALPHA_FLOOR: f32 = 1e-4;
pub const PACT_INIT_ALPHA: f32 = 6.0;
pub const PACT_INIT_BETA: f32 = -6.0;
/// Shape parameter of the DSQ soft cell.
pub const DSQ_ALPHA: f32 = 0.4;
/// EMA momentum of DSQ activation ranges.
pub const DSQ_RANGE_MOMENTUM: f32 = 0.9;

fn layout(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize)> {
    match axis {
        None => Ok((1, 1, shape.iter().product())),
        Some(a) => axis_layout("qat", shape, a),
    }
}

/// Calls `f(channel, flat index)` for every element.
fn for_each_channel(shape: &[usize], axis: Option<usize>, mut f: impl FnMut(usize, usize)) -> Result<usize> {
    let (outer, c, inner) = layout(shape, axis)?;
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                f(ch, i);
            }
        }
    }
    Ok(c)
}

fn check_len(what: &str, n: usize, c: usize) -> Result<()> {
    if n == c {
        Ok(())
    } else {
        Err(Error::shape("qat", format!("{n} {what} for {c} channels")))
    }
}

/// Largest positive level `N_max`, at least 1.
pub fn n_max(qmax: i32) -> f32 {
    qmax.max(1) as f32
}

/// LSQ gradient scale `1 / √(M · N_max)`.
pub fn lsq_grad_scale(m: usize, qmax: i32) -> f32 {
    1.0 / ((m.max(1) as f64) * f64::from(n_max(qmax))).sqrt() as f32
}

/// Initial LSQ state for a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LsqInit {
    pub scales: Vec<f32>,
    pub grad_scale: Vec<f32>,
    pub qmin: i32,
    pub qmax: i32,
}

/// `s = 2·mean|w| / √N_max` per scale, with `g = 1/√(M·N_max)` where `M` is
/// the number of elements governed by that scale.
pub fn lsq_init(w: &Tensor, scheme: &QScheme) -> Result<LsqInit> {
    scheme.validate()?;
    let axis = scheme.channel_axis();
    let data_min = w.data().iter().copied().fold(f32::INFINITY, f32::min);
    let (qmin, qmax) = crate::quantizer::resolve_range(scheme, data_min);
    let (outer, c, inner) = layout(w.shape(), axis)?;
    let mut sums = vec![0.0f64; c];
    for_each_channel(w.shape(), axis, |ch, i| sums[ch] += f64::from(w.data()[i].abs()))?;
    let m = outer * inner;
    let root = f64::from(n_max(qmax)).sqrt();
    let scales = sums
        .iter()
        .map(|s| ((2.0 * s / m as f64 / root) as f32).max(SCALE_FLOOR))
        .collect();
    Ok(LsqInit {
        scales,
        grad_scale: vec![lsq_grad_scale(m, qmax); c],
        qmin,
        qmax,
    })
}

/// LSQ forward with a continuous zero-point:
/// `y = (clip(round(x/s + z), qmin, qmax) − z) · s`.
pub fn lsq_forward(x: &Tensor, scales: &[f32], zps: &[f32], qmin: i32, qmax: i32, axis: Option<usize>) -> Result<Tensor> {
    let mut out = vec![0.0f32; x.numel()];
    let d = x.data();
    let c = for_each_channel(x.shape(), axis, |ch, i| {
        let (s, z) = (scales[ch.min(scales.len() - 1)], zps[ch.min(zps.len() - 1)]);
        let q = (d[i] / s + z).round_ties_even().clamp(qmin as f32, qmax as f32);
        out[i] = (q - z) * s;
    })?;
    check_len("scales", scales.len(), c)?;
    check_len("zero-points", zps.len(), c)?;
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqGrads {
    pub dx: Tensor,
    /// Scaled by the gradient scale.
    pub ds: Vec<f32>,
    /// Scaled by the gradient scale.
    pub dz: Vec<f32>,
}

/// LSQ / LSQ+ gradients. With `v = x/s + z`:
///
/// | region        | dx | ds                 | dz      |
/// |---------------|----|--------------------|---------|
/// | `qmin ≤ v ≤ qmax` | up | `(round(v) − v)·g·up` | 0 |
/// | `v < qmin`    | 0  | `(qmin − z)·g·up`  | `−s·g·up` |
/// | `v > qmax`    | 0  | `(qmax − z)·g·up`  | `−s·g·up` |
#[allow(clippy::too_many_arguments)]
pub fn lsq_backward(
    x: &Tensor,
    scales: &[f32],
    zps: &[f32],
    qmin: i32,
    qmax: i32,
    axis: Option<usize>,
    grad_scale: &[f32],
    up: &Tensor,
) -> Result<LsqGrads> {
    let (_, c, _) = layout(x.shape(), axis)?;
    check_len("scales", scales.len(), c)?;
    check_len("zero-points", zps.len(), c)?;
    check_len("gradient scales", grad_scale.len(), c)?;
    let d = x.data();
    let u = up.data();
    let mut dx = vec![0.0f32; x.numel()];
    let mut ds = vec![0.0f64; c];
    let mut dz = vec![0.0f64; c];
    for_each_channel(x.shape(), axis, |ch, i| {
        let (s, z) = (scales[ch], zps[ch]);
        let v = d[i] / s + z;
        let up = f64::from(u[i]);
        if v < qmin as f32 {
            ds[ch] += f64::from(qmin as f32 - z) * up;
            dz[ch] -= f64::from(s) * up;
        } else if v > qmax as f32 {
            ds[ch] += f64::from(qmax as f32 - z) * up;
            dz[ch] -= f64::from(s) * up;
        } else {
            dx[i] = u[i];
            ds[ch] += f64::from(v.round_ties_even() - v) * up;
        }
    })?;
    Ok(LsqGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        ds: ds.iter().zip(grad_scale).map(|(v, g)| (*v * f64::from(*g)) as f32).collect(),
        dz: dz.iter().zip(grad_scale).map(|(v, g)| (*v * f64::from(*g)) as f32).collect(),
    })
}

/// Clipping interval family of a PACT quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// `[0, α]`.
    Unsigned,
    /// `[−α, α]`.
    Symmetric,
    /// `[β, α]`.
    Asymmetric,
}

impl ClipMode {
    /// Interval family implied by a scheme; adaptive signedness follows the
    /// calibrated range when one is known.
    pub fn for_scheme(scheme: &QScheme, calibrated: Option<&QParams>) -> Self {
        match scheme.symmetry {
            Symmetry::Asymmetric => ClipMode::Asymmetric,
            Symmetry::Symmetric => match scheme.signedness {
                Signedness::Unsigned => ClipMode::Unsigned,
                Signedness::Signed => ClipMode::Symmetric,
                Signedness::Adaptive => match calibrated {
                    Some(q) if q.qmin < 0 => ClipMode::Symmetric,
                    _ => ClipMode::Unsigned,
                },
            },
        }
    }

    pub fn bounds(self, alpha: f32, beta: f32) -> (f32, f32) {
        match self {
            ClipMode::Unsigned => (0.0, alpha),
            ClipMode::Symmetric => (-alpha, alpha),
            ClipMode::Asymmetric => (beta, alpha),
        }
    }
}

fn per_tensor(scheme: &QScheme) -> QScheme {
    QScheme {
        granularity: Granularity::PerTensor,
        ..*scheme
    }
}

/// Parameters of a fixed clipping interval, with adaptive signedness
/// resolved by the interval's lower end.
pub fn range_qparams(scheme: &QScheme, lo: f32, hi: f32) -> Result<QParams> {
    QParams::from_range_signed_by(&per_tensor(scheme), &[lo], &[hi], lo)
}

pub fn pact_qparams(scheme: &QScheme, mode: ClipMode, alpha: f32, beta: f32) -> Result<QParams> {
    let (lo, hi) = mode.bounds(alpha, beta);
    range_qparams(scheme, lo, hi)
}

/// `fake_quantize(clip(x, lo, hi))` with parameters derived from the interval.
pub fn pact_forward(x: &Tensor, scheme: &QScheme, mode: ClipMode, alpha: f32, beta: f32) -> Result<Tensor> {
    let (lo, hi) = mode.bounds(alpha, beta);
    let qp = range_qparams(scheme, lo, hi)?;
    let (s, z) = (qp.scale(), qp.zero_point());
    Ok(x.map(|v| crate::quantizer::fake_quantize_scalar(v.clamp(lo, hi), s, z, qp.qmin, qp.qmax)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PactGrads {
    pub dx: Tensor,
    pub dalpha: f32,
    pub dbeta: f32,
}

/// Straight-through inside the interval; the clip parameters collect the
/// upstream gradient of the elements they saturate.
pub fn pact_backward(x: &Tensor, mode: ClipMode, alpha: f32, beta: f32, up: &Tensor) -> PactGrads {
    let (lo, hi) = mode.bounds(alpha, beta);
    let mut dx = vec![0.0f32; x.numel()];
    let (mut da, mut db) = (0.0f64, 0.0f64);
    for (i, (&v, &u)) in x.data().iter().zip(up.data()).enumerate() {
        if v >= hi {
            da += f64::from(u);
        } else if v <= lo {
            match mode {
                ClipMode::Unsigned => {}
                ClipMode::Symmetric => da -= f64::from(u),
                ClipMode::Asymmetric => db += f64::from(u),
            }
        } else {
            dx[i] = u;
        }
    }
    PactGrads {
        dx: Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        dalpha: da as f32,
        dbeta: db as f32,
    }
}

/// `tanh(w) / max|tanh(w)|` and the normalizer. All-zero weights pass
/// through with normalizer 1.
pub fn dorefa_weight_transform(w: &Tensor) -> (Tensor, f32) {
    let t = w.map(f32::tanh);
    let m = t.abs_max();
    if m > 0.0 {
        (t.map(|v| v / m), m)
    } else {
        (w.clone(), 1.0)
    }
}

/// Gradient of the transform with the normalizer held constant.
pub fn dorefa_weight_backward(w: &Tensor, normalizer: f32, up: &Tensor) -> Result<Tensor> {
    w.zip_map(up, |v, u| {
        let t = v.tanh();
        u * (1.0 - t * t) / normalizer
    })
}

/// Parameters for transformed DoReFa weights: `s = 2/(N_max − N_min)` for
/// symmetric schemes, `(max − min)/(N_max − N_min)` for asymmetric ones.
pub fn dorefa_weight_qparams(scheme: &QScheme, w_tilde: &Tensor) -> Result<QParams> {
    let channels = match scheme.granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel { axis } => axis_layout("dorefa", w_tilde.shape(), axis)?.1,
    };
    let (qmin, qmax) = crate::quantizer::resolve_range(scheme, -1.0);
    let levels = (qmax - qmin) as f32;
    match scheme.symmetry {
        Symmetry::Symmetric => {
            let s = 2.0 / levels;
            let s = match scheme.scale_form {
                ScaleForm::Pot => crate::quantizer::snap_pot(s)?,
                ScaleForm::Fp32 => s,
            };
            QParams::new(vec![s; channels], vec![0; channels], qmin, qmax, scheme.scale_form)
        }
        Symmetry::Asymmetric => {
            let (lo, hi) = channel_range(w_tilde, scheme.channel_axis())?;
            QParams::from_range_signed_by(scheme, &lo, &hi, -1.0)
        }
    }
}

/// DoReFa activation interval: `[0, 1]`, or `[−1, 1]` for signed schemes.
pub fn dorefa_act_qparams(scheme: &QScheme, calibrated: Option<&QParams>) -> Result<QParams> {
    match ClipMode::for_scheme(scheme, calibrated) {
        ClipMode::Unsigned => range_qparams(scheme, 0.0, 1.0),
        _ => range_qparams(scheme, -1.0, 1.0),
    }
}

/// Per-channel (min, max).
pub fn channel_range(x: &Tensor, axis: Option<usize>) -> Result<(Vec<f32>, Vec<f32>)> {
    let (_, c, _) = layout(x.shape(), axis)?;
    let mut lo = vec![f32::INFINITY; c];
    let mut hi = vec![f32::NEG_INFINITY; c];
    for_each_channel(x.shape(), axis, |ch, i| {
        lo[ch] = lo[ch].min(x.data()[i]);
        hi[ch] = hi[ch].max(x.data()[i]);
    })?;
    Ok((lo, hi))
}

/// DSQ weight clip range `μ ± 2.6σ` per channel.
pub fn dsq_weight_range(w: &Tensor, axis: Option<usize>) -> Result<(Vec<f32>, Vec<f32>)> {
    let (outer, c, inner) = layout(w.shape(), axis)?;
    let n = (outer * inner) as f64;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for_each_channel(w.shape(), axis, |ch, i| {
        let v = f64::from(w.data()[i]);
        sum[ch] += v;
        sq[ch] += v * v;
    })?;
    let k = f64::from(DSQ_MEANSTD_ALPHA);
    let mut lo = Vec::with_capacity(c);
    let mut hi = Vec::with_capacity(c);
    for ch in 0..c {
        let mean = sum[ch] / n;
        let std = (sq[ch] / n - mean * mean).max(0.0).sqrt();
        lo.push((mean - k * std) as f32);
        hi.push((mean + k * std) as f32);
    }
    Ok((lo, hi))
}

/// `(k, s_c)` of the soft cell: `k = ln(2/α − 1)/Δ`, `s_c = 1/(1 − α)`.
pub fn dsq_constants(delta: f32, alpha: f32) -> Result<(f32, f32)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("DSQ cell width must be > 0, got {delta}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("DSQ shape must lie in (0, 1), got {alpha}")));
    }
    Ok(((2.0 / alpha - 1.0).ln() / delta, 1.0 / (1.0 - alpha)))
}

/// Soft-quantizer value and derivative at `x` on the grid `(s, z, qmin, qmax)`.
///
/// Cells are centered on the quantization levels, so `x` at a level maps to
/// that level and neighboring cells meet with equal values at the midpoints.
pub fn dsq_soft_scalar(x: f32, s: f32, z: i32, qmin: i32, qmax: i32, alpha: f32) -> Result<(f32, f32)> {
    let (k, sc) = dsq_constants(s, alpha)?;
    let lo = (qmin - z) as f32 * s;
    let hi = (qmax - z) as f32 * s;
    if x <= lo {
        return Ok((lo, 0.0));
    }
    if x >= hi {
        return Ok((hi, 0.0));
    }
    let i = ((x - lo) / s).round_ties_even();
    let m = lo + i * s;
    let t = (k * (x - m)).tanh();
    let half = 0.5 * s;
    Ok((m + half * sc * t, half * sc * k * (1.0 - t * t)))
}

/// Soft value of the cell centered on `level`, evaluated at any `x`.
pub fn dsq_cell_value(x: f32, level: f32, s: f32, alpha: f32) -> Result<f32> {
    let (k, sc) = dsq_constants(s, alpha)?;
    Ok(level + 0.5 * s * sc * (k * (x - level)).tanh())
}

fn dsq_map(
    x: &Tensor,
    qp: &QParams,
    granularity: Granularity,
    alpha: f32,
    mut f: impl FnMut(usize, f32, f32),
) -> Result<()> {
    let axis = match granularity {
        Granularity::PerTensor => None,
        Granularity::PerChannel { axis } => Some(axis),
    };
    let mut err = None;
    let c = for_each_channel(x.shape(), axis, |ch, i| {
        if err.is_some() {
            return;
        }
        match dsq_soft_scalar(x.data()[i], qp.scales[ch], qp.zero_points[ch], qp.qmin, qp.qmax, alpha) {
            Ok((y, d)) => f(i, y, d),
            Err(e) => err = Some(e),
        }
    })?;
    check_len("scales", qp.len(), c)?;
    err.map_or(Ok(()), Err)
}

pub fn dsq_forward(x: &Tensor, qp: &QParams, granularity: Granularity, alpha: f32) -> Result<Tensor> {
    let mut out = vec![0.0f32; x.numel()];
    dsq_map(x, qp, granularity, alpha, |i, y, _| out[i] = y)?;
    Tensor::new(x.shape().to_vec(), out)
}

pub fn dsq_backward(x: &Tensor, qp: &QParams, granularity: Granularity, alpha: f32, up: &Tensor) -> Result<Tensor> {
    let mut out = vec![0.0f32; x.numel()];
    dsq_map(x, qp, granularity, alpha, |i, _, d| out[i] = d * up.data()[i])?;
    Tensor::new(x.shape().to_vec(), out)
}

/// Straight-through gradient of a hard fake-quantize: passes where the
/// rounded level is inside `[qmin, qmax]`.
pub fn ste_backward(x: &Tensor, qp: &QParams, granularity: Granularity, up: &Tensor) -> Result<Tensor> {
    let axis = match granularity {
        Granularity::PerTensor => None,
        Granularity::PerChannel { axis } => Some(axis),
    };
    let mut out = vec![0.0f32; x.numel()];
    let c = for_each_channel(x.shape(), axis, |ch, i| {
        let (s, z) = (qp.scales[ch.min(qp.len() - 1)], qp.zero_points[ch.min(qp.len() - 1)]);
        let v = (x.data()[i] / s).round_ties_even() + z as f32;
        if v >= qp.qmin as f32 && v <= qp.qmax as f32 {
            out[i] = up.data()[i];
        }
    })?;
    check_len("scales", qp.len(), c)?;
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{fake_quantize_scalar, ScaleForm};

    fn scheme8() -> QScheme {
        QScheme::new(8, Symmetry::Symmetric, Granularity::PerTensor, ScaleForm::Fp32, Signedness::Signed).unwrap()
    }

    #[test]
    fn lsq_init_unit_magnitudes() {
        let w = Tensor::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let init = lsq_init(&w, &scheme8()).unwrap();
        assert!((init.scales[0] - 2.0 / 127f32.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn lsq_per_channel_uses_filter_size() {
        let sch = QScheme {
            granularity: Granularity::PerChannel { axis: 0 },
            ..scheme8()
        };
        let w = Tensor::new(vec![2, 5], vec![0.5; 10]).unwrap();
        let init = lsq_init(&w, &sch).unwrap();
        assert_eq!(init.scales.len(), 2);
        assert_eq!(init.grad_scale[0], lsq_grad_scale(5, 127));
        assert!((lsq_grad_scale(20, 127) * 2.0 - lsq_grad_scale(5, 127)).abs() < 1e-7);
    }

    #[test]
    fn lsq_all_zero_floors() {
        let init = lsq_init(&Tensor::zeros(&[3]), &scheme8()).unwrap();
        assert_eq!(init.scales[0], SCALE_FLOOR);
    }

    #[test]
    fn lsq_branches() {
        let x = Tensor::from_vec(vec![0.5, 1000.0]);
        let up = Tensor::from_vec(vec![1.0, 1.0]);
        let g = lsq_backward(&x, &[0.25], &[0.0], -128, 127, None, &[1.0], &up).unwrap();
        assert_eq!(g.dx.data(), &[1.0, 0.0]);
        // On-grid element contributes nothing; saturated one contributes qmax.
        assert_eq!(g.ds[0], 127.0);
    }

    #[test]
    fn pact_saturates() {
        let sch = QScheme { signedness: Signedness::Unsigned, ..scheme8() };
        let x = Tensor::from_vec(vec![10.0]);
        let y = pact_forward(&x, &sch, ClipMode::Unsigned, 6.0, -6.0).unwrap();
        let qp = range_qparams(&sch, 0.0, 6.0).unwrap();
        assert_eq!(y.data()[0], fake_quantize_scalar(6.0, qp.scale(), 0, qp.qmin, qp.qmax));
        let g = pact_backward(&x, ClipMode::Unsigned, 6.0, -6.0, &Tensor::from_vec(vec![1.0]));
        assert_eq!((g.dalpha, g.dx.data()[0]), (1.0, 0.0));
    }

    #[test]
    fn dorefa_normalizes() {
        let (t, _) = dorefa_weight_transform(&Tensor::from_vec(vec![0.0, 0.3, -2.0]));
        assert_eq!(t.abs_max(), 1.0);
        let (t, _) = dorefa_weight_transform(&Tensor::from_vec(vec![0.0, 40.0]));
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn dsq_midpoint_and_continuity() {
        let (s, z, qmin, qmax) = (0.1f32, 0, -8, 7);
        let (y, _) = dsq_soft_scalar(0.3, s, z, qmin, qmax, DSQ_ALPHA).unwrap();
        assert!((y - 0.3).abs() < 1e-6);
        for i in -8..7 {
            let (a, b) = (i as f32 * s, (i + 1) as f32 * s);
            let edge = 0.5 * (a + b);
            let l = dsq_cell_value(edge, a, s, DSQ_ALPHA).unwrap();
            let r = dsq_cell_value(edge, b, s, DSQ_ALPHA).unwrap();
            assert!((l - r).abs() < 1e-6, "gap at cell edge {edge}: {l} vs {r}");
        }
        assert!(dsq_constants(0.0, DSQ_ALPHA).is_err());
    }
}
