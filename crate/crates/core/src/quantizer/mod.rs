//! Uniform affine quantization: schemes, resolved parameters and the
//! quantize / dequantize / fake-quantize primitives.
//!
//! ```text
//! q = clip(round_half_even(x / s) + z, qmin, qmax)      x̂ = s · (q − z)
//! ```

mod preset;

pub use preset::{backend_preset, BackendPreset, GraphPolicy, PRESET_NAMES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::axis_layout;
use crate::tensor::{DType, IntTensor, Tensor};

/// Smallest scale ever produced by range-based parameter derivation.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleForm {
    Fp32,
    Pot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signedness {
    Signed,
    Unsigned,
    /// Unsigned when the observed minimum is non-negative, signed otherwise.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QScheme {
    pub bits: u8,
    pub symmetry: Symmetry,
    pub granularity: Granularity,
    pub scale_form: ScaleForm,
    pub signedness: Signedness,
}

impl QScheme {
    pub fn new(
        bits: u8,
        symmetry: Symmetry,
        granularity: Granularity,
        scale_form: ScaleForm,
        signedness: Signedness,
    ) -> Result<Self> {
        let s = Self {
            bits,
            symmetry,
            granularity,
            scale_form,
            signedness,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidArgument(format!(
                "bit-width must be in 2..=8, got {}",
                self.bits
            )));
        }
        Ok(())
    }

    pub fn with_bits(mut self, bits: u8) -> Result<Self> {
        self.bits = bits;
        self.validate()?;
        Ok(self)
    }

    pub fn is_per_channel(&self) -> bool {
        matches!(self.granularity, Granularity::PerChannel { .. })
    }

    pub fn channel_axis(&self) -> Option<usize> {
        match self.granularity {
            Granularity::PerChannel { axis } => Some(axis),
            Granularity::PerTensor => None,
        }
    }
}

/// Integer range for `scheme` given the smallest observed value.
pub fn resolve_range(scheme: &QScheme, data_min: f32) -> (i32, i32) {
    let t = u32::from(scheme.bits);
    let signed = (-(1i32 << (t - 1)), (1i32 << (t - 1)) - 1);
    let unsigned = (0, (1i32 << t) - 1);
    match scheme.signedness {
        Signedness::Signed => signed,
        Signedness::Unsigned => unsigned,
        Signedness::Adaptive if data_min >= 0.0 => unsigned,
        Signedness::Adaptive => signed,
    }
}

/// Resolved quantization parameters. Serialized form is the QParams sidecar entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QParams {
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
    pub qmin: i32,
    pub qmax: i32,
    pub scale_form: ScaleForm,
}

impl QParams {
    pub fn new(
        scales: Vec<f32>,
        zero_points: Vec<i32>,
        qmin: i32,
        qmax: i32,
        scale_form: ScaleForm,
    ) -> Result<Self> {
        let qp = Self {
            scales,
            zero_points,
            qmin,
            qmax,
            scale_form,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn per_tensor(scale: f32, zero_point: i32, qmin: i32, qmax: i32) -> Result<Self> {
        Self::new(vec![scale], vec![zero_point], qmin, qmax, ScaleForm::Fp32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.len() != self.zero_points.len() {
            return Err(Error::Contract(format!(
                "{} scales and {} zero-points",
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        if self.qmin >= self.qmax {
            return Err(Error::Contract(format!(
                "qmin {} must be below qmax {}",
                self.qmin, self.qmax
            )));
        }
        for (i, (&s, &z)) in self.scales.iter().zip(&self.zero_points).enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Contract(format!("scale {i} = {s} is not positive")));
            }
            if self.scale_form == ScaleForm::Pot && s.log2().fract() != 0.0 {
                return Err(Error::Contract(format!("scale {i} = {s} is not a power of two")));
            }
            if z < self.qmin || z > self.qmax {
                return Err(Error::Contract(format!(
                    "zero-point {i} = {z} outside [{}, {}]",
                    self.qmin, self.qmax
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn scale(&self) -> f32 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_points[0]
    }

    pub fn is_symmetric(&self) -> bool {
        self.zero_points.iter().all(|&z| z == 0)
    }

    /// Derives parameters from per-channel (or single) clip ranges.
    ///
    /// Symmetric schemes use `s = max(|lo|, |hi|) / ((qmax − qmin) / 2)` on
    /// signed ranges and `/ (qmax − qmin)` on unsigned ones. Asymmetric ranges
    /// are widened to contain zero so that zero stays exactly representable.
    pub fn from_range(scheme: &QScheme, lo: &[f32], hi: &[f32]) -> Result<Self> {
        let data_min = lo.iter().copied().fold(f32::INFINITY, f32::min);
        Self::from_range_signed_by(scheme, lo, hi, data_min)
    }

    /// As [`QParams::from_range`], with adaptive signness decided by
    /// `data_min` instead of the clip range.
    pub fn from_range_signed_by(scheme: &QScheme, lo: &[f32], hi: &[f32], data_min: f32) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::InvalidArgument(format!(
                "range vectors of length {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if let Some(i) = lo.iter().chain(hi).position(|v| !v.is_finite()) {
            return Err(Error::NumericInput {
                op: "QParams::from_range",
                index: i,
            });
        }
        let (qmin, qmax) = resolve_range(scheme, data_min);
        let levels = (qmax - qmin) as f32;
        let mut scales = Vec::with_capacity(lo.len());
        let mut zps = Vec::with_capacity(lo.len());
        for (&l, &h) in lo.iter().zip(hi) {
            match scheme.symmetry {
                Symmetry::Symmetric => {
                    let amax = l.abs().max(h.abs());
                    let denom = if qmin < 0 { levels / 2.0 } else { levels };
                    let mut s = (amax / denom).max(SCALE_FLOOR);
                    if scheme.scale_form == ScaleForm::Pot {
                        s = snap_pot(s)?;
                    }
                    scales.push(s);
                    zps.push(0);
                }
                Symmetry::Asymmetric => {
                    let l = l.min(0.0);
                    let h = h.max(0.0);
                    let mut s = ((h - l) / levels).max(SCALE_FLOOR);
                    if scheme.scale_form == ScaleForm::Pot {
                        s = snap_pot(s)?;
                    }
                    scales.push(s);
                    zps.push(asymmetric_zero_point(l, s, qmin, qmax));
                }
            }
        }
        Self::new(scales, zps, qmin, qmax, scheme.scale_form)
    }

    /// Replaces every scale by its power-of-two snap, keeping zero-points.
    pub fn snapped_pot(&self) -> Result<Self> {
        let scales = self.scales.iter().map(|&s| snap_pot(s)).collect::<Result<_>>()?;
        Self::new(scales, self.zero_points.clone(), self.qmin, self.qmax, ScaleForm::Pot)
    }
}

/// `z = clip(round(qmin − lo / s), qmin, qmax)`.
pub fn asymmetric_zero_point(lo: f32, s: f32, qmin: i32, qmax: i32) -> i32 {
    let z = (qmin as f32 - lo / s).round_ties_even();
    z.clamp(qmin as f32, qmax as f32) as i32
}

/// `2^round(log2 s)`, half-exponent ties going to the larger power.
pub fn snap_pot(scale: f32) -> Result<f32> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "power-of-two snap requires a positive finite scale, got {scale}"
        )));
    }
    let e = f64::from(scale).log2();
    let lower = e.floor();
    let exp = if e - lower >= 0.5 { lower + 1.0 } else { lower };
    Ok(2f64.powi(exp as i32) as f32)
}

#[inline]
pub fn quantize_scalar(x: f32, s: f32, z: i32, qmin: i32, qmax: i32) -> i32 {
    let r = (x / s).round_ties_even() + z as f32;
    r.clamp(qmin as f32, qmax as f32) as i32
}

/// INT32 bias level `round(b / (s_w·s_x))`, evaluated in double precision.
pub fn quantize_bias(b: f32, s_w: f32, s_x: f32) -> i64 {
    (f64::from(b) / (f64::from(s_w) * f64::from(s_x))).round_ties_even() as i64
}

#[inline]
pub fn dequantize_scalar(q: i32, s: f32, z: i32) -> f32 {
    s * (q - z) as f32
}

#[inline]
pub fn fake_quantize_scalar(x: f32, s: f32, z: i32, qmin: i32, qmax: i32) -> f32 {
    dequantize_scalar(quantize_scalar(x, s, z, qmin, qmax), s, z)
}

/// Channel index of every flat element, with the number of channels.
fn channel_map(shape: &[usize], qp: &QParams, granularity: Granularity) -> Result<(usize, usize, usize)> {
    match granularity {
        Granularity::PerTensor => {
            if qp.len() != 1 {
                return Err(Error::Contract(format!(
                    "per-tensor quantization with {} scales",
                    qp.len()
                )));
            }
            Ok((1, 1, shape.iter().product()))
        }
        Granularity::PerChannel { axis } => {
            let (outer, c, inner) = axis_layout("quantize", shape, axis)?;
            if qp.len() != c {
                return Err(Error::shape(
                    "quantize",
                    format!("{} scales for channel axis {axis} of extent {c}", qp.len()),
                ));
            }
            Ok((outer, c, inner))
        }
    }
}

fn int_dtype(qp: &QParams) -> DType {
    if qp.qmin >= -128 && qp.qmax <= 127 {
        DType::I8Range
    } else {
        DType::I32Range
    }
}

pub fn quantize(x: &Tensor, qp: &QParams, granularity: Granularity) -> Result<IntTensor> {
    if let Some(index) = x.first_non_finite() {
        return Err(Error::NumericInput { op: "quantize", index });
    }
    let (outer, c, inner) = channel_map(x.shape(), qp, granularity)?;
    let mut out = Vec::with_capacity(x.numel());
    let d = x.data();
    for o in 0..outer {
        for ch in 0..c {
            let (s, z) = (qp.scales[ch], qp.zero_points[ch]);
            let base = (o * c + ch) * inner;
            out.extend(d[base..base + inner].iter().map(|&v| quantize_scalar(v, s, z, qp.qmin, qp.qmax)));
        }
    }
    IntTensor::new(x.shape().to_vec(), int_dtype(qp), out)
}

pub fn dequantize(q: &IntTensor, qp: &QParams, granularity: Granularity) -> Result<Tensor> {
    if let Some(i) = q.data().iter().position(|v| *v < qp.qmin || *v > qp.qmax) {
        return Err(Error::Contract(format!(
            "integer element {i} = {} outside [{}, {}]",
            q.data()[i],
            qp.qmin,
            qp.qmax
        )));
    }
    let (outer, c, inner) = channel_map(q.shape(), qp, granularity)?;
    let mut out = Vec::with_capacity(q.numel());
    let d = q.data();
    for o in 0..outer {
        for ch in 0..c {
            let (s, z) = (qp.scales[ch], qp.zero_points[ch]);
            let base = (o * c + ch) * inner;
            out.extend(d[base..base + inner].iter().map(|&v| dequantize_scalar(v, s, z)));
        }
    }
    Tensor::new(q.shape().to_vec(), out)
}

pub fn fake_quantize(x: &Tensor, qp: &QParams, granularity: Granularity) -> Result<Tensor> {
    dequantize(&quantize(x, qp, granularity)?, qp, granularity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scheme(bits: u8, sym: Symmetry, sign: Signedness) -> QScheme {
        QScheme::new(bits, sym, Granularity::PerTensor, ScaleForm::Fp32, sign).unwrap()
    }

    #[test]
    fn ranges() {
        assert_eq!(resolve_range(&scheme(8, Symmetry::Symmetric, Signedness::Signed), 0.0), (-128, 127));
        assert_eq!(resolve_range(&scheme(8, Symmetry::Symmetric, Signedness::Unsigned), 0.0), (0, 255));
        assert_eq!(resolve_range(&scheme(4, Symmetry::Symmetric, Signedness::Adaptive), -0.1), (-8, 7));
        assert_eq!(resolve_range(&scheme(4, Symmetry::Symmetric, Signedness::Adaptive), 0.0), (0, 15));
    }

    #[test]
    fn bit_width_is_bounded() {
        assert!(QScheme::new(1, Symmetry::Symmetric, Granularity::PerTensor, ScaleForm::Fp32, Signedness::Signed).is_err());
        assert!(QScheme::new(9, Symmetry::Symmetric, Granularity::PerTensor, ScaleForm::Fp32, Signedness::Signed).is_err());
    }

    #[test]
    fn quantize_examples() {
        let qp = QParams::per_tensor(0.1, 0, -128, 127).unwrap();
        let x = Tensor::from_vec(vec![1.26, 1000.0]);
        let q = quantize(&x, &qp, Granularity::PerTensor).unwrap();
        assert_eq!(q.data(), &[13, 127]);
        let y = fake_quantize(&Tensor::from_vec(vec![1.26]), &qp, Granularity::PerTensor).unwrap();
        assert_eq!(y.data(), &[0.1f32 * 13.0]);
        assert!((y.data()[0] - 1.3).abs() < 1e-6);
    }

    #[test]
    fn zero_point_dequantizes_to_zero() {
        for z in [-5, 0, 17] {
            assert_eq!(dequantize_scalar(z, 0.37, z), 0.0);
        }
    }

    #[test]
    fn per_channel_dequantize() {
        let qp = QParams::new(vec![0.5, 2.0], vec![0, 0], -128, 127, ScaleForm::Fp32).unwrap();
        let q = IntTensor::new(vec![2, 1], DType::I8Range, vec![1, 1]).unwrap();
        let y = dequantize(&q, &qp, Granularity::PerChannel { axis: 0 }).unwrap();
        assert_eq!(y.data(), &[0.5, 2.0]);
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        let qp = QParams::per_tensor(1.0, 0, 0, 15).unwrap();
        let q = IntTensor::new(vec![1], DType::I8Range, vec![16]).unwrap();
        assert!(matches!(dequantize(&q, &qp, Granularity::PerTensor), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_is_reported() {
        let qp = QParams::per_tensor(1.0, 0, -8, 7).unwrap();
        let x = Tensor::from_vec(vec![0.0, f32::NAN]);
        assert!(matches!(
            quantize(&x, &qp, Granularity::PerTensor),
            Err(Error::NumericInput { index: 1, .. })
        ));
    }

    #[test]
    fn pot_snap_examples() {
        assert_eq!(snap_pot(0.09).unwrap(), 0.125);
        assert_eq!(snap_pot(0.25).unwrap(), 0.25);
        // 2^-2.5 is irrational, so neighbors of the geometric midpoint decide.
        let mid = 0.176_776_69_f32;
        assert_eq!(snap_pot(mid * 1.000_001).unwrap(), 0.25);
        assert_eq!(snap_pot(mid * 0.999_999).unwrap(), 0.125);
        assert!(snap_pot(0.0).is_err());
        assert!(snap_pot(-1.0).is_err());
    }

    #[test]
    fn range_derivation_examples() {
        let sym = scheme(8, Symmetry::Symmetric, Signedness::Signed);
        let qp = QParams::from_range(&sym, &[-1.0], &[2.55]).unwrap();
        assert!((qp.scale() - 0.02).abs() < 1e-9);
        assert_eq!(qp.zero_point(), 0);

        let asym = scheme(8, Symmetry::Asymmetric, Signedness::Unsigned);
        let qp = QParams::from_range(&asym, &[0.0], &[2.55]).unwrap();
        assert!((qp.scale() - 0.01).abs() < 1e-9);
        assert_eq!(qp.zero_point(), qp.qmin);

        let qp = QParams::from_range(&sym, &[0.0], &[0.0]).unwrap();
        assert_eq!(qp.scale(), SCALE_FLOOR);
    }

    #[test]
    fn pot_params_are_integral_in_log2() {
        let s = QScheme::new(8, Symmetry::Asymmetric, Granularity::PerTensor, ScaleForm::Pot, Signedness::Unsigned).unwrap();
        let qp = QParams::from_range(&s, &[-0.3], &[1.7]).unwrap();
        assert_eq!(qp.scale().log2().fract(), 0.0);
        assert!(qp.validate().is_ok());
    }
}
