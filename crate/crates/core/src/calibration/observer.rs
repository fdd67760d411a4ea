use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::histogram::Histogram;
use crate::error::{Error, Result};
use crate::quantizer::Granularity;
use crate::tensor::ops::axis_layout;
use crate::tensor::Tensor;

/// Retained-sample cap for quantile and MSE observers.
pub const RESERVOIR_CAPACITY: usize = 1 << 20;

/// Highest norm order whose power sum is tracked.
pub const MAX_NORM_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObserverKind {
    MinMax,
    Quantile,
    Mse,
    Kld,
    Norm,
    MeanStd,
}

impl ObserverKind {
    fn keeps_samples(self) -> bool {
        matches!(self, Self::Quantile | Self::Mse)
    }
}

#[derive(Debug, Clone)]
struct Reservoir {
    samples: Vec<f32>,
    seen: u64,
    capacity: usize,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(seed: u64, stream: u64, capacity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            samples: Vec::new(),
            seen: 0,
            capacity,
            rng,
        }
    }

    fn offer(&mut self, v: f32) {
        if self.samples.len() < self.capacity {
            self.samples.push(v);
        } else {
            let j = self.rng.gen_range(0..=self.seen);
            if (j as usize) < self.capacity {
                self.samples[j as usize] = v;
            }
        }
        self.seen += 1;
    }
}

/// Statistics of one channel (or of the whole tensor).
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub min: f32,
    pub max: f32,
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
    /// `abs_pow[p - 1] = Σ |x|^p` for `p = 1..=MAX_NORM_ORDER`.
    pub abs_pow: [f64; MAX_NORM_ORDER],
    reservoir: Option<Reservoir>,
}

impl ChannelStats {
    fn new(reservoir: Option<Reservoir>) -> Self {
        Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            count: 0,
            sum: 0.0,
            sum_sq: 0.0,
            abs_pow: [0.0; MAX_NORM_ORDER],
            reservoir,
        }
    }

    fn push(&mut self, v: f32) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.count += 1;
        let d = f64::from(v);
        self.sum += d;
        self.sum_sq += d * d;
        let a = d.abs();
        let mut p = a;
        for slot in &mut self.abs_pow {
            *slot += p;
            p *= a;
        }
        if let Some(r) = &mut self.reservoir {
            r.offer(v);
        }
    }

    fn merge(&mut self, other: &ChannelStats) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        for (a, b) in self.abs_pow.iter_mut().zip(&other.abs_pow) {
            *a += b;
        }
        if let (Some(r), Some(o)) = (&mut self.reservoir, &other.reservoir) {
            for &v in &o.samples {
                r.offer(v);
            }
            r.seen += o.seen - o.samples.len() as u64;
        }
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.sum_sq / self.count as f64 - m * m).max(0.0).sqrt()
    }

    /// Retained samples (quantile and MSE observers only).
    pub fn samples(&self) -> Option<&[f32]> {
        self.reservoir.as_ref().map(|r| r.samples.as_slice())
    }
}

/// Streaming statistics accumulator feeding the calibration algorithms.
#[derive(Debug, Clone)]
pub struct Observer {
    kind: ObserverKind,
    granularity: Granularity,
    channels: Vec<ChannelStats>,
    signed_hist: Option<Histogram>,
    abs_hist: Option<Histogram>,
    seed: u64,
    capacity: usize,
}

impl Observer {
    pub fn new(kind: ObserverKind, granularity: Granularity) -> Result<Self> {
        Self::with_seed(kind, granularity, 0)
    }

    pub fn with_seed(kind: ObserverKind, granularity: Granularity, seed: u64) -> Result<Self> {
        if kind == ObserverKind::Kld && granularity != Granularity::PerTensor {
            return Err(Error::InvalidArgument(
                "KL-divergence calibration is per-tensor only".into(),
            ));
        }
        Ok(Self {
            kind,
            granularity,
            channels: Vec::new(),
            signed_hist: None,
            abs_hist: None,
            seed,
            capacity: RESERVOIR_CAPACITY,
        })
    }

    /// Overrides the retained-sample cap (mainly for tests).
    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity.max(1);
        self
    }

    pub fn kind(&self) -> ObserverKind {
        self.kind
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn channels(&self) -> &[ChannelStats] {
        &self.channels
    }

    pub fn count(&self) -> u64 {
        self.channels.iter().map(|c| c.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn min(&self) -> f32 {
        self.channels.iter().map(|c| c.min).fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.channels.iter().map(|c| c.max).fold(f32::NEG_INFINITY, f32::max)
    }

    /// Histogram of values (`magnitudes == false`) or of |values|.
    pub fn histogram(&self, magnitudes: bool) -> Option<&Histogram> {
        if magnitudes {
            self.abs_hist.as_ref()
        } else {
            self.signed_hist.as_ref()
        }
    }

    fn init_channels(&mut self, n: usize) {
        let keep = self.kind.keeps_samples();
        self.channels = (0..n)
            .map(|ch| {
                ChannelStats::new(keep.then(|| Reservoir::new(self.seed, ch as u64, self.capacity)))
            })
            .collect();
    }

    pub fn observe(&mut self, x: &Tensor) -> Result<()> {
        if let Some(index) = x.first_non_finite() {
            return Err(Error::NumericInput { op: "observe", index });
        }
        let (outer, c, inner) = match self.granularity {
            Granularity::PerTensor => (1, 1, x.numel()),
            Granularity::PerChannel { axis } => axis_layout("observe", x.shape(), axis)?,
        };
        if self.channels.is_empty() {
            self.init_channels(c);
        } else if self.channels.len() != c {
            return Err(Error::shape(
                "observe",
                format!("observer tracks {} channels, tensor has {c}", self.channels.len()),
            ));
        }
        let d = x.data();
        for o in 0..outer {
            for (ch, stats) in self.channels.iter_mut().enumerate() {
                let base = (o * c + ch) * inner;
                for &v in &d[base..base + inner] {
                    stats.push(v);
                }
            }
        }
        if self.kind == ObserverKind::Kld {
            let abs: Vec<f32> = d.iter().map(|v| v.abs()).collect();
            merge_hist(&mut self.signed_hist, Histogram::from_values(d, false));
            merge_hist(&mut self.abs_hist, Histogram::from_values(&abs, true));
        }
        Ok(())
    }

    /// Folds `other` into `self`. Min/max, moments and histograms merge
    /// associatively; retained samples are concatenated up to the cap.
    pub fn merge(&mut self, other: &Observer) -> Result<()> {
        if self.kind != other.kind || self.granularity != other.granularity {
            return Err(Error::InvalidArgument("cannot merge observers of different kinds".into()));
        }
        if other.channels.is_empty() {
            return Ok(());
        }
        if self.channels.is_empty() {
            self.init_channels(other.channels.len());
        }
        if self.channels.len() != other.channels.len() {
            return Err(Error::shape(
                "merge",
                format!("{} vs {} channels", self.channels.len(), other.channels.len()),
            ));
        }
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            a.merge(b);
        }
        if let Some(h) = &other.signed_hist {
            merge_hist(&mut self.signed_hist, Some(h.clone()));
        }
        if let Some(h) = &other.abs_hist {
            merge_hist(&mut self.abs_hist, Some(h.clone()));
        }
        Ok(())
    }
}

fn merge_hist(slot: &mut Option<Histogram>, new: Option<Histogram>) {
    if let Some(n) = new {
        *slot = Some(match slot.take() {
            Some(h) => h.merge(&n),
            None => n,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_streams() {
        let mut o = Observer::new(ObserverKind::MinMax, Granularity::PerTensor).unwrap();
        o.observe(&Tensor::from_vec(vec![-1.0, 2.0])).unwrap();
        o.observe(&Tensor::from_vec(vec![0.0, 3.0])).unwrap();
        assert_eq!((o.min(), o.max()), (-1.0, 3.0));
        assert_eq!(o.count(), 4);
    }

    #[test]
    fn meanstd_of_constant() {
        let mut o = Observer::new(ObserverKind::MeanStd, Granularity::PerTensor).unwrap();
        o.observe(&Tensor::from_vec(vec![1.0; 4])).unwrap();
        assert_eq!(o.channels()[0].mean(), 1.0);
        assert_eq!(o.channels()[0].std(), 0.0);
    }

    #[test]
    fn rejects_nan() {
        let mut o = Observer::new(ObserverKind::MinMax, Granularity::PerTensor).unwrap();
        assert!(matches!(
            o.observe(&Tensor::from_vec(vec![0.0, f32::INFINITY])),
            Err(Error::NumericInput { index: 1, .. })
        ));
    }

    #[test]
    fn per_channel_kld_is_rejected() {
        assert!(Observer::new(ObserverKind::Kld, Granularity::PerChannel { axis: 0 }).is_err());
    }

    #[test]
    fn reservoir_is_bounded_and_seeded() {
        let x = Tensor::from_vec((0..1000).map(|i| i as f32).collect());
        let run = |seed| {
            let mut o = Observer::with_seed(ObserverKind::Quantile, Granularity::PerTensor, seed)
                .unwrap()
                .with_capacity(64);
            o.observe(&x).unwrap();
            o.channels()[0].samples().unwrap().to_vec()
        };
        assert_eq!(run(3).len(), 64);
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
