//! Fixed-size histogram on a power-of-two aligned grid.
//!
//! Bin `j` covers `[(k0 + j)·w, (k0 + j + 1)·w)` with `w = 2^e`. The width only
//! ever doubles, and each doubling merges bins pairwise, so the final counts
//! depend only on the multiset of observed values, never on their order or on
//! how the stream was split into batches.

pub const BINS: usize = 2048;

const MIN_EXP: i32 = -160;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    exp: i32,
    start: i64,
    counts: Vec<u64>,
    min: f64,
    max: f64,
}

fn cell(x: f64, exp: i32) -> i64 {
    (x / 2f64.powi(exp)).floor() as i64
}

/// Smallest exponent that keeps cell indices well inside `i64`.
fn exp_floor(min: f64, max: f64) -> i32 {
    let amax = min.abs().max(max.abs());
    if amax > 0.0 {
        (amax.log2().ceil() as i32 - 60).max(MIN_EXP)
    } else {
        MIN_EXP
    }
}

fn fits(min: f64, max: f64, exp: i32) -> bool {
    exp >= exp_floor(min, max) && cell(max, exp) - cell(min, exp) < BINS as i64
}

/// Smallest admissible exponent for `[min, max]`, searching upward from `from`,
/// which must not exceed it.
fn smallest_exp(min: f64, max: f64, from: i32) -> i32 {
    let mut e = from.max(exp_floor(min, max));
    while !fits(min, max, e) {
        e += 1;
    }
    e
}

impl Histogram {
    /// Histogram of `values`. `anchor_zero` pins the window start at zero
    /// (used for histograms of magnitudes).
    pub fn from_values(values: &[f32], anchor_zero: bool) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in values {
            min = min.min(f64::from(v));
            max = max.max(f64::from(v));
        }
        if anchor_zero {
            min = min.min(0.0);
        }
        let span = max - min;
        let guess = if span > 0.0 {
            (span / BINS as f64).log2().floor() as i32
        } else {
            MIN_EXP
        };
        let exp = smallest_exp(min, max, guess);
        let start = cell(min, exp);
        let mut counts = vec![0u64; BINS];
        for &v in values {
            counts[(cell(f64::from(v), exp) - start) as usize] += 1;
        }
        Some(Self {
            exp,
            start,
            counts,
            min,
            max,
        })
    }

    fn coarsen(&self, exp: i32, start: i64) -> Vec<u64> {
        let shift = exp - self.exp;
        let mut out = vec![0u64; BINS];
        for (j, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let idx = self.start + j as i64;
            let g = if shift >= 63 {
                if idx < 0 { -1 } else { 0 }
            } else {
                idx.div_euclid(1i64 << shift)
            };
            out[(g - start) as usize] += c;
        }
        out
    }

    pub fn merge(&self, other: &Self) -> Self {
        let min = self.min.min(other.min);
        let max = self.max.max(other.max);
        let exp = smallest_exp(min, max, self.exp.max(other.exp));
        let start = cell(min, exp);
        let a = self.coarsen(exp, start);
        let b = other.coarsen(exp, start);
        Self {
            exp,
            start,
            counts: a.iter().zip(&b).map(|(x, y)| x + y).collect(),
            min,
            max,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bin_width(&self) -> f64 {
        2f64.powi(self.exp)
    }

    /// Lower edge of bin `j`.
    pub fn edge(&self, j: usize) -> f64 {
        (self.start + j as i64) as f64 * self.bin_width()
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index one past the last nonempty bin.
    pub fn occupied_end(&self) -> usize {
        self.counts.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_every_value() {
        let v: Vec<f32> = (0..5000).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let h = Histogram::from_values(&v, false).unwrap();
        assert_eq!(h.total(), 5000);
        assert_eq!(h.counts().len(), BINS);
    }

    #[test]
    fn merge_is_order_invariant() {
        let v: Vec<f32> = (0..3000).map(|i| ((i * 7919) % 1000) as f32 * 0.013 - 4.0).collect();
        let whole = Histogram::from_values(&v, false).unwrap();
        let a = Histogram::from_values(&v[..100], false).unwrap();
        let b = Histogram::from_values(&v[100..2000], false).unwrap();
        let c = Histogram::from_values(&v[2000..], false).unwrap();
        assert_eq!(a.merge(&b).merge(&c), whole);
        assert_eq!(c.merge(&a).merge(&b), whole);
    }

    #[test]
    fn constant_input() {
        let h = Histogram::from_values(&[2.5; 10], true).unwrap();
        assert_eq!(h.total(), 10);
        assert!(h.edge(h.occupied_end()) > 2.5);
    }
}
