//! Histogram-merge KL-divergence threshold search.

const SMOOTHING: f64 = 1e-9;

/// `D_KL(P ‖ Q)` when the first `keep` bins are retained and merged into
/// `levels` quantization levels.
///
/// Mass beyond the threshold is folded into the last kept bin. `Q` spreads each
/// level's mass uniformly over the bins that level covers.
pub fn kl_divergence_for(counts: &[u64], keep: usize, levels: usize) -> f64 {
    let mut p: Vec<f64> = counts[..keep].iter().map(|&c| c as f64).collect();
    let outliers: u64 = counts[keep..].iter().sum();
    p[keep - 1] += outliers as f64;
    let total: f64 = p.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut q = vec![0.0f64; keep];
    for level in 0..levels {
        let start = level * keep / levels;
        let end = (level + 1) * keep / levels;
        if end == start {
            continue;
        }
        let mass: f64 = p[start..end].iter().sum();
        let share = mass / (end - start) as f64;
        for slot in &mut q[start..end] {
            *slot = share;
        }
    }
    let mut kl = 0.0f64;
    for (&pi, &qi) in p.iter().zip(&q) {
        if pi > 0.0 {
            let pn = pi / total;
            let qn = (qi / total).max(SMOOTHING);
            kl += pn * (pn / qn).ln();
        }
    }
    kl
}

/// Number of leading bins to keep, minimizing the divergence over
/// `keep ∈ [levels, last occupied bin + 1]`. Ties prefer the wider range.
pub fn kld_search(counts: &[u64], levels: usize) -> usize {
    let end = counts.iter().rposition(|&c| c > 0).map_or(0, |i| i + 1);
    if end <= levels {
        return end.max(1);
    }
    let mut best = (f64::INFINITY, end);
    for keep in levels..=end {
        let kl = kl_divergence_for(counts, keep, levels);
        if kl <= best.0 {
            best = (kl, keep);
        }
    }
    best.1
}
