//! Posterior summaries of sampled scalars.

use serde::Serialize;

/// Posterior mean and 95% equal-tail credible interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Sample quantile with linear interpolation between order statistics
/// (`q` in [0, 1]). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and central `level` interval (0.95 gives the 2.5% and 97.5% quantiles).
pub fn equal_tail(draws: &[f64], level: f64) -> Interval {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Interval {
        mean: draws.iter().sum::<f64>() / draws.len() as f64,
        low: quantile(&sorted, tail),
        high: quantile(&sorted, 1.0 - tail),
    }
}

pub fn interval95(draws: &[f64]) -> Interval {
    equal_tail(draws, 0.95)
}

/// Monte Carlo standard error of the mean by non-overlapping batch means.
pub fn batch_means_se(draws: &[f64], n_batches: usize) -> f64 {
    let size = draws.len() / n_batches;
    assert!(n_batches >= 2 && size >= 1, "need at least two non-empty batches");
    let means: Vec<f64> = draws.chunks_exact(size).take(n_batches).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (var / n_batches as f64).sqrt()
}
