//! Bootstrap confidence intervals and KDE-weighted binned trend summaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no scores to resample")]
    EmptyScores,
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("resample count must be positive")]
    NoResamples,
    #[error("bin edges must be finite, strictly increasing and at least two")]
    BadEdges,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    /// Sample mean of the input scores.
    pub mean: f64,
    /// Mean of the bootstrap distribution of means.
    pub boot_mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap of the mean, reproducible for a given seed.
pub fn bootstrap_ci(
    scores: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi, StatsError> {
    if scores.is_empty() {
        return Err(StatsError::EmptyScores);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    if resamples == 0 {
        return Err(StatsError::NoResamples);
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| scores[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo_idx = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    let hi_idx = (((1.0 - alpha) * resamples as f64).ceil() as usize)
        .saturating_sub(1)
        .min(resamples - 1);
    Ok(BootstrapCi {
        mean: scores.iter().sum::<f64>() / n as f64,
        boot_mean: means.iter().sum::<f64>() / resamples as f64,
        lo: means[lo_idx],
        hi: means[hi_idx],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendBin {
    pub lo: f64,
    pub hi: f64,
    /// NaN for empty bins.
    pub avg_x: f64,
    pub avg_dice: f64,
    pub n: usize,
}

/// Gaussian KDE weights of each point under the density of the whole set.
///
/// Bandwidth follows Scott's rule (`std * n^(-1/5)`, sample std); a set with zero
/// spread gets uniform weights.
pub(crate) fn kde_weights(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    if n == 0 {
        return Vec::new();
    }
    let uniform = vec![1.0 / n as f64; n];
    if n == 1 {
        return uniform;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let bandwidth = var.sqrt() * (n as f64).powf(-0.2);
    if !(bandwidth > 0.0) {
        return uniform;
    }
    let density: Vec<f64> = xs
        .iter()
        .map(|&xi| {
            xs.iter()
                .map(|&xk| (-0.5 * ((xi - xk) / bandwidth).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let total: f64 = density.iter().sum();
    density.into_iter().map(|d| d / total).collect()
}

/// Bins `(x, dice)` samples on half-open intervals `[edges[i], edges[i+1])` and
/// reports density-weighted averages per bin. Samples outside all bins are dropped.
pub fn binned_trend(samples: &[(f64, f64)], edges: &[f64]) -> Result<Vec<TrendBin>, StatsError> {
    if edges.len() < 2
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(StatsError::BadEdges);
    }
    Ok(edges
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let members: Vec<(f64, f64)> = samples
                .iter()
                .copied()
                .filter(|&(x, _)| x >= lo && x < hi)
                .collect();
            if members.is_empty() {
                return TrendBin {
                    lo,
                    hi,
                    avg_x: f64::NAN,
                    avg_dice: f64::NAN,
                    n: 0,
                };
            }
            let xs: Vec<f64> = members.iter().map(|m| m.0).collect();
            let weights = kde_weights(&xs);
            let (avg_x, avg_dice) = members
                .iter()
                .zip(&weights)
                .fold((0.0, 0.0), |(ax, ad), (&(x, d), &wt)| (ax + wt * x, ad + wt * d));
            TrendBin {
                lo,
                hi,
                avg_x,
                avg_dice,
                n: members.len(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_scores_give_degenerate_interval() {
        let ci = bootstrap_ci(&[0.5; 100], 1000, 0.95, 3).unwrap();
        assert_eq!((ci.mean, ci.lo, ci.hi), (0.5, 0.5, 0.5));
    }

    #[test]
    fn seeded_bootstrap_is_reproducible() {
        let scores: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let a = bootstrap_ci(&scores, 500, 0.95, 11).unwrap();
        let b = bootstrap_ci(&scores, 500, 0.95, 11).unwrap();
        assert_eq!(a.lo.to_bits(), b.lo.to_bits());
        assert_eq!(a.hi.to_bits(), b.hi.to_bits());
        assert!(a.lo <= a.boot_mean && a.boot_mean <= a.hi);
    }

    #[test]
    fn uniform_scores_width_tracks_standard_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let ci = bootstrap_ci(&scores, 1000, 0.95, 5).unwrap();
        let width = ci.hi - ci.lo;
        // Analytic: SE = sqrt(1/12 / 1000) ≈ 0.00913, so a 95% interval is ≈ 0.0358 wide.
        let se = (1.0f64 / 12.0 / 1000.0).sqrt();
        assert!((width - 2.0 * 1.96 * se).abs() < 0.01, "width {width}");
        assert!(width < 0.07);
    }

    #[test]
    fn bootstrap_errors() {
        assert_eq!(bootstrap_ci(&[], 10, 0.95, 0), Err(StatsError::EmptyScores));
        assert_eq!(bootstrap_ci(&[1.0], 10, 1.0, 0), Err(StatsError::BadLevel(1.0)));
    }

    #[test]
    fn trend_single_and_constant_bins() {
        let bins = binned_trend(&[(0.3, 0.7)], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!((bins[0].avg_x, bins[0].avg_dice, bins[0].n), (0.3, 0.7, 1));
        assert_eq!(bins[1].n, 0);

        let same_x = [(0.2, 0.1), (0.2, 0.5), (0.2, 0.9)];
        let bins = binned_trend(&same_x, &[0.0, 1.0]).unwrap();
        assert!((bins[0].avg_dice - 0.5).abs() < 1e-12);
    }

    /// Direct Gaussian KDE with Scott bandwidth, written independently of `kde_weights`.
    fn kde_oracle(xs: &[f64]) -> Vec<f64> {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let h = sd * n.powf(-1.0 / 5.0);
        let pdf = |u: f64| (-(u * u) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let dens: Vec<f64> = xs
            .iter()
            .map(|&a| xs.iter().map(|&b| pdf((a - b) / h)).sum::<f64>() / (n * h))
            .collect();
        let s: f64 = dens.iter().sum();
        dens.iter().map(|d| d / s).collect()
    }

    #[test]
    fn dense_cluster_dominates_weighted_average() {
        let mut samples = vec![(0.1, 0.8); 9];
        samples.push((0.9, 0.2));
        let bins = binned_trend(&samples, &[0.0, 1.0]).unwrap();
        let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let w = kde_oracle(&xs);
        let expected: f64 = xs.iter().zip(&w).map(|(x, w)| x * w).sum();
        assert!((bins[0].avg_x - expected).abs() < 1e-12);
        assert!(bins[0].avg_x < 0.18);
        assert!(bins[0].lo <= bins[0].avg_x && bins[0].avg_x < bins[0].hi);
    }

    #[test]
    fn bad_edges_rejected() {
        assert_eq!(binned_trend(&[], &[1.0]), Err(StatsError::BadEdges));
        assert_eq!(binned_trend(&[], &[0.0, 0.0]), Err(StatsError::BadEdges));
    }
}
