//! Rank statistics and percentile bootstrap.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spearman coefficient; `degenerate` marks a constant input, reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub degenerate: bool,
}

impl Correlation {
    pub const DEGENERATE: Correlation = Correlation {
        rho: 0.0,
        degenerate: true,
    };
}

/// 1-based ranks with ties averaged.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: a.len(),
        });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    Ok(match pearson(&ra, &rb) {
        Some(rho) => Correlation {
            rho,
            degenerate: false,
        },
        None => Correlation::DEGENERATE,
    })
}

/// Arithmetic mean, shifted by the first value so identical inputs
/// return that value exactly.
pub fn mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return f64::NAN;
    };
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Derives an independent RNG stream from a seed and an index.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for sub-task `index`, drawn from its own stream.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, index).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Percentile bounds at `level` of a set of bootstrap statistics.
pub fn percentile_interval(mut stats: Vec<f64>, level: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (quantile_sorted(&stats, alpha), quantile_sorted(&stats, 1.0 - alpha))
}

/// Percentile bootstrap interval of `statistic` over row resamples.
///
/// Resample `r` draws from its own RNG stream, so results do not depend on
/// the thread schedule.
pub fn bootstrap_ci_with<F>(values: &[f64], statistic: F, settings: BootstrapSettings) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if values.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    if settings.resamples == 0 || !(settings.level > 0.0 && settings.level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs resamples >= 1 and level in (0, 1), got {} / {}",
            settings.resamples, settings.level
        )));
    }
    let n = values.len();
    let stats: Vec<f64> = (0..settings.resamples)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, r| {
                let mut rng = stream_rng(settings.seed, r as u64);
                for slot in buf.iter_mut() {
                    *slot = values[rng.random_range(0..n)];
                }
                statistic(buf)
            },
        )
        .collect();
    Ok(percentile_interval(stats, settings.level))
}

pub fn bootstrap_ci(values: &[f64], settings: BootstrapSettings) -> Result<(f64, f64)> {
    bootstrap_ci_with(values, mean, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a).unwrap().rho, 1.0);
        let r = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman(&a, &r).unwrap().rho, -1.0);
        let c = spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((c.rho - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spearman_constant_is_flagged() {
        let c = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c, Correlation::DEGENERATE);
    }

    #[test]
    fn spearman_rejects_bad_lengths() {
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::TooFewValues { .. })));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch(2, 1))));
    }

    #[test]
    fn spearman_identical_vectors_exactly_one() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 * 0.013).collect();
        assert_eq!(spearman(&v, &v).unwrap().rho, 1.0);
    }

    #[test]
    fn constant_data_gives_zero_width_interval() {
        let (lo, hi) = bootstrap_ci(&[0.3; 40], BootstrapSettings::default()).unwrap();
        assert_eq!(lo, hi);
    }

    #[test]
    fn interval_contains_point_estimate() {
        let v: Vec<f64> = (0..500).map(|i| (i as f64 / 499.0) - 0.5).collect();
        let (lo, hi) = bootstrap_ci(&v, BootstrapSettings::default()).unwrap();
        let m = mean(&v);
        assert!(lo < m && m < hi);
    }

    #[test]
    fn bootstrap_is_seed_reproducible() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let s = BootstrapSettings {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(bootstrap_ci(&v, s).unwrap(), bootstrap_ci(&v, s).unwrap());
    }
}
