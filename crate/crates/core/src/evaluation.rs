//! Point and probabilistic verification scores and outlier-detection AUC.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::inference::{empirical_quantile, PredictiveSamples};
use crate::mixture::{normal_cdf, normal_pdf};

/// Minimum predictive samples per observation for interval metrics.
pub const MIN_INTERVAL_SAMPLES: usize = 20;

/// Levels of the coverage curve: 0.05, 0.10, ..., 0.95, then 0.99.
pub fn default_levels() -> Vec<f64> {
    let mut v: Vec<f64> = (1..=19).map(|i| i as f64 / 20.0).collect();
    v.push(0.99);
    v
}

/// `(rmse, r2)` with `r2 = 1 - SSE/SST`, SST about the observation mean.
pub fn rmse_r2(preds: &[f64], obs: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != obs.len() {
        return Err(Error::LengthMismatch {
            expected: obs.len(),
            actual: preds.len(),
        });
    }
    if obs.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let n = obs.len() as f64;
    let sse: f64 = preds.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    let mean = obs.iter().sum::<f64>() / n;
    let sst: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Undefined("r2 with zero-variance observations".into()));
    }
    Ok(((sse / n).sqrt(), 1.0 - sse / sst))
}

/// Energy-form CRPS estimate `mean|x_k - y| - (1/2N^2) sum_{k,l} |x_k - x_l|`.
pub fn crps_from_samples(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let n = samples.len() as f64;
    let first = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_{k,l} |x_k - x_l| = 2 sum_i (2i - N + 1) x_(i), 0-based order stats
    let pair: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x).sum::<f64>() * 2.0;
    Ok((first - pair / (2.0 * n * n)).max(0.0))
}

/// Closed-form CRPS of `Normal(mu, sigma^2)` at `y`.
pub fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / std::f64::consts::PI.sqrt())
}

fn check_pairs(samples: &[Vec<f64>], obs: &[f64], min: usize) -> Result<()> {
    if samples.len() != obs.len() {
        return Err(Error::LengthMismatch {
            expected: obs.len(),
            actual: samples.len(),
        });
    }
    if let Some(s) = samples.iter().find(|s| s.len() < min) {
        return Err(Error::TooFewSamples { needed: min, got: s.len() });
    }
    Ok(())
}

/// Fraction of observations inside the central empirical interval
/// `[q((1-L)/2), q((1+L)/2)]`, per level `L`.
pub fn interval_coverage(samples: &[Vec<f64>], obs: &[f64], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_pairs(samples, obs, MIN_INTERVAL_SAMPLES)?;
    if obs.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    for l in levels {
        if !(0.0..=1.0).contains(l) {
            return Err(Error::InvalidParameter(format!("coverage level {l}")));
        }
    }
    let mut inside = vec![0usize; levels.len()];
    for (s, y) in samples.iter().zip(obs) {
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        for (j, l) in levels.iter().enumerate() {
            let lo = empirical_quantile(&sorted, (1.0 - l) / 2.0);
            let hi = empirical_quantile(&sorted, (1.0 + l) / 2.0);
            if (lo..=hi).contains(y) {
                inside[j] += 1;
            }
        }
    }
    let n = obs.len() as f64;
    Ok(levels.iter().zip(inside).map(|(l, c)| (*l, c as f64 / n)).collect())
}

/// Randomized probability integral transform. With `b` samples below the
/// observation and `t` tied with it, `PIT = (b + U{0..=t} + U(0,1)) / (N + 1)`,
/// which is exactly uniform for a calibrated forecast.
pub fn pit_values<R: Rng + ?Sized>(samples: &[Vec<f64>], obs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    check_pairs(samples, obs, 1)?;
    Ok(samples
        .iter()
        .zip(obs)
        .map(|(s, y)| {
            let below = s.iter().filter(|x| *x < y).count();
            let ties = s.iter().filter(|x| *x == y).count();
            let rank = below + rng.random_range(0..=ties);
            let u: f64 = rng.random();
            (rank as f64 + u) / (s.len() as f64 + 1.0)
        })
        .collect())
}

/// Kolmogorov-Smirnov distance of `values` from Uniform(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, u)| {
            let u = u.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - u).max(u - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// `(uniform quantile, sorted PIT)` pairs with plotting positions
/// `(i - 0.5) / n`.
pub fn qq_points(pit: &[f64]) -> Vec<(f64, f64)> {
    let mut v = pit.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().enumerate().map(|(i, p)| ((i as f64 + 0.5) / n, p)).collect()
}

/// Rank-based AUC (Mann-Whitney, ties averaged): probability that a random
/// positive scores above a random negative.
pub fn outlier_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Mean value per key, keys in sorted order.
pub fn average_by<'a>(keys: impl IntoIterator<Item = &'a str>, values: &[f64]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (k, v) in keys.into_iter().zip(values) {
        let e = acc.entry(k.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub n_obs: usize,
    pub rmse: f64,
    pub r2: f64,
    pub crps: f64,
    pub coverage: Vec<(f64, f64)>,
    pub pit_values: Vec<f64>,
    pub pit_ks: f64,
    pub pit_seed: u64,
    pub outlier_auc: Option<f64>,
}

impl CalibrationReport {
    /// Scores for observations `obs` against their predictive samples. The
    /// point prediction is the mean of the pass means; CRPS, coverage and
    /// PIT use the `y` draws.
    pub fn compute<R: Rng + ?Sized>(
        samples: &[PredictiveSamples],
        obs: &[f64],
        levels: &[f64],
        pit_seed: u64,
        pit_rng: &mut R,
    ) -> Result<Self> {
        if samples.len() != obs.len() {
            return Err(Error::LengthMismatch {
                expected: obs.len(),
                actual: samples.len(),
            });
        }
        let draws: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| {
                s.y.clone()
                    .ok_or_else(|| Error::InvalidParameter("predictive draws required".into()))
            })
            .collect::<Result<_>>()?;
        let means: Vec<f64> = samples.iter().map(|s| s.mu.iter().sum::<f64>() / s.mu.len() as f64).collect();
        let (rmse, r2) = rmse_r2(&means, obs)?;
        let coverage = interval_coverage(&draws, obs, levels)?;
        let crps = draws.iter().zip(obs).map(|(d, y)| crps_from_samples(d, *y)).sum::<Result<f64>>()? / obs.len() as f64;
        let pit = pit_values(&draws, obs, pit_rng)?;
        Ok(Self {
            n_obs: obs.len(),
            rmse,
            r2,
            crps,
            coverage,
            pit_ks: ks_uniform(&pit),
            pit_values: pit,
            pit_seed,
            outlier_auc: None,
        })
    }

    pub fn coverage_at(&self, level: f64) -> Option<f64> {
        self.coverage.iter().find(|(l, _)| (l - level).abs() < 1e-12).map(|(_, c)| *c)
    }

    /// `key=value` lines; `prefix` is prepended to every key.
    pub fn key_values(&self, prefix: &str) -> Vec<(String, String)> {
        let mut kv = vec![
            (format!("{prefix}n_obs"), self.n_obs.to_string()),
            (format!("{prefix}rmse"), self.rmse.to_string()),
            (format!("{prefix}r2"), self.r2.to_string()),
            (format!("{prefix}crps"), self.crps.to_string()),
            (format!("{prefix}pit_ks"), self.pit_ks.to_string()),
            (format!("{prefix}pit_seed"), self.pit_seed.to_string()),
        ];
        for (l, c) in &self.coverage {
            kv.push((format!("{prefix}coverage_{l}"), c.to_string()));
        }
        if let Some(a) = self.outlier_auc {
            kv.push((format!("{prefix}outlier_auc"), a.to_string()));
        }
        kv
    }

    pub fn coverage_csv(&self) -> String {
        let mut s = String::from("level,coverage\n");
        for (l, c) in &self.coverage {
            let _ = writeln!(s, "{l},{c}");
        }
        s
    }

    pub fn qq_csv(&self) -> String {
        let mut s = String::from("uniform_quantile,pit\n");
        for (u, p) in qq_points(&self.pit_values) {
            let _ = writeln!(s, "{u},{p}");
        }
        s
    }
}
