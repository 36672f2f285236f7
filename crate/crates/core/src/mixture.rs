//! Gaussian-uniform mixture: densities, responsibilities, sampling and the
//! batch negative log-likelihood used as the training loss.
//!
//! The signal component is `Normal(mu, sigma^2)`. The outlier component is a
//! uniform of half-width 50 °C centred on `mu`; its density is treated as the
//! constant 1/100 everywhere so the likelihood never collapses to zero for
//! far-away readings. Sampling uses the bounded support.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Smallest admissible signal standard deviation, °C.
pub const SIGMA_FLOOR: f64 = 0.01;

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Fixed uniform outlier component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierComponent {
    pub half_width: f64,
}

impl OutlierComponent {
    pub const STANDARD: OutlierComponent = OutlierComponent { half_width: 50.0 };

    pub fn density(&self) -> f64 {
        1.0 / (2.0 * self.half_width)
    }

    pub fn log_density(&self) -> f64 {
        self.density().ln()
    }
}

/// Per-observation mixture parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureParams {
    pub mu: f64,
    pub sigma: f64,
    pub theta: f64,
}

impl MixtureParams {
    pub fn new(mu: f64, sigma: f64, theta: f64) -> Result<Self> {
        let p = Self { mu, sigma, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::InvalidParameter(format!("mu = {}", self.mu)));
        }
        if !(self.sigma >= SIGMA_FLOOR) || !self.sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma = {} below floor {SIGMA_FLOOR}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!("theta = {} outside [0, 1]", self.theta)));
        }
        Ok(())
    }
}

/// Latent component indicator: `Signal` is Z = 1, `Outlier` is Z = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentAssignment {
    Signal,
    Outlier,
}

impl LatentAssignment {
    pub fn z(self) -> u8 {
        match self {
            LatentAssignment::Signal => 1,
            LatentAssignment::Outlier => 0,
        }
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn gaussian_log_density(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -0.5 * z * z - LN_SQRT_2PI - sigma.ln()
}

pub fn signal_log_density(y: f64, p: &MixtureParams) -> Result<f64> {
    p.validate()?;
    Ok(gaussian_log_density(y, p.mu, p.sigma))
}

/// Weighted log-components `(log θ + log p_signal, log(1-θ) + log p_outlier)`.
fn weighted_log_components(y: f64, p: &MixtureParams) -> (f64, f64) {
    let log_sig = p.theta.ln() + gaussian_log_density(y, p.mu, p.sigma);
    let log_out = (1.0 - p.theta).ln() + OutlierComponent::STANDARD.log_density();
    (log_sig, log_out)
}

pub fn mixture_log_density(y: f64, p: &MixtureParams) -> Result<f64> {
    p.validate()?;
    let (a, b) = weighted_log_components(y, p);
    Ok(log_add_exp(a, b))
}

/// Posterior probability that `y` came from the uniform outlier component.
pub fn outlier_responsibility(y: f64, p: &MixtureParams) -> Result<f64> {
    p.validate()?;
    let (a, b) = weighted_log_components(y, p);
    if b == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    Ok((b - log_add_exp(a, b)).exp())
}

/// Draws `(y, z)`: `z ~ Bernoulli(theta)`, then `y` from the chosen component.
pub fn sample_mixture<R: Rng + ?Sized>(p: &MixtureParams, rng: &mut R) -> Result<(f64, LatentAssignment)> {
    p.validate()?;
    let u: f64 = rng.random();
    if u < p.theta {
        let n: f64 = StandardNormal.sample(rng);
        Ok((p.mu + p.sigma * n, LatentAssignment::Signal))
    } else {
        let hw = OutlierComponent::STANDARD.half_width;
        let y = p.mu - hw + 2.0 * hw * rng.random::<f64>();
        Ok((y, LatentAssignment::Outlier))
    }
}

/// Negative log-likelihood of independent observations.
pub fn batch_nll(ys: &[f64], ps: &[MixtureParams]) -> Result<f64> {
    if ys.len() != ps.len() {
        return Err(Error::LengthMismatch {
            expected: ys.len(),
            actual: ps.len(),
        });
    }
    if ys.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut total = 0.0;
    for (y, p) in ys.iter().zip(ps) {
        total -= mixture_log_density(*y, p)?;
    }
    Ok(total)
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

pub(crate) fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}
