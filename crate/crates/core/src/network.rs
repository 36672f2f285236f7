//! Two-branch mixture density network.
//!
//! Signal branch: a conv stack over the terrain patch (conv → relu →
//! spatial dropout → 2×2 max-pool per stage), flattened and concatenated
//! with six standardized location features, then a dense stack with dropout
//! and two linear heads for `mu` and the raw `sigma`.
//!
//! Outlier branch: a linear map on the one-hot site id plus one hidden layer
//! on continuous time, summed into the logit of `theta`. It carries no
//! dropout; it is only used during training.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};

use crate::autodiff::{sigmoid, softplus, DropoutSpec, Graph, Mode, Tensor};
use crate::data::{Patch, TerrainGrid};
use crate::error::{Error, Result};
use crate::mixture::SIGMA_FLOOR;

pub const MINUTES_PER_DAY: u32 = 1440;
pub const LOCATION_FEATURES: usize = 6;

/// Initial `sigma` of the signal head, °C.
const INITIAL_SIGMA: f64 = 5.0;

/// Position of a minute-of-day on the unit circle: `(sin, cos)`.
pub fn encode_time_of_day(minute_of_day: u32) -> Result<(f64, f64)> {
    if minute_of_day >= MINUTES_PER_DAY {
        return Err(Error::InvalidParameter(format!("minute of day {minute_of_day} not in [0, 1440)")));
    }
    Ok(cyclic(minute_of_day as f64))
}

fn cyclic(minutes: f64) -> (f64, f64) {
    let angle = 2.0 * PI * minutes.rem_euclid(MINUTES_PER_DAY as f64) / MINUTES_PER_DAY as f64;
    angle.sin_cos()
}

/// Signal-branch location vector (raw units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationFeatures {
    pub easting: f64,
    pub northing: f64,
    pub elevation: f64,
    /// Minutes since the dataset epoch (a UTC midnight).
    pub t_cont: f64,
    pub tod_sin: f64,
    pub tod_cos: f64,
}

impl LocationFeatures {
    pub fn new(easting: f64, northing: f64, elevation: f64, t_cont: f64) -> Self {
        let (tod_sin, tod_cos) = cyclic(t_cont);
        Self {
            easting,
            northing,
            elevation,
            t_cont,
            tod_sin,
            tod_cos,
        }
    }

    pub fn to_array(&self) -> [f64; LOCATION_FEATURES] {
        [self.easting, self.northing, self.elevation, self.t_cont, self.tod_sin, self.tod_cos]
    }

    pub fn from_array(a: [f64; LOCATION_FEATURES]) -> Self {
        Self {
            easting: a[0],
            northing: a[1],
            elevation: a[2],
            t_cont: a[3],
            tod_sin: a[4],
            tod_cos: a[5],
        }
    }
}

/// Outlier-branch input: one-hot site plus continuous time.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFeatures {
    site: usize,
    n_sites: usize,
    pub t_cont: f64,
}

impl SiteFeatures {
    pub fn new(site: usize, n_sites: usize, t_cont: f64) -> Result<Self> {
        if site >= n_sites {
            return Err(Error::InvalidParameter(format!("site index {site} >= {n_sites}")));
        }
        Ok(Self { site, n_sites, t_cont })
    }

    /// Validates that exactly one entry is 1 and the rest 0.
    pub fn from_onehot(onehot: &[f64], t_cont: f64) -> Result<Self> {
        let ones: Vec<usize> = onehot.iter().enumerate().filter(|(_, v)| **v == 1.0).map(|(i, _)| i).collect();
        let zeros = onehot.iter().filter(|v| **v == 0.0).count();
        if ones.len() != 1 || zeros + 1 != onehot.len() {
            return Err(Error::InvalidParameter("site vector is not one-hot".into()));
        }
        Self::new(ones[0], onehot.len(), t_cont)
    }

    pub fn site(&self) -> usize {
        self.site
    }

    pub fn onehot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_sites];
        v[self.site] = 1.0;
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub conv_channels: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub outlier_hidden: usize,
    pub dropout_rate: f64,
    pub kernel_size: usize,
    pub patch_size: usize,
    /// Patch sample spacing, metres.
    pub patch_cell_m: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64],
            dense_widths: vec![128, 128, 64],
            outlier_hidden: 16,
            dropout_rate: 0.5,
            kernel_size: 3,
            patch_size: 32,
            patch_cell_m: 500.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad(format!("conv_channels {:?}", self.conv_channels));
        }
        if self.dense_widths.is_empty() || self.dense_widths.contains(&0) {
            return bad(format!("dense_widths {:?}", self.dense_widths));
        }
        if self.outlier_hidden == 0 {
            return bad("outlier_hidden must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {}", self.dropout_rate));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.patch_size >> self.conv_channels.len() == 0 {
            return bad(format!(
                "patch_size {} too small for {} pooling stages",
                self.patch_size,
                self.conv_channels.len()
            ));
        }
        if !(self.patch_cell_m > 0.0) {
            return bad(format!("patch_cell_m {}", self.patch_cell_m));
        }
        Ok(())
    }
}

/// Per-feature `(x - mean) / scale` transform fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub loc_mean: [f64; LOCATION_FEATURES],
    pub loc_scale: [f64; LOCATION_FEATURES],
    pub patch_mean: f64,
    pub patch_scale: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            loc_mean: [0.0; LOCATION_FEATURES],
            loc_scale: [1.0; LOCATION_FEATURES],
            patch_mean: 0.0,
            patch_scale: 1.0,
        }
    }
}

fn scale_or_one(sd: f64) -> f64 {
    if sd > 1e-12 && sd.is_finite() {
        sd
    } else {
        1.0
    }
}

impl Standardizer {
    /// Location statistics from `locs`; patch statistics from the valid DEM
    /// cells.
    pub fn fit(locs: &[LocationFeatures], dem: &TerrainGrid) -> Result<Self> {
        if locs.is_empty() {
            return Err(Error::InvalidParameter("cannot fit a standardizer on no rows".into()));
        }
        let n = locs.len() as f64;
        let mut mean = [0.0; LOCATION_FEATURES];
        for l in locs {
            for (m, v) in mean.iter_mut().zip(l.to_array()) {
                *m += v / n;
            }
        }
        let mut var = [0.0; LOCATION_FEATURES];
        for l in locs {
            for ((s, v), m) in var.iter_mut().zip(l.to_array()).zip(mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let (patch_mean, patch_sd) = dem.valid_stats().unwrap_or((0.0, 1.0));
        Ok(Self {
            loc_mean: mean,
            loc_scale: var.map(|v| scale_or_one(v.sqrt())),
            patch_mean,
            patch_scale: scale_or_one(patch_sd),
        })
    }

    pub fn standardize(&self, loc: &LocationFeatures) -> [f64; LOCATION_FEATURES] {
        let a = loc.to_array();
        std::array::from_fn(|i| (a[i] - self.loc_mean[i]) / self.loc_scale[i])
    }

    pub fn destandardize(&self, z: &[f64; LOCATION_FEATURES]) -> LocationFeatures {
        LocationFeatures::from_array(std::array::from_fn(|i| z[i] * self.loc_scale[i] + self.loc_mean[i]))
    }

    pub fn standardize_time(&self, t_cont: f64) -> f64 {
        (t_cont - self.loc_mean[3]) / self.loc_scale[3]
    }

    pub fn standardize_patch(&self, patch: &Patch) -> Vec<f32> {
        patch
            .values
            .iter()
            .map(|v| ((v - self.patch_mean) / self.patch_scale) as f32)
            .collect()
    }
}

/// Link for the spread head: `softplus(raw) + 0.01`.
pub fn sigma_link(raw: f64) -> f64 {
    softplus(raw) + SIGMA_FLOOR
}

/// Link for the mixing weight: logistic of the logit.
pub fn theta_link(logit: f64) -> f64 {
    sigmoid(logit)
}

/// Standardized inputs for a batch of signal-branch queries.
#[derive(Debug, Clone)]
pub struct SignalBatch {
    pub patch: Tensor<f32>,
    pub loc: Tensor<f32>,
}

impl SignalBatch {
    pub fn len(&self) -> usize {
        self.loc.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> [(&'static str, &Tensor<f32>); 2] {
        [("patch", &self.patch), ("loc", &self.loc)]
    }
}

/// Standardized inputs for a batch of outlier-branch queries. A site of
/// `None` is an all-zero one-hot row (a site the branch has never seen).
#[derive(Debug, Clone)]
pub struct OutlierBatch {
    pub site: Tensor<f32>,
    pub time: Tensor<f32>,
}

impl OutlierBatch {
    pub fn inputs(&self) -> [(&'static str, &Tensor<f32>); 2] {
        [("site", &self.site), ("time", &self.time)]
    }
}

/// The trainable model: both branches plus the input standardizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub config: NetworkConfig,
    pub n_sites: usize,
    pub signal: Graph<f32>,
    pub outlier: Graph<f32>,
    pub standardizer: Standardizer,
}

fn build_signal(cfg: &NetworkConfig) -> Result<Graph<f32>> {
    let mut g = Graph::new();
    let p = cfg.patch_size;
    let mut x = g.input("patch", &[1, p, p])?;
    let loc = g.input("loc", &[LOCATION_FEATURES])?;
    let conv_drop = DropoutSpec::new(cfg.dropout_rate, true)?;
    let dense_drop = DropoutSpec::new(cfg.dropout_rate, false)?;
    for (i, &ch) in cfg.conv_channels.iter().enumerate() {
        x = g.conv2d(&format!("conv{i}"), x, ch, cfg.kernel_size)?;
        x = g.relu(&format!("conv{i}_relu"), x)?;
        x = g.dropout(&format!("conv{i}_drop"), x, conv_drop)?;
        x = g.maxpool2x2(&format!("conv{i}_pool"), x)?;
    }
    let flat = g.flatten("flatten", x)?;
    let mut h = g.concat("features", &[flat, loc])?;
    for (i, &w) in cfg.dense_widths.iter().enumerate() {
        h = g.dense(&format!("dense{i}"), h, w)?;
        h = g.relu(&format!("dense{i}_relu"), h)?;
        h = g.dropout(&format!("dense{i}_drop"), h, dense_drop)?;
    }
    let mu = g.dense("mu_head", h, 1)?;
    let sigma = g.dense("sigma_head", h, 1)?;
    g.mark_output("mu_raw", mu)?;
    g.mark_output("sigma_raw", sigma)?;
    Ok(g)
}

fn build_outlier(cfg: &NetworkConfig, n_sites: usize) -> Result<Graph<f32>> {
    let mut g = Graph::new();
    let site = g.input("site", &[n_sites])?;
    let time = g.input("time", &[1])?;
    let hidden = g.dense("time_hidden", time, cfg.outlier_hidden)?;
    let hidden = g.relu("time_hidden_relu", hidden)?;
    let joined = g.concat("site_time", &[site, hidden])?;
    let logit = g.dense("theta_head", joined, 1)?;
    g.mark_output("theta_logit", logit)?;
    Ok(g)
}

/// Builds and initializes both branches.
pub fn build_model<R: Rng + ?Sized>(cfg: &NetworkConfig, n_sites: usize, rng: &mut R) -> Result<ModelGraph> {
    cfg.validate()?;
    if n_sites == 0 {
        return Err(Error::InvalidParameter("n_sites must be >= 1".into()));
    }
    let mut signal = build_signal(cfg)?;
    let mut outlier = build_outlier(cfg, n_sites)?;
    signal.init_params(rng);
    outlier.init_params(rng);
    // softplus(b) + floor = INITIAL_SIGMA
    let b = ((INITIAL_SIGMA - SIGMA_FLOOR).exp() - 1.0).ln() as f32;
    signal.param_mut("sigma_head.bias").expect("sigma head").value.data_mut()[0] = b;
    Ok(ModelGraph {
        config: cfg.clone(),
        n_sites,
        signal,
        outlier,
        standardizer: Standardizer::default(),
    })
}

impl ModelGraph {
    pub fn param_count(&self) -> usize {
        self.signal.param_count() + self.outlier.param_count()
    }

    pub fn signal_batch(&self, items: &[(&Patch, &LocationFeatures)]) -> Result<SignalBatch> {
        let p = self.config.patch_size;
        let mut patch = Vec::with_capacity(items.len() * p * p);
        let mut loc = Vec::with_capacity(items.len() * LOCATION_FEATURES);
        for (pa, l) in items {
            if pa.size != p {
                return Err(Error::InvalidParameter(format!("patch size {} != {p}", pa.size)));
            }
            patch.extend(self.standardizer.standardize_patch(pa));
            loc.extend(self.standardizer.standardize(l).map(|v| v as f32));
        }
        self.signal_batch_from_standardized(patch, loc)
    }

    pub fn signal_batch_from_standardized(&self, patch: Vec<f32>, loc: Vec<f32>) -> Result<SignalBatch> {
        let n = loc.len() / LOCATION_FEATURES;
        let p = self.config.patch_size;
        Ok(SignalBatch {
            patch: Tensor::new(vec![n, 1, p, p], patch)?,
            loc: Tensor::new(vec![n, LOCATION_FEATURES], loc)?,
        })
    }

    /// `(site index or None, raw t_cont)` pairs to branch inputs.
    pub fn outlier_batch(&self, items: &[(Option<usize>, f64)]) -> Result<OutlierBatch> {
        let mut site = vec![0.0f32; items.len() * self.n_sites];
        let mut time = Vec::with_capacity(items.len());
        for (i, (s, t)) in items.iter().enumerate() {
            if let Some(s) = s {
                if *s >= self.n_sites {
                    return Err(Error::InvalidParameter(format!("site index {s} >= {}", self.n_sites)));
                }
                site[i * self.n_sites + s] = 1.0;
            }
            time.push(self.standardizer.standardize_time(*t) as f32);
        }
        Ok(OutlierBatch {
            site: Tensor::new(vec![items.len(), self.n_sites], site)?,
            time: Tensor::new(vec![items.len(), 1], time)?,
        })
    }

    /// `(mu, sigma)` per query after the links.
    pub fn signal_params<R: Rng + ?Sized>(&self, batch: &SignalBatch, mode: Mode, rng: &mut R) -> Result<Vec<(f64, f64)>> {
        let rec = self.signal.predict(&batch.inputs(), mode, rng)?;
        Ok(signal_heads(&rec))
    }

    pub fn signal_forward<R: Rng + ?Sized>(&self, patch: &Patch, loc: &LocationFeatures, mode: Mode, rng: &mut R) -> Result<(f64, f64)> {
        let batch = self.signal_batch(&[(patch, loc)])?;
        Ok(self.signal_params(&batch, mode, rng)?[0])
    }

    pub fn theta_logits(&self, batch: &OutlierBatch) -> Result<Vec<f64>> {
        // No dropout in this branch: the stream is never drawn from.
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let rec = self.outlier.predict(&batch.inputs(), Mode::Deterministic, &mut unused)?;
        Ok(rec
            .output("theta_logit")
            .expect("outlier output")
            .data()
            .iter()
            .map(|v| *v as f64)
            .collect())
    }

    /// `theta` for one site at one time. The branch has no dropout, so the
    /// mode and stream do not change the result.
    pub fn outlier_forward<R: Rng + ?Sized>(&self, site: &SiteFeatures, _mode: Mode, _rng: &mut R) -> Result<f64> {
        if site.n_sites != self.n_sites {
            return Err(Error::InvalidParameter(format!(
                "one-hot of length {} for a model of {} sites",
                site.n_sites, self.n_sites
            )));
        }
        let batch = self.outlier_batch(&[(Some(site.site), site.t_cont)])?;
        Ok(theta_link(self.theta_logits(&batch)?[0]))
    }
}

pub(crate) fn signal_heads(rec: &crate::autodiff::Record<f32>) -> Vec<(f64, f64)> {
    let mu = rec.output("mu_raw").expect("mu output");
    let sr = rec.output("sigma_raw").expect("sigma output");
    mu.data()
        .iter()
        .zip(sr.data())
        .map(|(m, s)| (*m as f64, sigma_link(*s as f64)))
        .collect()
}
