//! Joint training of both branches on the mixture negative log-likelihood.
//!
//! The loss for a batch is the mean mixture NLL. Head gradients with respect
//! to the raw graph outputs (`mu_raw`, `sigma_raw`, `theta_logit`) are formed
//! analytically in f64 and fed to each branch's reverse pass. Parameters are
//! updated with Adam after clipping the global gradient norm.
//!
//! All randomness comes from named streams: `shuffle` per epoch and
//! `dropout` per (epoch, batch). Resuming from epoch `k` therefore replays
//! exactly the batches an uninterrupted run would have seen.

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{sigmoid, softplus, Mode, Param, Record, Tensor};
use crate::data::{extract_patch, ObservationTable, SiteIndex, TerrainGrid};
use crate::error::{Error, Result};
use crate::inference::empirical_quantile;
use crate::mixture::{log_add_exp, OutlierComponent, LN_SQRT_2PI};
use crate::network::{build_model, sigma_link, signal_heads, LocationFeatures, ModelGraph, NetworkConfig, Standardizer, LOCATION_FEATURES};
use crate::rng::Streams;

/// Which likelihood the signal heads are fitted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    /// Gaussian-uniform mixture with learned `theta`.
    Mixture,
    /// Plain Gaussian (`theta` fixed at 1); the outlier branch is untouched.
    Gaussian,
}

impl Likelihood {
    pub fn as_str(self) -> &'static str {
        match self {
            Likelihood::Mixture => "mixture",
            Likelihood::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixture" => Ok(Likelihood::Mixture),
            "gaussian" => Ok(Likelihood::Gaussian),
            _ => Err(Error::InvalidParameter(format!("unknown likelihood {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub likelihood: Likelihood,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 512,
            seed: 0,
            shuffle: true,
            learning_rate: 1e-3,
            clip_norm: Some(10.0),
            likelihood: Likelihood::Mixture,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning_rate {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter(format!("clip_norm {c}")));
            }
        }
        Ok(())
    }
}

/// Adam moments for a flat list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<f32>>, learning_rate: f64) -> Self {
        let m: Vec<Tensor<f32>> = params.into_iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    pub fn for_model(model: &ModelGraph, learning_rate: f64) -> Self {
        Self::new(model.signal.params().iter().chain(model.outlier.params()), learning_rate)
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before any parameter is touched.
pub fn adam_step(params: &mut [&mut Param<f32>], grads: &[&Tensor<f32>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            expected: state.m.len(),
            actual: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.shape() != g.shape() || m.shape() != g.shape() {
            return Err(Error::shape(
                &p.name,
                format!("gradient shape {:?} vs {:?}", g.shape(), p.value.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = state.learning_rate * (mj / c1) / ((vj / c2).sqrt() + state.eps_hat);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Summed NLL of a batch and its gradient with respect to each raw head
/// output. `theta_logit = None` means the Gaussian likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub nll: f64,
    pub d_mu: Vec<f64>,
    pub d_sigma_raw: Vec<f64>,
    pub d_theta_logit: Option<Vec<f64>>,
}

pub fn head_gradients(y: &[f64], mu: &[f64], sigma_raw: &[f64], theta_logit: Option<&[f64]>) -> Result<HeadGradients> {
    let n = y.len();
    for len in [mu.len(), sigma_raw.len(), theta_logit.map_or(n, |t| t.len())] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, actual: len });
        }
    }
    let log_u = OutlierComponent::STANDARD.log_density();
    let mut out = HeadGradients {
        nll: 0.0,
        d_mu: vec![0.0; n],
        d_sigma_raw: vec![0.0; n],
        d_theta_logit: theta_logit.map(|_| vec![0.0; n]),
    };
    for i in 0..n {
        let sigma = sigma_link(sigma_raw[i]);
        let r = y[i] - mu[i];
        let z = r / sigma;
        let log_n = -0.5 * z * z - sigma.ln() - LN_SQRT_2PI;
        let (nll, gamma) = match theta_logit {
            None => (-log_n, 1.0),
            Some(a) => {
                let log_theta = -softplus(-a[i]);
                let log_1m = -softplus(a[i]);
                let ls = log_theta + log_n;
                let total = log_add_exp(ls, log_1m + log_u);
                let gamma = (ls - total).exp();
                if let Some(d) = out.d_theta_logit.as_mut() {
                    d[i] = sigmoid(a[i]) - gamma;
                }
                (-total, gamma)
            }
        };
        out.nll += nll;
        out.d_mu[i] = -gamma * r / (sigma * sigma);
        let d_sigma = -gamma * (z * z - 1.0) / sigma;
        out.d_sigma_raw[i] = d_sigma * sigmoid(sigma_raw[i]);
    }
    if !out.nll.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok(out)
}

/// Time origin and site vocabulary fixed by the training folds.
#[derive(Debug, Clone, PartialEq)]
pub struct DataContext {
    /// UTC midnight on or before the earliest training timestamp.
    pub origin: DateTime<Utc>,
    /// First and last training timestamps.
    pub window: (DateTime<Utc>, DateTime<Utc>),
    pub sites: SiteIndex,
}

impl DataContext {
    pub fn from_training(table: &ObservationTable) -> Result<Self> {
        let (start, end) = table
            .time_window()
            .ok_or_else(|| Error::InvalidParameter("no training observations".into()))?;
        let origin = start.date_naive().and_hms_opt(0, 0, 0).expect("midnight").and_utc();
        Ok(Self {
            origin,
            window: (start, end),
            sites: SiteIndex::from_table(table),
        })
    }

    pub fn in_window(&self, t: &DateTime<Utc>) -> bool {
        (self.window.0..=self.window.1).contains(t)
    }

    /// Minutes since the origin.
    pub fn minutes(&self, t: &DateTime<Utc>) -> f64 {
        let d: Duration = *t - self.origin;
        d.num_milliseconds() as f64 / 60_000.0
    }

    pub fn location_features(&self, easting: f64, northing: f64, t: &DateTime<Utc>, dem: &TerrainGrid) -> Result<LocationFeatures> {
        let elevation = dem.bilinear_sample(easting, northing)?;
        Ok(LocationFeatures::new(easting, northing, elevation, self.minutes(t)))
    }
}

/// Standardizer fitted on the training rows.
pub fn fit_standardizer(ctx: &DataContext, train: &ObservationTable, dem: &TerrainGrid) -> Result<Standardizer> {
    let locs = train
        .rows
        .iter()
        .map(|o| ctx.location_features(o.easting, o.northing, &o.timestamp, dem))
        .collect::<Result<Vec<_>>>()?;
    Standardizer::fit(&locs, dem)
}

/// Builds a model for `train`: fitted standardizer, and the mean head's bias
/// at the median training reading so early epochs fit structure rather than
/// the overall level. The median ignores contaminated readings.
pub fn initialize_model<R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    ctx: &DataContext,
    train: &ObservationTable,
    dem: &TerrainGrid,
    rng: &mut R,
) -> Result<ModelGraph> {
    let mut model = build_model(cfg, ctx.sites.len(), rng)?;
    model.standardizer = fit_standardizer(ctx, train, dem)?;
    let mut ys: Vec<f64> = train.rows.iter().map(|o| o.temp_c).collect();
    ys.sort_by(f64::total_cmp);
    let median = empirical_quantile(&ys, 0.5);
    let bias = model.signal.param_mut("mu_head.bias").expect("mean head");
    bias.value.data_mut()[0] = median as f32;
    Ok(model)
}

/// Observations turned into standardized network inputs, with one cached
/// patch per distinct location.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub y: Vec<f64>,
    pub site: Vec<Option<usize>>,
    pub t_cont: Vec<f64>,
    loc: Vec<f32>,
    patch_of: Vec<usize>,
    patches: Vec<f32>,
    patch_len: usize,
}

impl PreparedSet {
    pub fn new(model: &ModelGraph, ctx: &DataContext, table: &ObservationTable, dem: &TerrainGrid) -> Result<Self> {
        let cfg = &model.config;
        let patch_len = cfg.patch_size * cfg.patch_size;
        let mut cache: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        let mut set = PreparedSet {
            y: Vec::with_capacity(table.len()),
            site: Vec::with_capacity(table.len()),
            t_cont: Vec::with_capacity(table.len()),
            loc: Vec::with_capacity(table.len() * LOCATION_FEATURES),
            patch_of: Vec::with_capacity(table.len()),
            patches: Vec::new(),
            patch_len,
        };
        for o in &table.rows {
            let lf = ctx.location_features(o.easting, o.northing, &o.timestamp, dem)?;
            let key = (o.easting.to_bits(), o.northing.to_bits());
            let next = cache.len();
            let idx = *cache.entry(key).or_insert(next);
            if idx == next {
                let p = extract_patch(dem, o.easting, o.northing, cfg.patch_size, cfg.patch_cell_m);
                set.patches.extend(model.standardizer.standardize_patch(&p));
            }
            set.patch_of.push(idx);
            set.loc.extend(model.standardizer.standardize(&lf).map(|v| v as f32));
            set.y.push(o.temp_c);
            set.site.push(ctx.sites.index_of(&o.site_id));
            set.t_cont.push(lf.t_cont);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn distinct_patches(&self) -> usize {
        self.patches.len() / self.patch_len.max(1)
    }

    pub fn signal_batch(&self, model: &ModelGraph, idx: &[usize]) -> Result<crate::network::SignalBatch> {
        let mut patch = Vec::with_capacity(idx.len() * self.patch_len);
        let mut loc = Vec::with_capacity(idx.len() * LOCATION_FEATURES);
        for &i in idx {
            let p = self.patch_of[i] * self.patch_len;
            patch.extend_from_slice(&self.patches[p..p + self.patch_len]);
            loc.extend_from_slice(&self.loc[i * LOCATION_FEATURES..(i + 1) * LOCATION_FEATURES]);
        }
        model.signal_batch_from_standardized(patch, loc)
    }

    pub fn outlier_batch(&self, model: &ModelGraph, idx: &[usize]) -> Result<crate::network::OutlierBatch> {
        let items: Vec<(Option<usize>, f64)> = idx.iter().map(|&i| (self.site[i], self.t_cont[i])).collect();
        model.outlier_batch(&items)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_nll: f64,
    pub eval_nll: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// One line of the metrics log.
    pub fn log_line(&self) -> String {
        let eval = self.eval_nll.map_or("nan".to_string(), |v| v.to_string());
        format!("{}\t{}\t{}\t{:.3}", self.epoch, self.train_nll, eval, self.wall_seconds)
    }
}

pub const METRICS_HEADER: &str = "epoch\ttrain_nll\teval_nll\twall_seconds";

/// Everything beyond the weights needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: &ModelGraph, tc: &TrainConfig) -> Self {
        Self {
            optimizer: OptimizerState::for_model(model, tc.learning_rate),
            epochs_done: 0,
            history: Vec::new(),
        }
    }
}

fn raw_outputs(rec: &Record<f32>, name: &str) -> Vec<f64> {
    rec.output(name).expect("graph output").data().iter().map(|v| *v as f64).collect()
}

fn column(values: &[f64], scale: f64) -> Result<Tensor<f32>> {
    Tensor::new(vec![values.len(), 1], values.iter().map(|v| (v * scale) as f32).collect())
}

/// Forward, loss and parameter gradients for one batch. Returns the summed
/// NLL and gradients of the mean NLL (signal params then outlier params).
fn batch_step(
    model: &ModelGraph,
    set: &PreparedSet,
    idx: &[usize],
    likelihood: Likelihood,
    rng: &mut crate::rng::StreamRng,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let sb = set.signal_batch(model, idx)?;
    let srec = model.signal.forward(&sb.inputs(), Mode::Train, rng)?;
    let mu = raw_outputs(&srec, "mu_raw");
    let sr = raw_outputs(&srec, "sigma_raw");
    let y: Vec<f64> = idx.iter().map(|&i| set.y[i]).collect();
    let scale = 1.0 / idx.len() as f64;
    let (hg, orec) = match likelihood {
        Likelihood::Gaussian => (head_gradients(&y, &mu, &sr, None)?, None),
        Likelihood::Mixture => {
            let ob = set.outlier_batch(model, idx)?;
            let orec = model.outlier.forward(&ob.inputs(), Mode::Train, rng)?;
            let a = raw_outputs(&orec, "theta_logit");
            (head_gradients(&y, &mu, &sr, Some(&a))?, Some(orec))
        }
    };
    let sg = model.signal.backward(
        &srec,
        &[("mu_raw", column(&hg.d_mu, scale)?), ("sigma_raw", column(&hg.d_sigma_raw, scale)?)],
    )?;
    let mut grads = sg.params;
    match (orec, &hg.d_theta_logit) {
        (Some(orec), Some(da)) => {
            let og = model.outlier.backward(&orec, &[("theta_logit", column(da, scale)?)])?;
            grads.extend(og.params);
        }
        _ => grads.extend(model.outlier.params().iter().map(|p| Tensor::zeros(p.value.shape()))),
    }
    Ok((hg.nll, grads))
}

fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) {
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| (*v as f64) * (*v as f64)).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Summed NLL of `set` in deterministic mode (no dropout). Sites outside the
/// training vocabulary get the outlier branch's zero-one-hot value.
pub fn evaluate_nll(model: &ModelGraph, set: &PreparedSet, likelihood: Likelihood) -> Result<f64> {
    let mut total = 0.0;
    let mut unused = Streams::new(0).derive("unused", &[]);
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(1024) {
        let sb = set.signal_batch(model, idx)?;
        let srec = model.signal.predict(&sb.inputs(), Mode::Deterministic, &mut unused)?;
        let mu = raw_outputs(&srec, "mu_raw");
        let sr = raw_outputs(&srec, "sigma_raw");
        let y: Vec<f64> = idx.iter().map(|&i| set.y[i]).collect();
        let a = match likelihood {
            Likelihood::Gaussian => None,
            Likelihood::Mixture => Some(model.theta_logits(&set.outlier_batch(model, idx)?)?),
        };
        total += head_gradients(&y, &mu, &sr, a.as_deref())?.nll;
    }
    Ok(total)
}

/// Runs epochs `state.epochs_done + 1 ..= tc.epochs`. After each epoch
/// `on_epoch` is called with the updated model and state (metrics logging,
/// checkpoints). On a non-finite loss or gradient the model and state are
/// restored to the end of the last completed epoch and the run aborts.
pub fn train<F>(
    model: &mut ModelGraph,
    state: &mut TrainState,
    train_set: &PreparedSet,
    eval_set: Option<&PreparedSet>,
    tc: &TrainConfig,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&ModelGraph, &TrainState) -> Result<()>,
{
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let streams = Streams::new(tc.seed);
    let started = Instant::now();
    while state.epochs_done < tc.epochs {
        let epoch = state.epochs_done + 1;
        let good_model = model.clone();
        let good_state = state.clone();
        match run_epoch(model, state, train_set, tc, &streams, epoch) {
            Ok(train_total) => {
                let eval_nll = match eval_set {
                    Some(e) if !e.is_empty() => Some(evaluate_nll(model, e, tc.likelihood)? / e.len() as f64),
                    _ => None,
                };
                state.epochs_done = epoch;
                state.history.push(EpochMetrics {
                    epoch,
                    train_nll: train_total / train_set.len() as f64,
                    eval_nll,
                    wall_seconds: started.elapsed().as_secs_f64(),
                });
                on_epoch(model, state)?;
            }
            Err(e @ (Error::NonFinite(_) | Error::TrainingAborted { .. })) => {
                *model = good_model;
                *state = good_state;
                return Err(Error::TrainingAborted {
                    epoch,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn run_epoch(
    model: &mut ModelGraph,
    state: &mut TrainState,
    set: &PreparedSet,
    tc: &TrainConfig,
    streams: &Streams,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    if tc.shuffle {
        order.shuffle(&mut streams.derive("shuffle", &[epoch as u64]));
    }
    let mut total = 0.0;
    for (b, idx) in order.chunks(tc.batch_size).enumerate() {
        let mut rng = streams.derive("dropout", &[epoch as u64, b as u64]);
        let (nll, mut grads) = batch_step(model, set, idx, tc.likelihood, &mut rng)?;
        total += nll;
        if let Some(c) = tc.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let ModelGraph { signal, outlier, .. } = model;
        let mut params: Vec<&mut Param<f32>> = signal.params_mut().iter_mut().chain(outlier.params_mut()).collect();
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        adam_step(&mut params, &grad_refs, &mut state.optimizer)?;
    }
    Ok(total)
}

/// Signal-head predictions `(mu, sigma)` for every row, deterministic mode.
pub fn predict_deterministic(model: &ModelGraph, set: &PreparedSet) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(set.len());
    let mut unused = Streams::new(0).derive("unused", &[]);
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(1024) {
        let sb = set.signal_batch(model, idx)?;
        let rec = model.signal.predict(&sb.inputs(), Mode::Deterministic, &mut unused)?;
        out.extend(signal_heads(&rec));
    }
    Ok(out)
}
