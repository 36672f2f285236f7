//! Monte Carlo dropout prediction with the signal branch only.
//!
//! Each stochastic pass draws fresh dropout masks and yields `(mu_k,
//! sigma_k)` per query. The outlier component is excluded at prediction
//! time, so the predictive distribution is the equal-weight mixture of the
//! `N` Gaussians `Normal(mu_k, sigma_k^2)`.

use chrono::{DateTime, Utc};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{DropoutMasks, Mode};
use crate::data::{extract_patch, TerrainGrid};
use crate::error::{Error, Result};
use crate::network::{signal_heads, ModelGraph, SignalBatch, LOCATION_FEATURES};
use crate::rng::Streams;
use crate::training::DataContext;

/// Passes used when none is configured.
pub const DEFAULT_PASSES: usize = 50;

/// Queries per forward batch. Part of the sampling contract: changing it
/// changes which stream draws land on which query.
pub const CHUNK: usize = 256;

/// Pass outputs for one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `mu_k + sigma_k * z` draws, `draws_per_pass` per pass, pass-major.
    pub y: Option<Vec<f64>>,
}

impl PredictiveSamples {
    pub fn passes(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySummary {
    pub mean: f64,
    pub aleatoric_sd: f64,
    pub epistemic_sd: f64,
    pub total_sd: f64,
    /// `(level, value)` pairs in the order requested.
    pub quantiles: Vec<(f64, f64)>,
}

/// `N` stochastic passes over a batch. `draws_per_pass = 0` skips the `y`
/// draws.
pub fn mc_passes<R: Rng + ?Sized>(
    model: &ModelGraph,
    batch: &SignalBatch,
    passes: usize,
    draws_per_pass: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<PredictiveSamples>> {
    if passes == 0 {
        return Err(Error::InvalidParameter("at least one pass is required".into()));
    }
    let q = batch.len();
    let mut out: Vec<PredictiveSamples> = (0..q)
        .map(|_| PredictiveSamples {
            mu: Vec::with_capacity(passes),
            sigma: Vec::with_capacity(passes),
            y: (draws_per_pass > 0).then(|| Vec::with_capacity(passes * draws_per_pass)),
        })
        .collect();
    for _ in 0..passes {
        let rec = model.signal.predict(&batch.inputs(), mode, rng)?;
        for (s, (mu, sigma)) in out.iter_mut().zip(signal_heads(&rec)) {
            s.mu.push(mu);
            s.sigma.push(sigma);
            if let Some(y) = s.y.as_mut() {
                for _ in 0..draws_per_pass {
                    let z: f64 = StandardNormal.sample(rng);
                    y.push(mu + sigma * z);
                }
            }
        }
    }
    Ok(out)
}

/// Linear-interpolated empirical quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = level.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(ps: &PredictiveSamples, levels: &[f64]) -> Result<UncertaintySummary> {
    let n = ps.passes();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let nf = n as f64;
    let mean = ps.mu.iter().sum::<f64>() / nf;
    let epistemic_var = ps.mu.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / nf;
    let aleatoric_var = ps.sigma.iter().map(|s| s * s).sum::<f64>() / nf;
    let mut quantiles = Vec::with_capacity(levels.len());
    if !levels.is_empty() {
        let y =
            ps.y.as_ref()
                .ok_or_else(|| Error::InvalidParameter("quantiles need predictive draws".into()))?;
        let mut sorted = y.clone();
        sorted.sort_by(f64::total_cmp);
        for &l in levels {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidParameter(format!("quantile level {l}")));
            }
            quantiles.push((l, empirical_quantile(&sorted, l)));
        }
    }
    Ok(UncertaintySummary {
        mean,
        aleatoric_sd: aleatoric_var.sqrt(),
        epistemic_sd: epistemic_var.sqrt(),
        total_sd: (epistemic_var + aleatoric_var).sqrt(),
        quantiles,
    })
}

/// A point in space and time to predict at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub easting: f64,
    pub northing: f64,
    pub time: DateTime<Utc>,
}

/// Featurizes queries: terrain patch around each point plus its location
/// vector.
pub fn query_batch(model: &ModelGraph, ctx: &DataContext, dem: &TerrainGrid, queries: &[Query]) -> Result<SignalBatch> {
    let cfg = &model.config;
    let mut patch = Vec::with_capacity(queries.len() * cfg.patch_size * cfg.patch_size);
    let mut loc = Vec::with_capacity(queries.len() * LOCATION_FEATURES);
    for q in queries {
        let lf = ctx.location_features(q.easting, q.northing, &q.time, dem)?;
        let p = extract_patch(dem, q.easting, q.northing, cfg.patch_size, cfg.patch_cell_m);
        patch.extend(model.standardizer.standardize_patch(&p));
        loc.extend(model.standardizer.standardize(&lf).map(|v| v as f32));
    }
    model.signal_batch_from_standardized(patch, loc)
}

/// `mc_passes` over any number of queries, in chunks of [`CHUNK`]. Chunk `c`
/// draws from stream `(stream, [c])`.
#[allow(clippy::too_many_arguments)]
pub fn predict_points(
    model: &ModelGraph,
    ctx: &DataContext,
    dem: &TerrainGrid,
    queries: &[Query],
    passes: usize,
    draws_per_pass: usize,
    streams: &Streams,
    stream: &str,
) -> Result<Vec<PredictiveSamples>> {
    let mut out = Vec::with_capacity(queries.len());
    for (c, chunk) in queries.chunks(CHUNK).enumerate() {
        let batch = query_batch(model, ctx, dem, chunk)?;
        let mut rng = streams.derive(stream, &[c as u64]);
        out.extend(mc_passes(model, &batch, passes, draws_per_pass, Mode::McSample, &mut rng)?);
    }
    Ok(out)
}

/// Axis-aligned box, metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// Raster lattice covering a bbox at a given resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLayout {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
}

impl GridLayout {
    /// Cells are anchored at the lower-left corner; a partial last column or
    /// row is dropped.
    pub fn new(bbox: &BBox, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::InvalidParameter(format!("resolution {resolution}")));
        }
        let cells = |span: f64| ((span / resolution) + 1e-9).floor();
        let (nc, nr) = (cells(bbox.xmax - bbox.xmin), cells(bbox.ymax - bbox.ymin));
        if !(nc >= 1.0 && nr >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "bbox {bbox:?} holds no cell at resolution {resolution}"
            )));
        }
        Ok(Self {
            ncols: nc as usize,
            nrows: nr as usize,
            xll: bbox.xmin,
            yll: bbox.ymin,
            cellsize: resolution,
        })
    }

    /// Cell centres in raster order (row 0 is north).
    pub fn centres(&self) -> Vec<(f64, f64)> {
        let top = self.yll + self.nrows as f64 * self.cellsize;
        (0..self.nrows)
            .flat_map(|r| {
                (0..self.ncols).map(move |c| (self.xll + (c as f64 + 0.5) * self.cellsize, top - (r as f64 + 0.5) * self.cellsize))
            })
            .collect()
    }

    pub fn raster(&self, values: Vec<f64>, nodata: f64) -> Result<TerrainGrid> {
        TerrainGrid::new(self.ncols, self.nrows, self.xll, self.yll, self.cellsize, nodata, values)
    }
}

pub const GRID_NODATA: f64 = -9999.0;

/// Per-cell summaries on a lattice; cells whose elevation is missing are
/// `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub layout: GridLayout,
    pub cells: Vec<Option<UncertaintySummary>>,
}

impl GridPrediction {
    /// `(name, raster)` for mean, aleatoric_sd, epistemic_sd, total_sd and
    /// one raster per quantile level.
    pub fn rasters(&self) -> Result<Vec<(String, TerrainGrid)>> {
        let field =
            |f: &dyn Fn(&UncertaintySummary) -> f64| -> Vec<f64> { self.cells.iter().map(|c| c.as_ref().map_or(GRID_NODATA, f)).collect() };
        let mut out = vec![
            ("mean".to_string(), self.layout.raster(field(&|s| s.mean), GRID_NODATA)?),
            (
                "aleatoric_sd".to_string(),
                self.layout.raster(field(&|s| s.aleatoric_sd), GRID_NODATA)?,
            ),
            (
                "epistemic_sd".to_string(),
                self.layout.raster(field(&|s| s.epistemic_sd), GRID_NODATA)?,
            ),
            ("total_sd".to_string(), self.layout.raster(field(&|s| s.total_sd), GRID_NODATA)?),
        ];
        let levels: Vec<f64> = self
            .cells
            .iter()
            .flatten()
            .next()
            .map(|s| s.quantiles.iter().map(|(l, _)| *l).collect())
            .unwrap_or_default();
        for (i, l) in levels.iter().enumerate() {
            let vals = field(&|s| s.quantiles[i].1);
            out.push((format!("q{}", quantile_tag(*l)), self.layout.raster(vals, GRID_NODATA)?));
        }
        Ok(out)
    }
}

/// `0.025` → `"0025"`, `0.5` → `"05"`.
pub fn quantile_tag(level: f64) -> String {
    format!("{level}").replace('.', "")
}

fn grid_queries(layout: &GridLayout, dem: &TerrainGrid, time: DateTime<Utc>) -> (Vec<Query>, Vec<usize>) {
    let mut queries = Vec::new();
    let mut cells = Vec::new();
    for (i, (x, y)) in layout.centres().into_iter().enumerate() {
        if dem.bilinear_sample(x, y).is_ok() {
            queries.push(Query {
                easting: x,
                northing: y,
                time,
            });
            cells.push(i);
        }
    }
    (queries, cells)
}

fn check_bbox(bbox: &BBox, dem: &TerrainGrid) -> Result<()> {
    let eps = 1e-6 * dem.cellsize;
    if bbox.xmin < dem.xll - eps || bbox.ymin < dem.yll - eps || bbox.xmax > dem.x_max() + eps || bbox.ymax > dem.y_max() + eps {
        return Err(Error::InvalidParameter(format!("bbox {bbox:?} extends beyond the DEM")));
    }
    Ok(())
}

/// Summaries at every cell centre of `bbox` at `time`.
#[allow(clippy::too_many_arguments)]
pub fn predict_grid(
    model: &ModelGraph,
    ctx: &DataContext,
    dem: &TerrainGrid,
    bbox: &BBox,
    resolution: f64,
    time: DateTime<Utc>,
    passes: usize,
    levels: &[f64],
    streams: &Streams,
) -> Result<GridPrediction> {
    check_bbox(bbox, dem)?;
    let layout = GridLayout::new(bbox, resolution)?;
    let (queries, cells) = grid_queries(&layout, dem, time);
    let draws = usize::from(!levels.is_empty());
    let samples = predict_points(model, ctx, dem, &queries, passes, draws, streams, "grid")?;
    let mut out = vec![None; layout.ncols * layout.nrows];
    for (cell, s) in cells.into_iter().zip(&samples) {
        out[cell] = Some(summarize(s, levels)?);
    }
    Ok(GridPrediction { layout, cells: out })
}

/// One coherent draw of the field at `queries`. With `shared_mask` a single
/// dropout mask is used for every point; otherwise each point gets its own.
/// `include_aleatoric` adds independent `Normal(0, sigma^2)` noise per point.
#[allow(clippy::too_many_arguments)]
pub fn sample_realisation<R: Rng + ?Sized>(
    model: &ModelGraph,
    ctx: &DataContext,
    dem: &TerrainGrid,
    queries: &[Query],
    include_aleatoric: bool,
    shared_mask: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let masks: Option<DropoutMasks<f32>> = shared_mask.then(|| model.signal.draw_shared_masks(rng));
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(CHUNK) {
        let batch = query_batch(model, ctx, dem, chunk)?;
        let rec = match &masks {
            Some(m) => model.signal.predict_with_masks(&batch.inputs(), m)?,
            None => model.signal.predict(&batch.inputs(), Mode::McSample, rng)?,
        };
        for (mu, sigma) in signal_heads(&rec) {
            let noise = if include_aleatoric {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            } else {
                0.0
            };
            out.push(mu + noise);
        }
    }
    Ok(out)
}

/// A realisation over a bbox lattice; cells without elevation hold nodata.
#[allow(clippy::too_many_arguments)]
pub fn sample_grid_realisation<R: Rng + ?Sized>(
    model: &ModelGraph,
    ctx: &DataContext,
    dem: &TerrainGrid,
    bbox: &BBox,
    resolution: f64,
    time: DateTime<Utc>,
    include_aleatoric: bool,
    rng: &mut R,
) -> Result<TerrainGrid> {
    check_bbox(bbox, dem)?;
    let layout = GridLayout::new(bbox, resolution)?;
    let (queries, cells) = grid_queries(&layout, dem, time);
    let vals = sample_realisation(model, ctx, dem, &queries, include_aleatoric, true, rng)?;
    let mut out = vec![GRID_NODATA; layout.ncols * layout.nrows];
    for (cell, v) in cells.into_iter().zip(vals) {
        out[cell] = v;
    }
    layout.raster(out, GRID_NODATA)
}
