//! Synthetic world with known ground truth: a DEM of smooth sinusoidal hills,
//! a closed-form temperature field over space, terrain and time, sensor
//! sites, and planted faulty sensors.

use std::f64::consts::PI;
use std::io::Write;

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::{format_timestamp, Observation, ObservationTable, TerrainGrid};
use crate::error::{Error, Result};
use crate::mixture::OutlierComponent;
use crate::rng::Streams;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    /// Side of the square domain, metres.
    pub extent_m: f64,
    pub dem_cells: usize,
    pub n_sites: usize,
    pub days: usize,
    pub obs_per_site_per_hour: usize,
    pub contamination_rate: f64,
    /// °C
    pub noise_sd: f64,
    pub seed: u64,
    /// UTC start of the observation window.
    pub start: DateTime<Utc>,
    pub field: FieldConfig,
}

/// Fixed parts of the temperature field; hills and spatial harmonics are
/// drawn from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub base_c: f64,
    pub lapse_rate_c_per_km: f64,
    pub diurnal_amplitude_c: f64,
    /// Local minute of the diurnal maximum.
    pub diurnal_peak_minute: f64,
    pub harmonic_amplitude_c: f64,
    pub n_harmonics: usize,
    /// Temperature change behind the front, °C.
    pub front_amplitude_c: f64,
    pub front_speed_m_per_min: f64,
    pub front_width_m: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            base_c: 10.0,
            lapse_rate_c_per_km: -6.5,
            diurnal_amplitude_c: 4.0,
            diurnal_peak_minute: 900.0,
            harmonic_amplitude_c: 1.0,
            n_harmonics: 3,
            front_amplitude_c: -4.0,
            // ~50 km/h
            front_speed_m_per_min: 833.0,
            front_width_m: 20_000.0,
        }
    }
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            extent_m: 200_000.0,
            dem_cells: 256,
            n_sites: 200,
            days: 3,
            obs_per_site_per_hour: 1,
            contamination_rate: 0.05,
            noise_sd: 0.8,
            seed: 0,
            start: DateTime::from_timestamp(1_603_670_400, 0).expect("2020-10-26"),
            field: FieldConfig::default(),
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.extent_m > 0.0 && self.extent_m.is_finite()) {
            return bad(format!("extent_m {}", self.extent_m));
        }
        if self.dem_cells < 2 || self.n_sites == 0 || self.days == 0 || self.obs_per_site_per_hour == 0 {
            return bad("dem_cells >= 2 and n_sites, days, obs_per_site_per_hour >= 1 required".into());
        }
        if self.obs_per_site_per_hour > 60 {
            return bad("at most 60 observations per site per hour".into());
        }
        if !(0.0..1.0).contains(&self.contamination_rate) {
            return bad(format!("contamination_rate {} not in [0, 1)", self.contamination_rate));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd {}", self.noise_sd));
        }
        if !(self.field.front_width_m > 0.0) {
            return bad(format!("front_width_m {}", self.field.front_width_m));
        }
        Ok(())
    }

    pub fn n_faulty(&self) -> usize {
        (self.contamination_rate * self.n_sites as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    kx: f64,
    ky: f64,
    amplitude: f64,
    phase: f64,
}

impl Wave {
    fn eval(&self, x: f64, y: f64, extent: f64) -> f64 {
        self.amplitude * (2.0 * PI * (self.kx * x + self.ky * y) / extent + self.phase).sin()
    }
}

/// Closed-form temperature field `T(x, y, elevation, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthField {
    pub config: FieldConfig,
    pub extent_m: f64,
    pub start: DateTime<Utc>,
    harmonics: Vec<Wave>,
    /// Unit vector of front motion.
    front_dir: (f64, f64),
    /// Front position along `front_dir` at the window start, metres.
    front_offset_m: f64,
}

impl GroundTruthField {
    fn minutes(&self, t: &DateTime<Utc>) -> f64 {
        (*t - self.start).num_milliseconds() as f64 / 60_000.0
    }

    /// Temperature at a point of known elevation.
    pub fn value(&self, x: f64, y: f64, elevation_m: f64, t: &DateTime<Utc>) -> f64 {
        let c = &self.config;
        let minutes = self.minutes(t);
        let minute_of_day = (t.timestamp().rem_euclid(86_400) as f64) / 60.0 + (t.timestamp_subsec_millis() as f64) / 60_000.0;
        let diurnal_phase = PI / 2.0 - 2.0 * PI * c.diurnal_peak_minute / 1440.0;
        let diurnal = c.diurnal_amplitude_c * (2.0 * PI * minute_of_day / 1440.0 + diurnal_phase).sin();
        let spatial: f64 = self.harmonics.iter().map(|w| w.eval(x, y, self.extent_m)).sum();
        let along = x * self.front_dir.0 + y * self.front_dir.1;
        let front_pos = self.front_offset_m + c.front_speed_m_per_min * minutes;
        let front = c.front_amplitude_c * 0.5 * (1.0 + ((front_pos - along) / c.front_width_m).tanh());
        c.base_c + c.lapse_rate_c_per_km * elevation_m / 1000.0 + diurnal + spatial + front
    }

    /// Temperature at a point, elevation sampled from `dem`.
    pub fn at(&self, dem: &TerrainGrid, x: f64, y: f64, t: &DateTime<Utc>) -> Result<f64> {
        Ok(self.value(x, y, dem.bilinear_sample(x, y)?, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub dem: TerrainGrid,
    pub field: GroundTruthField,
}

/// DEM of low-frequency hills and the matching field, deterministic in the
/// seed.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let mut rng = streams.derive("dem", &[]);
    let hills: Vec<Wave> = (0..6)
        .map(|_| Wave {
            kx: rng.random_range(-2.5..2.5),
            ky: rng.random_range(-2.5..2.5),
            amplitude: rng.random_range(60.0..180.0),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let n = cfg.dem_cells;
    let cell = cfg.extent_m / n as f64;
    let mut values = Vec::with_capacity(n * n);
    for row in 0..n {
        let y = cfg.extent_m - (row as f64 + 0.5) * cell;
        for col in 0..n {
            let x = (col as f64 + 0.5) * cell;
            let h: f64 = hills.iter().map(|w| w.eval(x, y, cfg.extent_m)).sum();
            values.push((350.0 + h).max(0.0));
        }
    }
    let dem = TerrainGrid::new(n, n, 0.0, 0.0, cell, -9999.0, values)?;

    let mut rng = streams.derive("field", &[]);
    let amp = cfg.field.harmonic_amplitude_c;
    let harmonics = (0..cfg.field.n_harmonics)
        .map(|_| Wave {
            kx: rng.random_range(-2.0..2.0),
            ky: rng.random_range(-2.0..2.0),
            amplitude: amp * rng.random_range(0.5..1.0),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let angle: f64 = rng.random_range(0.0..2.0 * PI);
    let front_dir = (angle.cos(), angle.sin());
    // Place the front so it crosses the domain centre mid-window.
    let centre = 0.5 * cfg.extent_m * (front_dir.0 + front_dir.1);
    let half_window_min = cfg.days as f64 * 720.0;
    let front_offset_m = centre - cfg.field.front_speed_m_per_min * half_window_min;
    Ok(SyntheticWorld {
        dem,
        field: GroundTruthField {
            config: cfg.field.clone(),
            extent_m: cfg.extent_m,
            start: cfg.start,
            harmonics,
            front_dir,
            front_offset_m,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultMode {
    Clean,
    /// One offset shared by every reading of the site.
    ConstantBias,
    /// A fresh offset per reading.
    NoisyReadings,
}

impl FaultMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultMode::Clean => "clean",
            FaultMode::ConstantBias => "constant_bias",
            FaultMode::NoisyReadings => "noisy_readings",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteTruth {
    pub site_id: String,
    pub easting: f64,
    pub northing: f64,
    pub mode: FaultMode,
    /// Set for constant-bias sites.
    pub bias: Option<f64>,
}

/// Observations plus what generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObservations {
    pub table: ObservationTable,
    /// Noise-free field value for every row of `table`.
    pub truth: Vec<f64>,
    pub sites: Vec<SiteTruth>,
}

/// Readings for every site at `obs_per_site_per_hour` random minutes of
/// every hour of the window.
pub fn generate_observations(world: &SyntheticWorld, cfg: &SyntheticWorldConfig) -> Result<SyntheticObservations> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let mut rng = streams.derive("sites", &[]);
    let width = (cfg.n_sites.max(1) as f64).log10().floor() as usize + 1;
    let positions: Vec<(f64, f64)> = (0..cfg.n_sites)
        .map(|_| (rng.random_range(0.0..cfg.extent_m), rng.random_range(0.0..cfg.extent_m)))
        .collect();

    let mut rng = streams.derive("faults", &[]);
    let mut order: Vec<usize> = (0..cfg.n_sites).collect();
    order.shuffle(&mut rng);
    let mut modes = vec![FaultMode::Clean; cfg.n_sites];
    let offset =
        Uniform::new_inclusive(-OutlierComponent::STANDARD.half_width, OutlierComponent::STANDARD.half_width).expect("finite bounds");
    let mut biases = vec![None; cfg.n_sites];
    for &s in order.iter().take(cfg.n_faulty()) {
        if rng.random_bool(0.5) {
            modes[s] = FaultMode::ConstantBias;
            biases[s] = Some(offset.sample(&mut rng));
        } else {
            modes[s] = FaultMode::NoisyReadings;
        }
    }

    let sites: Vec<SiteTruth> = (0..cfg.n_sites)
        .map(|s| SiteTruth {
            site_id: format!("S{:0width$}", s + 1),
            easting: positions[s].0,
            northing: positions[s].1,
            mode: modes[s],
            bias: biases[s],
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let hours = cfg.days * 24;
    let k = cfg.obs_per_site_per_hour;
    let slot_s = 3600 / k as i64;
    let mut rows = Vec::with_capacity(cfg.n_sites * hours * k);
    let mut truth = Vec::with_capacity(rows.capacity());
    for (s, site) in sites.iter().enumerate() {
        let elevation = world.dem.bilinear_sample(site.easting, site.northing)?;
        let mut rng = streams.derive("readings", &[s as u64]);
        for h in 0..hours {
            for j in 0..k {
                let secs = h as i64 * 3600 + j as i64 * slot_s + rng.random_range(0..slot_s);
                let timestamp = cfg.start + Duration::seconds(secs);
                let value = world.field.value(site.easting, site.northing, elevation, &timestamp);
                let temp_c = match site.mode {
                    FaultMode::Clean => value + noise.sample(&mut rng),
                    FaultMode::ConstantBias => value + site.bias.expect("bias"),
                    FaultMode::NoisyReadings => value + offset.sample(&mut rng),
                };
                rows.push(Observation {
                    site_id: site.site_id.clone(),
                    timestamp,
                    easting: site.easting,
                    northing: site.northing,
                    temp_c,
                    fold: None,
                    outlier_label: Some(site.mode != FaultMode::Clean),
                });
                truth.push(value);
            }
        }
    }
    Ok(SyntheticObservations {
        table: ObservationTable::new(rows),
        truth,
        sites,
    })
}

/// `site_id,timestamp,true_temp_c` per row.
pub fn write_truth<W: Write>(obs: &SyntheticObservations, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["site_id", "timestamp", "true_temp_c"])?;
    for (o, t) in obs.table.rows.iter().zip(&obs.truth) {
        out.write_record([o.site_id.clone(), format_timestamp(&o.timestamp), t.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("truth", e))
}

/// `site_id,easting_m,northing_m,fault_mode,bias_c` per site.
pub fn write_sites<W: Write>(obs: &SyntheticObservations, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["site_id", "easting_m", "northing_m", "fault_mode", "bias_c"])?;
    for s in &obs.sites {
        out.write_record([
            s.site_id.clone(),
            s.easting.to_string(),
            s.northing.to_string(),
            s.mode.as_str().to_string(),
            s.bias.map_or(String::new(), |b| b.to_string()),
        ])?;
    }
    out.flush().map_err(|e| Error::io("sites", e))
}
