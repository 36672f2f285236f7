//! Flat `key=value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, `--set
//! KEY=VALUE` flags, then the dedicated `--seed` and `--out` flags. Every
//! key is validated when it is set; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use tempmix::data::{parse_timestamp, FoldRoles};
use tempmix::inference::BBox;
use tempmix::network::NetworkConfig;
use tempmix::synthetic::{FieldConfig, SyntheticWorldConfig};
use tempmix::training::{Likelihood, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    U64,
    Usize,
    F64,
    Bool,
    UsizeList,
    F64List,
    Path,
    Time,
    BBox,
    Likelihood,
}

/// `(key, default, kind, description)`.
const KEYS: &[(&str, &str, Kind, &str)] = &[
    ("seed", "0", Kind::U64, "run seed; every random stream derives from it"),
    ("out", "out", Kind::Path, "output directory"),
    ("observations", "", Kind::Path, "observation CSV (default <out>/observations.csv)"),
    ("dem", "", Kind::Path, "ESRI ASCII DEM (default <out>/dem.asc)"),
    ("checkpoint", "", Kind::Path, "checkpoint path (default <out>/model.ckpt)"),
    ("synth.extent_m", "200000", Kind::F64, "side of the square world, metres"),
    ("synth.dem_cells", "256", Kind::Usize, "DEM cells per side"),
    ("synth.n_sites", "200", Kind::Usize, "number of sensor sites"),
    ("synth.days", "3", Kind::Usize, "length of the observation window, days"),
    ("synth.obs_per_site_per_hour", "1", Kind::Usize, "readings per site per hour"),
    ("synth.contamination_rate", "0.05", Kind::F64, "fraction of faulty sites"),
    ("synth.noise_sd", "0.8", Kind::F64, "clean reading noise, degC"),
    ("synth.start", "2020-10-26T00:00:00Z", Kind::Time, "window start (UTC)"),
    ("synth.lapse_rate_c_per_km", "-6.5", Kind::F64, "field lapse rate"),
    ("synth.diurnal_amplitude_c", "4", Kind::F64, "field diurnal amplitude"),
    ("synth.front_amplitude_c", "-4", Kind::F64, "temperature change behind the front"),
    ("synth.harmonic_amplitude_c", "1", Kind::F64, "amplitude of spatial harmonics"),
    ("net.conv_channels", "16,32,64", Kind::UsizeList, "channels per conv stage"),
    ("net.dense_widths", "128,128,64", Kind::UsizeList, "dense layer widths"),
    ("net.outlier_hidden", "16", Kind::Usize, "outlier branch time-hidden width"),
    ("net.dropout_rate", "0.5", Kind::F64, "dropout rate on hidden layers"),
    ("net.kernel_size", "3", Kind::Usize, "conv kernel size"),
    ("net.patch_size", "32", Kind::Usize, "terrain patch side, samples"),
    ("net.patch_cell_m", "500", Kind::F64, "terrain patch spacing, metres"),
    ("train.epochs", "600", Kind::Usize, "training epochs"),
    ("train.batch_size", "512", Kind::Usize, "mini-batch size"),
    ("train.learning_rate", "0.001", Kind::F64, "Adam learning rate"),
    ("train.clip_norm", "10", Kind::F64, "global gradient-norm clip; 0 disables"),
    ("train.shuffle", "true", Kind::Bool, "reshuffle every epoch"),
    ("train.likelihood", "mixture", Kind::Likelihood, "mixture | gaussian"),
    (
        "train.checkpoint_every",
        "50",
        Kind::Usize,
        "epochs between checkpoints; 0 = final only",
    ),
    ("train.subsample_hourly", "true", Kind::Bool, "keep one reading per site and hour"),
    ("folds.k", "10", Kind::Usize, "number of site folds"),
    ("folds.train", "1,2,3,4,5,6,7,8", Kind::UsizeList, "training folds"),
    ("folds.eval", "9", Kind::Usize, "evaluation (monitoring) fold"),
    ("folds.test", "10", Kind::Usize, "held-out test fold"),
    ("mc.passes", "50", Kind::Usize, "stochastic forward passes"),
    ("mc.draws_per_pass", "20", Kind::Usize, "predictive draws per pass"),
    ("evaluate.fold", "", Kind::Usize, "fold to evaluate (default folds.test)"),
    (
        "evaluate.levels",
        "",
        Kind::F64List,
        "coverage levels (default 0.05..0.95 step 0.05, 0.99)",
    ),
    ("grid.time", "", Kind::Time, "map time (UTC)"),
    ("grid.bbox", "", Kind::BBox, "xmin,ymin,xmax,ymax (default DEM extent)"),
    ("grid.resolution", "1000", Kind::F64, "map cell size, metres"),
    ("grid.quantiles", "0.025,0.5,0.975", Kind::F64List, "quantile maps"),
    ("grid.realisations", "0", Kind::Usize, "coherent field samples to write"),
    ("grid.include_aleatoric", "false", Kind::Bool, "add per-cell noise to realisations"),
];

fn key_entry(key: &str) -> Option<&'static (&'static str, &'static str, Kind, &'static str)> {
    KEYS.iter().find(|(k, ..)| *k == key)
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn check(kind: Kind, v: &str) -> bool {
    if v.is_empty() {
        return true;
    }
    match kind {
        Kind::U64 => v.parse::<u64>().is_ok(),
        Kind::Usize => v.parse::<usize>().is_ok(),
        Kind::F64 => v.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(v, "true" | "false"),
        Kind::UsizeList => parse_list::<usize>(v).is_some(),
        Kind::F64List => parse_list::<f64>(v).is_some_and(|l| l.iter().all(|x| x.is_finite())),
        Kind::Path => !v.contains(['\n', '\r']),
        Kind::Time => parse_timestamp(v).is_some(),
        Kind::BBox => parse_list::<f64>(v).is_some_and(|l| l.len() == 4 && l[0] < l[2] && l[1] < l[3]),
        Kind::Likelihood => Likelihood::parse(v).is_ok(),
    }
}

/// Keys that must never be empty.
const REQUIRED: &[&str] = &[
    "seed",
    "out",
    "synth.extent_m",
    "synth.dem_cells",
    "synth.n_sites",
    "synth.days",
    "synth.obs_per_site_per_hour",
    "synth.contamination_rate",
    "synth.noise_sd",
    "synth.start",
    "net.conv_channels",
    "net.dense_widths",
    "train.epochs",
    "train.batch_size",
    "mc.passes",
    "mc.draws_per_pass",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, d, ..)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped.
pub fn parse_pairs(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `KEY=VALUE` command-line assignment.
pub fn parse_assignment(s: &str) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let (_, _, kind, _) = key_entry(key).ok_or_else(|| CliError::Config(format!("unknown key {key:?}")))?;
        if !check(*kind, value) {
            return Err(CliError::Config(format!("invalid value {value:?} for {key}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> CliResult<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Builds the run configuration from all sources, then validates the
    /// derived component configs.
    pub fn resolve(file: Option<&Path>, sets: &[(String, String)], seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            cfg.apply(&parse_pairs(&text)?)?;
        }
        cfg.apply(sets)?;
        if let Some(s) = seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(o) = out {
            let o = o.to_str().ok_or_else(|| CliError::Config("output path is not UTF-8".into()))?;
            cfg.set("out", o)?;
        }
        // Echo concrete input paths so a resolved config replays from any
        // output directory.
        for (key, default) in [
            ("observations", "observations.csv"),
            ("dem", "dem.asc"),
            ("checkpoint", "model.ckpt"),
        ] {
            if cfg.raw(key).is_empty() {
                let p = cfg.path_or(key, default);
                let p = p
                    .to_str()
                    .ok_or_else(|| CliError::Config("output path is not UTF-8".into()))?
                    .to_string();
                cfg.set(key, &p)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        for k in REQUIRED {
            if self.raw(k).is_empty() {
                return Err(CliError::Config(format!("{k} must not be empty")));
            }
        }
        let cfg_err = |e: tempmix::Error| CliError::Config(e.to_string());
        self.network().validate().map_err(cfg_err)?;
        self.train_config().validate().map_err(cfg_err)?;
        self.world_config().validate().map_err(cfg_err)?;
        let roles = self.fold_roles();
        let k = self.usize("folds.k");
        let all: Vec<u8> = roles.train.iter().copied().chain([roles.eval, roles.test]).collect();
        if !(2..=255).contains(&k) || all.iter().any(|f| *f == 0 || *f as usize > k) {
            return Err(CliError::Config(format!("fold roles {all:?} must lie in 1..={k}")));
        }
        if roles.train.contains(&roles.test) || roles.eval == roles.test {
            return Err(CliError::Config("the test fold must not be a training or evaluation fold".into()));
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Resolved configuration as `key=value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn describe_keys() -> String {
        KEYS.iter().map(|(k, d, _, h)| format!("{k:<30} {d:<22} {h}\n")).collect()
    }

    fn usize(&self, k: &str) -> usize {
        self.raw(k).parse().expect("validated")
    }

    fn opt_usize(&self, k: &str) -> Option<usize> {
        let v = self.raw(k);
        (!v.is_empty()).then(|| v.parse().expect("validated"))
    }

    fn f64(&self, k: &str) -> f64 {
        self.raw(k).parse().expect("validated")
    }

    fn bool(&self, k: &str) -> bool {
        self.raw(k) == "true"
    }

    fn usize_list(&self, k: &str) -> Vec<usize> {
        parse_list(self.raw(k)).expect("validated")
    }

    fn f64_list(&self, k: &str) -> Option<Vec<f64>> {
        let v = self.raw(k);
        (!v.is_empty()).then(|| parse_list(v).expect("validated"))
    }

    pub fn seed(&self) -> u64 {
        self.raw("seed").parse().expect("validated")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    fn path_or(&self, key: &str, default: &str) -> PathBuf {
        match self.raw(key) {
            "" => self.out_dir().join(default),
            p => PathBuf::from(p),
        }
    }

    pub fn observations_path(&self) -> PathBuf {
        self.path_or("observations", "observations.csv")
    }

    pub fn dem_path(&self) -> PathBuf {
        self.path_or("dem", "dem.asc")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path_or("checkpoint", "model.ckpt")
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            conv_channels: self.usize_list("net.conv_channels"),
            dense_widths: self.usize_list("net.dense_widths"),
            outlier_hidden: self.usize("net.outlier_hidden"),
            dropout_rate: self.f64("net.dropout_rate"),
            kernel_size: self.usize("net.kernel_size"),
            patch_size: self.usize("net.patch_size"),
            patch_cell_m: self.f64("net.patch_cell_m"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let clip = self.f64("train.clip_norm");
        TrainConfig {
            epochs: self.usize("train.epochs"),
            batch_size: self.usize("train.batch_size"),
            seed: self.seed(),
            shuffle: self.bool("train.shuffle"),
            learning_rate: self.f64("train.learning_rate"),
            clip_norm: (clip > 0.0).then_some(clip),
            likelihood: Likelihood::parse(self.raw("train.likelihood")).expect("validated"),
        }
    }

    pub fn checkpoint_every(&self) -> usize {
        self.usize("train.checkpoint_every")
    }

    pub fn subsample_hourly(&self) -> bool {
        self.bool("train.subsample_hourly")
    }

    pub fn world_config(&self) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            extent_m: self.f64("synth.extent_m"),
            dem_cells: self.usize("synth.dem_cells"),
            n_sites: self.usize("synth.n_sites"),
            days: self.usize("synth.days"),
            obs_per_site_per_hour: self.usize("synth.obs_per_site_per_hour"),
            contamination_rate: self.f64("synth.contamination_rate"),
            noise_sd: self.f64("synth.noise_sd"),
            seed: self.seed(),
            start: parse_timestamp(self.raw("synth.start")).expect("validated"),
            field: FieldConfig {
                lapse_rate_c_per_km: self.f64("synth.lapse_rate_c_per_km"),
                diurnal_amplitude_c: self.f64("synth.diurnal_amplitude_c"),
                front_amplitude_c: self.f64("synth.front_amplitude_c"),
                harmonic_amplitude_c: self.f64("synth.harmonic_amplitude_c"),
                ..FieldConfig::default()
            },
        }
    }

    pub fn fold_count(&self) -> usize {
        self.usize("folds.k")
    }

    pub fn fold_roles(&self) -> FoldRoles {
        let to_u8 = |v: usize| u8::try_from(v).unwrap_or(0);
        FoldRoles {
            train: self.usize_list("folds.train").into_iter().map(to_u8).collect(),
            eval: to_u8(self.usize("folds.eval")),
            test: to_u8(self.usize("folds.test")),
        }
    }

    pub fn mc_passes(&self) -> usize {
        self.usize("mc.passes")
    }

    pub fn draws_per_pass(&self) -> usize {
        self.usize("mc.draws_per_pass")
    }

    pub fn evaluate_fold(&self) -> Option<usize> {
        self.opt_usize("evaluate.fold")
    }

    pub fn evaluate_levels(&self) -> Option<Vec<f64>> {
        self.f64_list("evaluate.levels")
    }

    pub fn grid_time(&self) -> Option<DateTime<Utc>> {
        parse_timestamp(self.raw("grid.time"))
    }

    pub fn grid_bbox(&self) -> Option<BBox> {
        self.f64_list("grid.bbox").map(|v| BBox {
            xmin: v[0],
            ymin: v[1],
            xmax: v[2],
            ymax: v[3],
        })
    }

    pub fn grid_resolution(&self) -> f64 {
        self.f64("grid.resolution")
    }

    pub fn grid_quantiles(&self) -> Vec<f64> {
        self.f64_list("grid.quantiles").unwrap_or_default()
    }

    pub fn grid_realisations(&self) -> usize {
        self.usize("grid.realisations")
    }

    pub fn grid_include_aleatoric(&self) -> bool {
        self.bool("grid.include_aleatoric")
    }

    /// Writes `resolved_config.txt` into the output directory.
    pub fn write_resolved(&self) -> CliResult<PathBuf> {
        let dir = self.out_dir();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join("resolved_config.txt");
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
