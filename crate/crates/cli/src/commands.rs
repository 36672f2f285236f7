//! The five pipeline commands. Each reads its inputs from the resolved
//! configuration, writes its products into the output directory together
//! with `resolved_config.txt`, and returns a small summary for callers.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use tempmix::checkpoint::Checkpoint;
use tempmix::data::{
    fold_map, format_timestamp, load_observations, read_ascii_grid, split_folds_by_site, subsample_hourly, write_ascii_grid,
    write_observations, ObservationTable, TerrainGrid,
};
use tempmix::evaluation::{average_by, default_levels, outlier_auc, CalibrationReport, MIN_INTERVAL_SAMPLES};
use tempmix::inference::{predict_grid, sample_grid_realisation, summarize, BBox, PredictiveSamples, Query};
use tempmix::mixture::outlier_responsibility;
use tempmix::network::theta_link;
use tempmix::synthetic::{generate_observations, generate_world, write_sites, write_truth};
use tempmix::training::{initialize_model, predict_deterministic, train as fit, DataContext, PreparedSet, TrainState, METRICS_HEADER};
use tempmix::{Error, MixtureParams, ModelGraph, Streams};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Keys that must agree between a checkpoint and a resumed run.
fn resume_relevant(key: &str) -> bool {
    key == "seed"
        || key.starts_with("net.")
        || key.starts_with("folds.")
        || (key.starts_with("train.") && key != "train.epochs" && key != "train.checkpoint_every")
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_grid(path: &Path, grid: &TerrainGrid) -> CliResult<()> {
    let mut w = create(path)?;
    write_ascii_grid(grid, &mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes to a sibling temporary file first so an interrupted save never
/// leaves a truncated checkpoint behind.
fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn load_dem(cfg: &RunConfig) -> CliResult<TerrainGrid> {
    Ok(read_ascii_grid(cfg.dem_path())?)
}

fn load_table(path: &Path) -> CliResult<ObservationTable> {
    let (table, report) = load_observations(path)?;
    if report.rejected_count() > 0 {
        eprintln!("warning: {}: skipped {} malformed rows", path.display(), report.rejected_count());
        for (line, msg) in report.rejected.iter().take(5) {
            eprintln!("  line {line}: {msg}");
        }
    }
    if table.is_empty() {
        return Err(Error::Schema(format!("{}: no usable observations", path.display())).into());
    }
    Ok(table)
}

/// Fold labels come from the data when every row has one, otherwise from
/// `known` (a checkpoint's site map; rows of other sites are dropped), or
/// from a fresh site-wise split.
fn assign_folds(
    cfg: &RunConfig,
    table: ObservationTable,
    known: Option<&BTreeMap<String, u8>>,
    streams: &Streams,
) -> CliResult<ObservationTable> {
    let labelled = table.rows.iter().filter(|r| r.fold.is_some()).count();
    if labelled == table.len() {
        fold_map(&table)?;
        return Ok(table);
    }
    if labelled > 0 {
        return Err(Error::Folds(format!("{labelled} of {} rows carry a fold label; need all or none", table.len())).into());
    }
    match known {
        Some(map) => {
            let mut rows = Vec::with_capacity(table.len());
            let mut unknown = BTreeSet::new();
            for mut r in table.rows {
                match map.get(&r.site_id) {
                    Some(f) => {
                        r.fold = Some(*f);
                        rows.push(r);
                    }
                    None => {
                        unknown.insert(r.site_id);
                    }
                }
            }
            if !unknown.is_empty() {
                eprintln!("warning: {} sites have no fold in the checkpoint and were ignored", unknown.len());
            }
            Ok(ObservationTable::new(rows))
        }
        None => Ok(split_folds_by_site(&table, cfg.fold_count(), &mut streams.derive("split", &[]))?),
    }
}

fn prepare_table(cfg: &RunConfig, table: ObservationTable, known: Option<&BTreeMap<String, u8>>) -> CliResult<ObservationTable> {
    let streams = Streams::new(cfg.seed());
    let table = assign_folds(cfg, table, known, &streams)?;
    Ok(if cfg.subsample_hourly() {
        subsample_hourly(&table, &mut streams.derive("subsample", &[]))
    } else {
        table
    })
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> CliResult<(PathBuf, Checkpoint)> {
    let path = path.map_or_else(|| cfg.checkpoint_path(), Path::to_path_buf);
    let ck = Checkpoint::load(&path)?;
    Ok((path, ck))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub n_observations: usize,
    pub n_sites: usize,
    pub n_faulty: usize,
    pub files: Vec<PathBuf>,
}

/// Writes `dem.asc`, `observations.csv`, `truth.csv` and `sites.csv`.
pub fn synth(cfg: &RunConfig) -> CliResult<SynthSummary> {
    let wc = cfg.world_config();
    let world = generate_world(&wc)?;
    let obs = generate_observations(&world, &wc)?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let files: Vec<PathBuf> = ["dem.asc", "observations.csv", "truth.csv", "sites.csv"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_grid(&files[0], &world.dem)?;
    for (i, path) in files.iter().enumerate().skip(1) {
        let mut w = create(path)?;
        match i {
            1 => write_observations(&obs.table, &mut w)?,
            2 => write_truth(&obs, &mut w)?,
            _ => write_sites(&obs, &mut w)?,
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    cfg.write_resolved()?;
    Ok(SynthSummary {
        n_observations: obs.table.len(),
        n_sites: obs.sites.len(),
        n_faulty: wc.n_faulty(),
        files,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs_done: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub final_train_nll: Option<f64>,
    pub final_eval_nll: Option<f64>,
}

fn metrics_text(state: &TrainState) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in &state.history {
        s.push_str(&m.log_line());
        s.push('\n');
    }
    s
}

/// Splits, caches patches, trains, and writes `metrics.log` plus the
/// checkpoint. With `resume` the run continues from the checkpoint's state.
pub fn train(cfg: &RunConfig, resume: bool) -> CliResult<TrainSummary> {
    let dem = load_dem(cfg)?;
    let raw = load_table(&cfg.observations_path())?;
    let ckpt_path = cfg.checkpoint_path();
    let tc = cfg.train_config();

    let previous = if resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        let echo: BTreeMap<_, _> = ck.config_echo.iter().cloned().collect();
        for (k, v) in cfg.entries().into_iter().filter(|(k, _)| resume_relevant(k)) {
            if echo.get(&k) != Some(&v) {
                return Err(CliError::Config(format!(
                    "cannot resume: {k} is {v:?} here but {:?} in the checkpoint",
                    echo.get(&k).map_or("<absent>", String::as_str)
                )));
            }
        }
        if ck.state.is_none() {
            return Err(Error::Checkpoint("no optimizer state to resume from".into()).into());
        }
        Some(ck)
    } else {
        None
    };

    let table = prepare_table(cfg, raw, previous.as_ref().map(|c| &c.folds))?;
    let roles = cfg.fold_roles();
    let train_t = table.in_folds(&roles.train);
    let eval_t = table.in_folds(&[roles.eval]);
    if train_t.is_empty() {
        return Err(Error::Folds(format!("training folds {:?} hold no observations", roles.train)).into());
    }
    let folds = fold_map(&table)?;

    let (mut model, ctx, mut state) = match previous {
        Some(ck) => (ck.model, ck.context, ck.state.expect("checked above")),
        None => {
            let ctx = DataContext::from_training(&train_t)?;
            let streams = Streams::new(cfg.seed());
            let model = initialize_model(&cfg.network(), &ctx, &train_t, &dem, &mut streams.derive("init", &[]))?;
            let state = TrainState::new(&model, &tc);
            (model, ctx, state)
        }
    };

    let train_set = PreparedSet::new(&model, &ctx, &train_t, &dem)?;
    let eval_set = PreparedSet::new(&model, &ctx, &eval_t, &dem)?;
    eprintln!(
        "training on {} readings ({} locations), monitoring {} readings; {} parameters",
        train_set.len(),
        train_set.distinct_patches(),
        eval_set.len(),
        model.param_count()
    );

    let dir = cfg.out_dir();
    create_dir(&dir)?;
    cfg.write_resolved()?;
    let metrics_path = dir.join("metrics.log");
    let echo = cfg.entries();
    let snapshot = |model: &ModelGraph, state: &TrainState| Checkpoint {
        model: model.clone(),
        context: ctx.clone(),
        folds: folds.clone(),
        state: Some(state.clone()),
        config_echo: echo.clone(),
    };
    let every = cfg.checkpoint_every();
    let result = fit(
        &mut model,
        &mut state,
        &train_set,
        (!eval_set.is_empty()).then_some(&eval_set),
        &tc,
        |model, state| {
            let m = state.history.last().expect("epoch recorded");
            eprintln!("{}", m.log_line());
            write_text(&metrics_path, &metrics_text(state)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            if every > 0 && m.epoch % every == 0 && m.epoch < tc.epochs {
                save_checkpoint(&ckpt_path, &snapshot(model, state)).map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
            Ok(())
        },
    );
    // On abort the model and state hold the last good epoch; keep it.
    save_checkpoint(&ckpt_path, &snapshot(&model, &state))?;
    write_text(&metrics_path, &metrics_text(&state))?;
    result?;

    let last = state.history.last();
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        epochs_done: state.epochs_done,
        n_train: train_set.len(),
        n_eval: eval_set.len(),
        final_train_nll: last.map(|m| m.train_nll),
        final_eval_nll: last.and_then(|m| m.eval_nll),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub fold: usize,
    pub report: CalibrationReport,
    /// The same scores restricted to readings labelled clean, when labels exist.
    pub clean: Option<CalibrationReport>,
}

fn queries_of(table: &ObservationTable) -> Vec<Query> {
    table
        .rows
        .iter()
        .map(|r| Query {
            easting: r.easting,
            northing: r.northing,
            time: r.timestamp,
        })
        .collect()
}

fn predictive_samples(cfg: &RunConfig, ck: &Checkpoint, dem: &TerrainGrid, table: &ObservationTable) -> CliResult<Vec<PredictiveSamples>> {
    let streams = Streams::new(cfg.seed());
    Ok(tempmix::inference::predict_points(
        &ck.model,
        &ck.context,
        dem,
        &queries_of(table),
        cfg.mc_passes(),
        cfg.draws_per_pass(),
        &streams,
        "evaluate",
    )?)
}

/// Scores the model on one fold and writes `report.txt`, `coverage.csv`,
/// `qq.csv`, `predictions.csv` (and `clean_*` variants when the data carry
/// outlier labels). Only the signal branch is consulted.
pub fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, fold: Option<usize>) -> CliResult<EvaluateSummary> {
    let passes = cfg.mc_passes();
    let draws = cfg.draws_per_pass();
    if passes < 2 {
        return Err(CliError::Config(format!("interval metrics need mc.passes >= 2, got {passes}")));
    }
    if passes * draws < MIN_INTERVAL_SAMPLES {
        return Err(CliError::Config(format!(
            "interval metrics need mc.passes * mc.draws_per_pass >= {MIN_INTERVAL_SAMPLES}, got {}",
            passes * draws
        )));
    }
    let (ckpt_path, ck) = load_checkpoint(cfg, checkpoint)?;
    let dem = load_dem(cfg)?;
    let table = prepare_table(cfg, load_table(&cfg.observations_path())?, Some(&ck.folds))?;
    let fold = fold.or(cfg.evaluate_fold()).unwrap_or(cfg.fold_roles().test as usize);
    let rows = u8::try_from(fold).map(|f| table.in_folds(&[f])).unwrap_or_default();
    if rows.is_empty() {
        return Err(Error::Folds(format!("fold {fold} has no observations")).into());
    }

    let samples = predictive_samples(cfg, &ck, &dem, &rows)?;
    let obs: Vec<f64> = rows.rows.iter().map(|r| r.temp_c).collect();
    let levels = cfg.evaluate_levels().unwrap_or_else(default_levels);
    let streams = Streams::new(cfg.seed());
    let report = CalibrationReport::compute(&samples, &obs, &levels, cfg.seed(), &mut streams.derive("pit", &[0]))?;

    let labels: Option<Vec<bool>> = rows.rows.iter().map(|r| r.outlier_label).collect();
    let clean = match &labels {
        Some(l) if l.iter().any(|x| !x) => {
            let keep: Vec<usize> = (0..l.len()).filter(|&i| !l[i]).collect();
            let s: Vec<PredictiveSamples> = keep.iter().map(|&i| samples[i].clone()).collect();
            let o: Vec<f64> = keep.iter().map(|&i| obs[i]).collect();
            Some(CalibrationReport::compute(
                &s,
                &o,
                &levels,
                cfg.seed(),
                &mut streams.derive("pit", &[1]),
            )?)
        }
        _ => None,
    };

    let dir = cfg.out_dir();
    create_dir(&dir)?;
    cfg.write_resolved()?;
    let mut text = format!(
        "checkpoint={}\nfold={fold}\npasses={passes}\ndraws_per_pass={draws}\n",
        ckpt_path.display()
    );
    for (k, v) in report
        .key_values("")
        .into_iter()
        .chain(clean.iter().flat_map(|c| c.key_values("clean_")))
    {
        text.push_str(&format!("{k}={v}\n"));
    }
    write_text(&dir.join("report.txt"), &text)?;
    write_text(&dir.join("coverage.csv"), &report.coverage_csv())?;
    write_text(&dir.join("qq.csv"), &report.qq_csv())?;
    if let Some(c) = &clean {
        write_text(&dir.join("clean_coverage.csv"), &c.coverage_csv())?;
        write_text(&dir.join("clean_qq.csv"), &c.qq_csv())?;
    }

    let mut w = csv::Writer::from_writer(create(&dir.join("predictions.csv"))?);
    let mut header = vec!["site_id", "timestamp", "easting_m", "northing_m", "temp_c"];
    if labels.is_some() {
        header.push("outlier_label");
    }
    header.extend(["pred_mean", "aleatoric_sd", "epistemic_sd", "total_sd", "q0025", "q0975", "pit"]);
    w.write_record(&header)?;
    for (i, (r, s)) in rows.rows.iter().zip(&samples).enumerate() {
        let u = summarize(s, &[0.025, 0.975])?;
        let mut rec = vec![
            r.site_id.clone(),
            format_timestamp(&r.timestamp),
            r.easting.to_string(),
            r.northing.to_string(),
            r.temp_c.to_string(),
        ];
        if let Some(l) = r.outlier_label {
            rec.push(u8::from(l).to_string());
        }
        rec.extend(
            [
                u.mean,
                u.aleatoric_sd,
                u.epistemic_sd,
                u.total_sd,
                u.quantiles[0].1,
                u.quantiles[1].1,
                report.pit_values[i],
            ]
            .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(dir.join("predictions.csv"), e))?;

    Ok(EvaluateSummary { fold, report, clean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub time: DateTime<Utc>,
    pub in_window: bool,
    pub files: Vec<PathBuf>,
}

/// Writes `grid_<product>.asc` for mean, the three standard deviations and
/// each quantile, `realisation_<k>.asc` for coherent field draws, and
/// `grid_metadata.txt`.
pub fn grid(cfg: &RunConfig, checkpoint: Option<&Path>, time: Option<DateTime<Utc>>) -> CliResult<GridSummary> {
    let time = time
        .or(cfg.grid_time())
        .ok_or_else(|| CliError::Usage("grid needs --time or grid.time".into()))?;
    let (_, ck) = load_checkpoint(cfg, checkpoint)?;
    let dem = load_dem(cfg)?;
    let bbox = cfg.grid_bbox().unwrap_or(BBox {
        xmin: dem.xll,
        ymin: dem.yll,
        xmax: dem.x_max(),
        ymax: dem.y_max(),
    });
    let resolution = cfg.grid_resolution();
    let in_window = ck.context.in_window(&time);
    if !in_window {
        eprintln!(
            "warning: {} lies outside the training window; values are extrapolated",
            format_timestamp(&time)
        );
    }
    let streams = Streams::new(cfg.seed());
    let quantiles = cfg.grid_quantiles();
    let pred = predict_grid(
        &ck.model,
        &ck.context,
        &dem,
        &bbox,
        resolution,
        time,
        cfg.mc_passes(),
        &quantiles,
        &streams,
    )?;

    let dir = cfg.out_dir();
    create_dir(&dir)?;
    cfg.write_resolved()?;
    let mut files = Vec::new();
    for (name, raster) in pred.rasters()? {
        let path = dir.join(format!("grid_{name}.asc"));
        write_grid(&path, &raster)?;
        files.push(path);
    }
    let k = cfg.grid_realisations();
    for i in 1..=k {
        let mut rng = streams.derive("realisation", &[i as u64]);
        let field = sample_grid_realisation(
            &ck.model,
            &ck.context,
            &dem,
            &bbox,
            resolution,
            time,
            cfg.grid_include_aleatoric(),
            &mut rng,
        )?;
        let path = dir.join(format!("realisation_{i:03}.asc"));
        write_grid(&path, &field)?;
        files.push(path);
    }
    let (start, end) = ck.context.window;
    let mut meta = format!(
        "time={}\nbbox={},{},{},{}\nresolution={resolution}\nncols={}\nnrows={}\npasses={}\nquantiles={}\nrealisations={k}\ninclude_aleatoric={}\ntraining_window={},{}\nin_window={in_window}\n",
        format_timestamp(&time),
        bbox.xmin,
        bbox.ymin,
        bbox.xmax,
        bbox.ymax,
        pred.layout.ncols,
        pred.layout.nrows,
        cfg.mc_passes(),
        quantiles.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        cfg.grid_include_aleatoric(),
        format_timestamp(&start),
        format_timestamp(&end),
    );
    if !in_window {
        meta.push_str("warning=time outside training window\n");
    }
    let meta_path = dir.join("grid_metadata.txt");
    write_text(&meta_path, &meta)?;
    files.push(meta_path);
    Ok(GridSummary { time, in_window, files })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectSummary {
    pub n_scored: usize,
    pub n_skipped: usize,
    pub sites_scored: usize,
    pub skipped_sites: Vec<String>,
    /// Site-averaged responsibility AUC against labels, when present.
    pub site_auc: Option<f64>,
    pub observation_auc: Option<f64>,
}

fn auc_if_labelled(scores: &[f64], labels: &[Option<bool>]) -> CliResult<Option<f64>> {
    let Some(l) = labels.iter().copied().collect::<Option<Vec<bool>>>() else {
        return Ok(None);
    };
    if l.iter().all(|x| *x) || l.iter().all(|x| !x) {
        return Ok(None);
    }
    Ok(Some(outlier_auc(scores, &l)?))
}

/// Outlier responsibilities for every reading from a training site, written
/// to `responsibilities.csv`, with site averages in
/// `site_responsibility.csv`, unknown sites in `skipped_sites.csv` and
/// counts in `outliers_summary.txt`.
pub fn detect_outliers(cfg: &RunConfig, checkpoint: Option<&Path>, dataset: Option<&Path>) -> CliResult<DetectSummary> {
    let (_, ck) = load_checkpoint(cfg, checkpoint)?;
    let dem = load_dem(cfg)?;
    let table = load_table(&dataset.map_or_else(|| cfg.observations_path(), Path::to_path_buf))?;
    let (model, ctx) = (&ck.model, &ck.context);

    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for r in table.rows {
        if ctx.sites.index_of(&r.site_id).is_some() {
            rows.push(r);
        } else {
            *skipped.entry(r.site_id).or_default() += 1;
        }
    }
    let known = ObservationTable::new(rows);
    if known.is_empty() {
        return Err(Error::Schema("no readings from sites the model was trained on".into()).into());
    }
    let set = PreparedSet::new(model, ctx, &known, &dem)?;
    let signal = predict_deterministic(model, &set)?;
    let all: Vec<usize> = (0..set.len()).collect();
    let mut logits = Vec::with_capacity(set.len());
    for idx in all.chunks(1024) {
        logits.extend(model.theta_logits(&set.outlier_batch(model, idx)?)?);
    }

    let mut theta = Vec::with_capacity(set.len());
    let mut resp = Vec::with_capacity(set.len());
    for ((y, (mu, sigma)), a) in set.y.iter().zip(&signal).zip(&logits) {
        let t = theta_link(*a);
        theta.push(t);
        resp.push(outlier_responsibility(*y, &MixtureParams::new(*mu, *sigma, t)?)?);
    }

    let dir = cfg.out_dir();
    create_dir(&dir)?;
    cfg.write_resolved()?;
    let labels: Vec<Option<bool>> = known.rows.iter().map(|r| r.outlier_label).collect();
    let has_labels = labels.iter().all(Option::is_some);

    let path = dir.join("responsibilities.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["site_id", "timestamp", "temp_c", "mu", "sigma", "theta", "responsibility"];
    if has_labels {
        header.push("outlier_label");
    }
    w.write_record(&header)?;
    for (i, r) in known.rows.iter().enumerate() {
        let mut rec = vec![r.site_id.clone(), format_timestamp(&r.timestamp), r.temp_c.to_string()];
        rec.extend([signal[i].0, signal[i].1, theta[i], resp[i]].map(|v| v.to_string()));
        if let (true, Some(l)) = (has_labels, r.outlier_label) {
            rec.push(u8::from(l).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let site_means = average_by(known.rows.iter().map(|r| r.site_id.as_str()), &resp);
    let mut site_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut site_labels: BTreeMap<&str, Option<bool>> = BTreeMap::new();
    for r in &known.rows {
        *site_counts.entry(&r.site_id).or_default() += 1;
        let e = site_labels.entry(&r.site_id).or_insert(Some(false));
        *e = match (*e, r.outlier_label) {
            (Some(a), Some(b)) => Some(a || b),
            _ => None,
        };
    }
    let path = dir.join("site_responsibility.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["site_id", "n_obs", "mean_responsibility"];
    if has_labels {
        header.push("outlier_label");
    }
    w.write_record(&header)?;
    let mut site_scores = Vec::new();
    let mut site_truth = Vec::new();
    for (site, mean) in &site_means {
        let mut rec = vec![site.clone(), site_counts[site.as_str()].to_string(), mean.to_string()];
        let label = site_labels[site.as_str()];
        if let (true, Some(l)) = (has_labels, label) {
            rec.push(u8::from(l).to_string());
        }
        w.write_record(&rec)?;
        site_scores.push(*mean);
        site_truth.push(label);
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = dir.join("skipped_sites.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["site_id", "n_obs"])?;
    for (s, n) in &skipped {
        w.write_record([s.clone(), n.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let summary = DetectSummary {
        n_scored: known.len(),
        n_skipped: skipped.values().sum(),
        sites_scored: site_means.len(),
        skipped_sites: skipped.into_keys().collect(),
        site_auc: auc_if_labelled(&site_scores, &site_truth)?,
        observation_auc: auc_if_labelled(&resp, &labels)?,
    };
    let mut text = format!(
        "observations_scored={}\nobservations_skipped={}\nsites_scored={}\nsites_skipped={}\n",
        summary.n_scored,
        summary.n_skipped,
        summary.sites_scored,
        summary.skipped_sites.len()
    );
    if let Some(a) = summary.site_auc {
        text.push_str(&format!("site_auc={a}\n"));
    }
    if let Some(a) = summary.observation_auc {
        text.push_str(&format!("observation_auc={a}\n"));
    }
    write_text(&dir.join("outliers_summary.txt"), &text)?;
    Ok(summary)
}
