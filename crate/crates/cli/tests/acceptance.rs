//! Acceptance run: one PASS/FAIL line per criterion, then a nonzero exit if
//! any failed. Criteria 3, 4, 6, 7 and 8 share one desk-scale synthetic
//! pipeline driven through the command implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::ContinuousCDF;
use tempmix::autodiff::{
    finite_difference_check, finite_difference_check_with, DropoutMasks, GradCheckReport, Graph, Mode, Record, Tensor,
};
use tempmix::checkpoint::Checkpoint;
use tempmix::evaluation::{crps_from_samples, gaussian_crps};
use tempmix::mixture::{mixture_log_density, OutlierComponent};
use tempmix::network::{build_model, NetworkConfig};
use tempmix::training::head_gradients;
use tempmix::{MixtureParams, Streams};
use tempmix_cli::{commands, RunConfig};

// Desk-scale settings shared by every pipeline run below. The synthetic
// world uses the defaults (200 sites, 3 days, 5% faulty sites).
const DESK: &[(&str, &str)] = &[
    ("net.conv_channels", "4,8"),
    ("net.dense_widths", "64,64"),
    ("net.dropout_rate", "0.1"),
    ("train.epochs", "200"),
    ("train.batch_size", "256"),
    ("train.checkpoint_every", "0"),
    ("mc.passes", "50"),
    ("mc.draws_per_pass", "20"),
    ("grid.time", "2020-10-27T12:00:00Z"),
    ("grid.resolution", "4000"),
    ("grid.realisations", "2"),
];
const SEED: u64 = 2020;

// Pinned tolerances.
const FD_MAX_REL_ERR: f64 = 1e-4;
const FD_MAX_SECONDS: f64 = 60.0;
const MIXTURE_REL_ERR: f64 = 1e-10;
const AUC_MIN: f64 = 0.95;
const RMSE_RATIO_MAX: f64 = 0.8;
const PIPELINE_MAX_MINUTES: f64 = 30.0;
const COVERAGE_95: (f64, f64) = (0.90, 0.98);
const PIT_KS_MAX: f64 = 0.05;
const CRPS_REL_ERR: f64 = 0.02;
const CRPS_SAMPLES: usize = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, title: &str, o: &Outcome) {
    println!("criterion {n} [{}] {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn config(out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let sets: Vec<(String, String)> = DESK.iter().chain(extra).map(|(k, v)| (k.to_string(), v.to_string())).collect();
    RunConfig::resolve(None, &sets, Some(SEED), Some(out)).expect("acceptance config")
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn key(text: &str, k: &str) -> Option<f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(a, _)| *a == k)
        .and_then(|(_, v)| v.parse().ok())
}

// ---- criterion 1 ----------------------------------------------------------

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(g: &mut Graph<f64>, rng: &mut impl Rng) {
    for p in g.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

fn unit_check(kind: &str, seed: u64) -> GradCheckReport {
    let mut rng = Streams::new(seed).derive("fd", &[]);
    let mut g = Graph::<f64>::new();
    let inputs = if kind == "conv2d" || kind == "maxpool" {
        let x = g.input("x", &[2, 6, 6]).unwrap();
        let mut h = g.conv2d("conv", x, 3, 3).unwrap();
        if kind == "maxpool" {
            h = g.maxpool2x2("pool", h).unwrap();
        }
        let f = g.flatten("flat", h).unwrap();
        let o = g.dense("out", f, 2).unwrap();
        g.mark_output("y", o).unwrap();
        vec![("x", random_tensor(&[2, 2, 6, 6], &mut rng))]
    } else {
        let x = g.input("x", &[4]).unwrap();
        let h = g.dense("h", x, 5).unwrap();
        let a = match kind {
            "relu" => g.relu("act", h).unwrap(),
            "sigmoid" => g.sigmoid("act", h).unwrap(),
            "softplus" => g.softplus("act", h).unwrap(),
            _ => h,
        };
        let o = g.dense("out", a, 2).unwrap();
        g.mark_output("y", o).unwrap();
        vec![("x", random_tensor(&[3, 4], &mut rng))]
    };
    randomize(&mut g, &mut rng);
    let refs: Vec<(&str, &Tensor<f64>)> = inputs.iter().map(|(n, t)| (*n, t)).collect();
    finite_difference_check(&g, &refs, 1e-3).unwrap()
}

/// Mixture NLL of a small two-branch model; dropout masks frozen from one
/// training-mode draw. Returns the signal-branch and outlier-branch reports.
fn mixture_check() -> (GradCheckReport, GradCheckReport) {
    let cfg = NetworkConfig {
        conv_channels: vec![2],
        dense_widths: vec![6],
        outlier_hidden: 3,
        dropout_rate: 0.3,
        patch_size: 6,
        ..Default::default()
    };
    let streams = Streams::new(1);
    let mut rng = streams.derive("fd-mixture", &[]);
    let model = build_model(&cfg, 3, &mut rng).unwrap();
    let mut signal = model.signal.cast::<f64>();
    let mut outlier = model.outlier.cast::<f64>();
    randomize(&mut signal, &mut rng);
    randomize(&mut outlier, &mut rng);
    let n = 8;
    let patch = random_tensor(&[n, 1, 6, 6], &mut rng);
    let loc = random_tensor(&[n, 6], &mut rng);
    let mut site = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        site.data_mut()[i * 3 + i % 3] = 1.0;
    }
    let time = random_tensor(&[n, 1], &mut rng);
    let y: Vec<f64> = (0..n).map(|i| if i == 5 { 25.0 } else { rng.random_range(-2.0..2.0) }).collect();
    let s_in = [("patch", &patch), ("loc", &loc)];
    let o_in = [("site", &site), ("time", &time)];
    let frozen = signal.forward(&s_in, Mode::Train, &mut rng).unwrap().masks();
    let none = DropoutMasks::identity();
    let col = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
    let srec = signal.forward_with_masks(&s_in, &frozen).unwrap();
    let mu0 = srec.output("mu_raw").unwrap().data().to_vec();
    let sr0 = srec.output("sigma_raw").unwrap().data().to_vec();
    let a0 = outlier
        .forward_with_masks(&o_in, &none)
        .unwrap()
        .output("theta_logit")
        .unwrap()
        .data()
        .to_vec();

    let (y1, a1) = (y.clone(), a0);
    let signal_loss = move |r: &Record<f64>| {
        let mu = r.output("mu_raw").unwrap().data().to_vec();
        let sr = r.output("sigma_raw").unwrap().data().to_vec();
        let hg = head_gradients(&y1, &mu, &sr, Some(&a1))?;
        Ok((
            hg.nll,
            vec![
                ("mu_raw".to_string(), col(&hg.d_mu)),
                ("sigma_raw".to_string(), col(&hg.d_sigma_raw)),
            ],
        ))
    };
    let outlier_loss = move |r: &Record<f64>| {
        let a = r.output("theta_logit").unwrap().data().to_vec();
        let hg = head_gradients(&y, &mu0, &sr0, Some(&a))?;
        Ok((hg.nll, vec![("theta_logit".to_string(), col(hg.d_theta_logit.as_deref().unwrap()))]))
    };
    let rs = finite_difference_check_with(&signal, &s_in, &frozen, 1e-5, &signal_loss).unwrap();
    let ro = finite_difference_check_with(&outlier, &o_in, &none, 1e-5, &outlier_loss).unwrap();
    (rs, ro)
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut pass = true;
    let mut consider = |name: &str, r: &GradCheckReport| {
        pass &= r.checked > 0 && r.max_rel_err <= FD_MAX_REL_ERR;
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, name.to_string());
        }
    };
    for (i, kind) in ["dense", "conv2d", "maxpool", "relu", "sigmoid", "softplus"].iter().enumerate() {
        consider(kind, &unit_check(kind, 100 + i as u64));
    }
    let (rs, ro) = mixture_check();
    consider("mixture/signal", &rs);
    consider("mixture/outlier", &ro);
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: pass && secs < FD_MAX_SECONDS,
        detail: format!(
            "max rel err {:.2e} ({}) <= {FD_MAX_REL_ERR:e} over 6 op kinds + full mixture NLL; {secs:.1}s < {FD_MAX_SECONDS}s",
            worst.0, worst.1
        ),
    }
}

// ---- criterion 2 ----------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = Streams::new(SEED).derive("mixture-oracle", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mu: f64 = rng.random_range(-30.0..40.0);
        let sigma: f64 = rng.random_range(0.5..10.0);
        let theta: f64 = rng.random_range(0.0..=1.0);
        let y = mu + sigma * rng.random_range(-6.0..6.0);
        let z = (y - mu) / sigma;
        let direct = (theta * (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()) + (1.0 - theta) / 100.0).ln();
        let got = mixture_log_density(y, &MixtureParams::new(mu, sigma, theta).unwrap()).unwrap();
        worst = worst.max((got - direct).abs() / direct.abs());
    }
    let at_zero = mixture_log_density(3.0, &MixtureParams::new(0.0, 1.0, 0.0).unwrap()).unwrap();
    let exact = at_zero == (1.0f64 / 100.0).ln() && at_zero == OutlierComponent::STANDARD.log_density();
    Outcome {
        pass: worst <= MIXTURE_REL_ERR && exact,
        detail: format!("max rel err {worst:.2e} <= {MIXTURE_REL_ERR:e} on 1000 random points; theta=0 gives exactly ln(1/100): {exact}"),
    }
}

// ---- criterion 5 ----------------------------------------------------------

fn criterion_5() -> Outcome {
    let streams = Streams::new(SEED);
    let mut rng = streams.derive("crps-triples", &[]);
    let rel_err = |samples: &[f64], mu: f64, sigma: f64, y: f64| {
        let exact = gaussian_crps(mu, sigma, y);
        (crps_from_samples(samples, y).unwrap() - exact).abs() / exact
    };
    let iid = |mu: f64, sigma: f64, k: u64| -> Vec<f64> {
        let normal = Normal::new(mu, sigma).unwrap();
        let mut draw = streams.derive("crps-draws", &[k]);
        (0..CRPS_SAMPLES).map(|_| normal.sample(&mut draw)).collect()
    };
    // Quantile-stratified draws remove sampling noise and isolate estimator error.
    let stratified = |mu: f64, sigma: f64| -> Vec<f64> {
        let normal = statrs::distribution::Normal::new(mu, sigma).unwrap();
        (0..CRPS_SAMPLES)
            .map(|i| normal.inverse_cdf((i as f64 + 0.5) / CRPS_SAMPLES as f64))
            .collect()
    };
    let mut worst: f64 = 0.0;
    let mut worst_stratified: f64 = 0.0;
    for k in 0..20u64 {
        let mu = rng.random_range(-20.0..30.0);
        let sigma = rng.random_range(0.3..5.0);
        let y = mu + sigma * rng.random_range(-3.0..3.0);
        worst = worst.max(rel_err(&iid(mu, sigma, k), mu, sigma, y));
        worst_stratified = worst_stratified.max(rel_err(&stratified(mu, sigma), mu, sigma, y));
    }
    let centre = rel_err(&iid(0.0, 1.0, 20), 0.0, 1.0, 0.0);
    Outcome {
        pass: worst <= CRPS_REL_ERR,
        detail: format!(
            "max rel err {:.3}% <= {}% over 20 triples at N = {CRPS_SAMPLES} iid draws; \
             same triples on stratified draws {:.1e}; mu=0 sigma=1 y=0 iid {:.3}%",
            worst * 100.0,
            CRPS_REL_ERR * 100.0,
            worst_stratified,
            centre * 100.0
        ),
    }
}

// ---- pipeline criteria ----------------------------------------------------

struct Pipeline {
    root: PathBuf,
    minutes: f64,
    mix_report: String,
    gauss_report: String,
    train_fold_report: String,
    site_auc: Option<f64>,
}

fn inputs(root: &Path) -> [(&'static str, String); 2] {
    let data = root.join("data");
    [
        ("observations", data.join("observations.csv").display().to_string()),
        ("dem", data.join("dem.asc").display().to_string()),
    ]
}

fn with_inputs<'a>(root: &'a Path, extra: &'a [(&'a str, &'a str)]) -> impl Fn(&str) -> RunConfig + 'a {
    move |dir: &str| {
        let [(ok, ov), (dk, dv)] = inputs(root);
        let mut sets: Vec<(&str, &str)> = vec![(ok, ov.as_str()), (dk, dv.as_str())];
        sets.extend_from_slice(extra);
        config(&root.join(dir), &sets)
    }
}

fn run_pipeline(root: &Path) -> Pipeline {
    let t0 = Instant::now();
    commands::synth(&config(&root.join("data"), &[])).expect("synth");
    let mix = with_inputs(root, &[])("mix");
    let gauss = with_inputs(root, &[("train.likelihood", "gaussian")])("gauss");
    let train_fold = with_inputs(root, &[("evaluate.fold", "1")])("mix");
    commands::train(&mix, false).expect("train mixture");
    eprintln!("mixture model trained after {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    commands::train(&gauss, false).expect("train gaussian");
    eprintln!("gaussian model trained after {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
    let ev = |cfg: &RunConfig, dir: &str| {
        let mut c = cfg.clone();
        c.set("out", &root.join(dir).display().to_string()).unwrap();
        commands::evaluate(&c, None, None).expect("evaluate");
        String::from_utf8(read(&root.join(dir).join("report.txt"))).unwrap()
    };
    let mix_report = ev(&mix, "mix_eval");
    let gauss_report = ev(&gauss, "gauss_eval");
    let detect = {
        let mut c = mix.clone();
        c.set("out", &root.join("mix_detect").display().to_string()).unwrap();
        commands::detect_outliers(&c, None, None).expect("detect-outliers")
    };
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let train_fold_report = ev(&train_fold, "mix_eval_train_fold");
    Pipeline {
        root: root.to_path_buf(),
        minutes,
        mix_report,
        gauss_report,
        train_fold_report,
        site_auc: detect.site_auc,
    }
}

fn criterion_3(p: &Pipeline) -> Outcome {
    let rm = key(&p.mix_report, "clean_rmse").unwrap_or(f64::NAN);
    let rg = key(&p.gauss_report, "clean_rmse").unwrap_or(f64::NAN);
    let ratio = rm / rg;
    let auc = p.site_auc.unwrap_or(f64::NAN);
    let (am, ag) = (
        key(&p.mix_report, "rmse").unwrap_or(f64::NAN),
        key(&p.gauss_report, "rmse").unwrap_or(f64::NAN),
    );
    Outcome {
        pass: auc >= AUC_MIN && ratio <= RMSE_RATIO_MAX && p.minutes < PIPELINE_MAX_MINUTES,
        detail: format!(
            "site AUC {auc:.4} >= {AUC_MIN}; held-out clean RMSE mixture {rm:.4} / gaussian {rg:.4} = {ratio:.3} <= {RMSE_RATIO_MAX} \
             (all readings: {am:.3} / {ag:.3}); pipeline {:.1} min < {PIPELINE_MAX_MINUTES}",
            p.minutes
        ),
    }
}

fn criterion_4(p: &Pipeline) -> Outcome {
    let cov = key(&p.mix_report, "clean_coverage_0.95").unwrap_or(f64::NAN);
    let ks = key(&p.mix_report, "clean_pit_ks").unwrap_or(f64::NAN);
    let (cov_all, ks_all) = (
        key(&p.mix_report, "coverage_0.95").unwrap_or(f64::NAN),
        key(&p.mix_report, "pit_ks").unwrap_or(f64::NAN),
    );
    Outcome {
        pass: (COVERAGE_95.0..=COVERAGE_95.1).contains(&cov) && ks <= PIT_KS_MAX,
        detail: format!(
            "held-out clean 95% coverage {cov:.4} in [{}, {}]; PIT KS {ks:.4} <= {PIT_KS_MAX} (all readings: {cov_all:.4}, {ks_all:.4})",
            COVERAGE_95.0, COVERAGE_95.1
        ),
    }
}

fn criterion_6(p: &Pipeline) -> Outcome {
    let vals: Vec<Option<f64>> = ["r2", "rmse", "crps"].iter().map(|k| key(&p.mix_report, k)).collect();
    let present = vals.iter().all(|v| v.is_some_and(f64::is_finite));
    let test_rmse = key(&p.mix_report, "clean_rmse").unwrap_or(f64::NAN);
    let train_rmse = key(&p.train_fold_report, "clean_rmse").unwrap_or(f64::NAN);
    let f = |v: Option<f64>| v.map_or("missing".into(), |x| format!("{x:.4}"));
    Outcome {
        pass: present && train_rmse <= test_rmse,
        detail: format!(
            "evaluate reports r2={} rmse={} crps={} (reference values need the real archive); \
             training-fold clean RMSE {train_rmse:.4} <= test-fold {test_rmse:.4}",
            f(vals[0]),
            f(vals[1]),
            f(vals[2])
        ),
    }
}

fn files_in(dir: &Path, exts: &[&str]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| exts.iter().any(|x| e == *x)))
        .collect();
    v.sort();
    v
}

/// Byte-compares every CSV/ASC output of two runs.
fn same_outputs(a: &Path, b: &Path, failures: &mut Vec<String>) -> usize {
    let fa = files_in(a, &["csv", "asc"]);
    let fb = files_in(b, &["csv", "asc"]);
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if names(&fa) != names(&fb) || fa.is_empty() {
        failures.push(format!("{} vs {}: different file sets", a.display(), b.display()));
        return 0;
    }
    for (x, y) in fa.iter().zip(&fb) {
        if read(x) != read(y) {
            failures.push(format!("{} differs", x.display()));
        }
    }
    fa.len()
}

fn param_bits(ck: &Checkpoint) -> Vec<u32> {
    ck.model
        .signal
        .params()
        .iter()
        .chain(ck.model.outlier.params())
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn criterion_7(p: &Pipeline) -> Outcome {
    let root = &p.root;
    let mut failures = Vec::new();
    let mut compared = 0;

    commands::synth(&config(&root.join("data_rerun"), &[])).expect("synth rerun");
    compared += same_outputs(&root.join("data"), &root.join("data_rerun"), &mut failures);

    // Training rerun at reduced length: same command, same seed, twice.
    let short = [("train.epochs", "3")];
    for dir in ["short_a", "short_b"] {
        commands::train(&with_inputs(root, &short)(dir), false).expect("short train");
    }
    let a = Checkpoint::load(root.join("short_a/model.ckpt")).unwrap();
    let b = Checkpoint::load(root.join("short_b/model.ckpt")).unwrap();
    if param_bits(&a) != param_bits(&b) || a.state.as_ref().map(|s| &s.optimizer) != b.state.as_ref().map(|s| &s.optimizer) {
        failures.push("training rerun produced different parameters".into());
    }

    let mix = with_inputs(root, &[])("mix");
    for (dir, what) in [
        ("mix_eval_rerun", "evaluate"),
        ("mix_grid", "grid"),
        ("mix_grid_rerun", "grid"),
        ("mix_detect_rerun", "detect"),
    ] {
        let mut c = mix.clone();
        c.set("out", &root.join(dir).display().to_string()).unwrap();
        match what {
            "evaluate" => drop(commands::evaluate(&c, None, None).expect("evaluate rerun")),
            "grid" => drop(commands::grid(&c, None, None).expect("grid")),
            _ => drop(commands::detect_outliers(&c, None, None).expect("detect rerun")),
        }
    }
    compared += same_outputs(&root.join("mix_eval"), &root.join("mix_eval_rerun"), &mut failures);
    compared += same_outputs(&root.join("mix_grid"), &root.join("mix_grid_rerun"), &mut failures);
    compared += same_outputs(&root.join("mix_detect"), &root.join("mix_detect_rerun"), &mut failures);

    // Checkpoint round trip: load, save, reload.
    let original = root.join("mix/model.ckpt");
    let ck = Checkpoint::load(&original).unwrap();
    let copy = root.join("roundtrip.ckpt");
    ck.save(&copy).unwrap();
    let back = Checkpoint::load(&copy).unwrap();
    let exact = param_bits(&ck) == param_bits(&back) && read(&original) == read(&copy) && back.model == ck.model;
    if !exact {
        failures.push("checkpoint round trip changed parameters".into());
    }

    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "{compared} CSV/ASC outputs of synth/evaluate/grid/detect-outliers byte-identical on rerun; \
                 training rerun parameters bit-identical; checkpoint round trip bit-exact ({} parameters)",
                param_bits(&ck).len()
            )
        } else {
            failures.join("; ")
        },
    }
}

fn criterion_8(p: &Pipeline) -> Outcome {
    let root = &p.root;
    let mut ck = Checkpoint::load(root.join("mix/model.ckpt")).unwrap();
    let mut rng = Streams::new(SEED).derive("randomize-outlier", &[]);
    let noise = Normal::new(0.0, 3.0).unwrap();
    for param in ck.model.outlier.params_mut() {
        for v in param.value.data_mut() {
            *v = noise.sample(&mut rng) as f32;
        }
    }
    let randomized = root.join("randomized.ckpt");
    ck.save(&randomized).unwrap();

    let mix = with_inputs(root, &[])("mix");
    let run = |dir: &str, ckpt: Option<&Path>| {
        let mut c = mix.clone();
        c.set("out", &root.join(dir).display().to_string()).unwrap();
        commands::evaluate(&c, ckpt, None).expect("evaluate");
        commands::grid(&c, ckpt, None).expect("grid");
        commands::detect_outliers(&c, ckpt, None).expect("detect");
    };
    run("theta_random", Some(&randomized));

    let mut failures = Vec::new();
    let mut max_diff: f64 = 0.0;
    let mut compared = 0;
    let mut pairs: Vec<(&str, String)> = ["predictions.csv", "coverage.csv", "qq.csv", "clean_coverage.csv", "clean_qq.csv"]
        .iter()
        .map(|f| ("mix_eval", f.to_string()))
        .collect();
    for p in files_in(&root.join("mix_grid"), &["asc"]) {
        pairs.push(("mix_grid", p.file_name().unwrap().to_string_lossy().into_owned()));
    }
    for (reference, file) in &pairs {
        let a = String::from_utf8(read(&root.join(reference).join(file))).unwrap();
        let b = String::from_utf8(read(&root.join("theta_random").join(file))).unwrap();
        compared += 1;
        if a.lines().count() != b.lines().count() {
            failures.push(format!("{file}: row count differs"));
            continue;
        }
        for (la, lb) in a.lines().zip(b.lines()) {
            for (x, y) in la.split([',', ' ']).zip(lb.split([',', ' '])) {
                match (x.parse::<f64>(), y.parse::<f64>()) {
                    (Ok(u), Ok(v)) => max_diff = max_diff.max((u - v).abs()),
                    _ if x != y => failures.push(format!("{file}: field {x:?} vs {y:?}")),
                    _ => {}
                }
            }
        }
    }
    let strip = |t: String| {
        t.lines()
            .filter(|l| !l.starts_with("checkpoint="))
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    let ra = strip(String::from_utf8(read(&root.join("mix_eval/report.txt"))).unwrap());
    let rb = strip(String::from_utf8(read(&root.join("theta_random/report.txt"))).unwrap());
    if ra != rb {
        failures.push("report.txt metrics differ".into());
    }
    // The outlier path itself must have changed, or the test proves nothing.
    let detect_changed = read(&root.join("mix_detect/responsibilities.csv")) != read(&root.join("theta_random/responsibilities.csv"));
    Outcome {
        pass: failures.is_empty() && max_diff == 0.0 && detect_changed && compared > 3,
        detail: format!(
            "randomized outlier-branch weights: max abs diff {max_diff} across {compared} evaluate/grid outputs and report metrics; \
             responsibilities changed as expected: {detect_changed}{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; {}", failures.join("; "))
            }
        ),
    }
}

fn main() {
    // Honour `cargo test -- --list` and name filters minimally.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }

    let mut all = true;
    let mut emit = |n: usize, title: &str, o: Outcome| {
        report(n, title, &o);
        all &= o.pass;
    };
    emit(1, "gradient correctness", criterion_1());
    emit(2, "mixture density oracle", criterion_2());

    let dir = tempfile::tempdir().unwrap();
    eprintln!("desk-scale pipeline in {}", dir.path().display());
    let p = run_pipeline(dir.path());
    emit(3, "synthetic end-to-end", criterion_3(&p));
    emit(4, "calibration", criterion_4(&p));
    emit(5, "CRPS estimator", criterion_5());
    emit(6, "headline metrics computed", criterion_6(&p));
    emit(7, "reproducibility", criterion_7(&p));
    emit(8, "theta exclusion", criterion_8(&p));
    println!("acceptance: {}", if all { "all criteria PASS" } else { "some criteria FAIL" });
    if !all {
        std::process::exit(1);
    }
}
