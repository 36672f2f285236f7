//! Small end-to-end runs of synthesis, training and scoring.

use std::collections::BTreeMap;

use tempmix::checkpoint::Checkpoint;
use tempmix::data::{fold_map, split_folds_by_site, ObservationTable};
use tempmix::evaluation::{average_by, outlier_auc, rmse_r2};
use tempmix::mixture::outlier_responsibility;
use tempmix::network::{theta_link, NetworkConfig};
use tempmix::synthetic::{generate_observations, generate_world, SyntheticObservations, SyntheticWorld, SyntheticWorldConfig};
use tempmix::training::{initialize_model, predict_deterministic, train, DataContext, Likelihood, PreparedSet, TrainConfig, TrainState};
use tempmix::{MixtureParams, ModelGraph, Streams};

fn world(contamination: f64) -> (SyntheticWorld, SyntheticObservations) {
    let cfg = SyntheticWorldConfig {
        extent_m: 60_000.0,
        dem_cells: 120,
        n_sites: 40,
        days: 1,
        contamination_rate: contamination,
        seed: 11,
        ..Default::default()
    };
    let w = generate_world(&cfg).unwrap();
    let o = generate_observations(&w, &cfg).unwrap();
    (w, o)
}

fn net() -> NetworkConfig {
    NetworkConfig {
        conv_channels: vec![4],
        dense_widths: vec![32, 32],
        outlier_hidden: 4,
        dropout_rate: 0.1,
        patch_size: 8,
        patch_cell_m: 1000.0,
        ..Default::default()
    }
}

struct Fitted {
    model: ModelGraph,
    ctx: DataContext,
    state: TrainState,
    train_t: ObservationTable,
    test_t: ObservationTable,
}

fn fit(w: &SyntheticWorld, o: &SyntheticObservations, likelihood: Likelihood, epochs: usize) -> Fitted {
    let streams = Streams::new(5);
    let table = split_folds_by_site(&o.table, 5, &mut streams.derive("split", &[])).unwrap();
    let train_t = table.in_folds(&[1, 2, 3, 4]);
    let test_t = table.in_folds(&[5]);
    let ctx = DataContext::from_training(&train_t).unwrap();
    let mut model = initialize_model(&net(), &ctx, &train_t, &w.dem, &mut streams.derive("init", &[])).unwrap();
    let set = PreparedSet::new(&model, &ctx, &train_t, &w.dem).unwrap();
    let tc = TrainConfig {
        epochs,
        batch_size: 64,
        seed: 5,
        likelihood,
        ..Default::default()
    };
    let mut state = TrainState::new(&model, &tc);
    train(&mut model, &mut state, &set, None, &tc, |_, _| Ok(())).unwrap();
    Fitted {
        model,
        ctx,
        state,
        train_t,
        test_t,
    }
}

fn clean_rmse(f: &Fitted, w: &SyntheticWorld) -> f64 {
    let set = PreparedSet::new(&f.model, &f.ctx, &f.test_t, &w.dem).unwrap();
    let pred = predict_deterministic(&f.model, &set).unwrap();
    let keep: Vec<usize> = (0..set.len()).filter(|&i| f.test_t.rows[i].outlier_label == Some(false)).collect();
    let p: Vec<f64> = keep.iter().map(|&i| pred[i].0).collect();
    let y: Vec<f64> = keep.iter().map(|&i| set.y[i]).collect();
    rmse_r2(&p, &y).unwrap().0
}

fn responsibilities(f: &Fitted, w: &SyntheticWorld) -> Vec<f64> {
    let set = PreparedSet::new(&f.model, &f.ctx, &f.train_t, &w.dem).unwrap();
    let pred = predict_deterministic(&f.model, &set).unwrap();
    let idx: Vec<usize> = (0..set.len()).collect();
    let logits = f.model.theta_logits(&set.outlier_batch(&f.model, &idx).unwrap()).unwrap();
    (0..set.len())
        .map(|i| {
            let p = MixtureParams::new(pred[i].0, pred[i].1, theta_link(logits[i])).unwrap();
            outlier_responsibility(set.y[i], &p).unwrap()
        })
        .collect()
}

#[test]
fn smoothed_training_nll_decreases() {
    let (w, o) = world(0.1);
    let f = fit(&w, &o, Likelihood::Mixture, 20);
    let nll: Vec<f64> = f.state.history.iter().map(|m| m.train_nll).collect();
    let head = nll[..5].iter().sum::<f64>() / 5.0;
    let tail = nll[15..].iter().sum::<f64>() / 5.0;
    assert!(tail < head - 0.3, "{head} -> {tail}");
}

#[test]
fn clean_data_mixture_tracks_gaussian() {
    // Without contamination the uniform component has nothing to explain:
    // responsibilities stay small and accuracy matches the Gaussian fit.
    let (w, o) = world(0.0);
    let mix = fit(&w, &o, Likelihood::Mixture, 25);
    let gauss = fit(&w, &o, Likelihood::Gaussian, 25);
    let r = responsibilities(&mix, &w);
    let mean_r = r.iter().sum::<f64>() / r.len() as f64;
    assert!(mean_r < 0.05, "mean responsibility {mean_r}");
    let (rm, rg) = (clean_rmse(&mix, &w), clean_rmse(&gauss, &w));
    assert!(rm < 1.25 * rg, "mixture {rm} gaussian {rg}");
}

#[test]
fn planted_faulty_sites_get_high_responsibility() {
    let (w, o) = world(0.2);
    let f = fit(&w, &o, Likelihood::Mixture, 25);
    let r = responsibilities(&f, &w);
    let by_site = average_by(f.train_t.rows.iter().map(|x| x.site_id.as_str()), &r);
    let labels: BTreeMap<&str, bool> = f
        .train_t
        .rows
        .iter()
        .map(|x| (x.site_id.as_str(), x.outlier_label.unwrap()))
        .collect();
    let scores: Vec<f64> = by_site.values().copied().collect();
    let truth: Vec<bool> = by_site.keys().map(|k| labels[k.as_str()]).collect();
    assert!(truth.iter().any(|t| *t));
    let auc = outlier_auc(&scores, &truth).unwrap();
    assert!(auc >= 0.9, "site AUC {auc}");
}

#[test]
fn trained_checkpoint_round_trips_bit_exactly() {
    let (w, o) = world(0.1);
    let f = fit(&w, &o, Likelihood::Mixture, 2);
    let ck = Checkpoint {
        model: f.model.clone(),
        context: f.ctx.clone(),
        folds: fold_map(&f.train_t).unwrap(),
        state: Some(f.state.clone()),
        config_echo: vec![("seed".into(), "5".into())],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for (a, b) in ck
        .model
        .signal
        .params()
        .iter()
        .zip(back.model.signal.params())
        .chain(ck.model.outlier.params().iter().zip(back.model.outlier.params()))
    {
        let bits = |p: &tempmix::autodiff::Param<f32>| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }
    assert_eq!(back.model, ck.model);
    assert_eq!(back.state, ck.state);
    assert_eq!(back.context, ck.context);
}
