use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(g: &mut Graph<f64>, r: &mut ChaCha8Rng) {
    for p in g.params_mut() {
        for v in p.value.data_mut() {
            *v = r.random_range(-0.8..0.8);
        }
    }
}

#[test]
fn dropout_rate_zero_is_identity_in_every_mode() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[5]).unwrap();
    let d = g.dropout("d", x, DropoutSpec::new(0.0, false).unwrap()).unwrap();
    g.mark_output("y", d).unwrap();
    let input = Tensor::new(vec![2, 5], (0..10).map(|i| i as f32).collect()).unwrap();
    for mode in [Mode::Train, Mode::McSample, Mode::Deterministic] {
        let r = g.forward(&[("x", &input)], mode, &mut rng(1)).unwrap();
        assert_eq!(r.output("y").unwrap(), &input);
    }
}

#[test]
fn relu_example() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[3]).unwrap();
    let y = g.relu("r", x).unwrap();
    g.mark_output("y", y).unwrap();
    let input = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
    let r = g.forward(&[("x", &input)], Mode::Deterministic, &mut rng(0)).unwrap();
    assert_eq!(r.output("y").unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn dense_identity_passes_input_through() {
    let mut g = Graph::<f32>::new();
    let x = g.input("x", &[3]).unwrap();
    let d = g.dense("d", x, 3).unwrap();
    g.mark_output("y", d).unwrap();
    let w = g.param_mut("d.weight").unwrap();
    for i in 0..3 {
        w.value.data_mut()[i * 3 + i] = 1.0;
    }
    let input = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
    let r = g.forward(&[("x", &input)], Mode::Train, &mut rng(0)).unwrap();
    assert_eq!(r.output("y").unwrap(), &input);
}

#[test]
fn dense_backward_with_zero_weights() {
    // loss = sum(dense(x)): dW[i][j] = sum_b x[b][i], db = batch size.
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2]).unwrap();
    let d = g.dense("d", x, 3).unwrap();
    g.mark_output("y", d).unwrap();
    let input = Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap();
    let r = g.forward(&[("x", &input)], Mode::Deterministic, &mut rng(0)).unwrap();
    let grads = g.backward(&r, &[("y", Tensor::filled(&[1, 3], 1.0))]).unwrap();
    assert_eq!(grads.params[0].data(), &[0.5, 0.5, 0.5, -2.0, -2.0, -2.0]);
    assert_eq!(grads.params[1].data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[1]).unwrap();
    let d = g.dense("d", x, 1).unwrap();
    let s = g.sigmoid("s", d).unwrap();
    g.mark_output("y", s).unwrap();
    // bias gradient equals the gradient at the sigmoid input.
    let input = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let r = g.forward(&[("x", &input)], Mode::Deterministic, &mut rng(0)).unwrap();
    assert_eq!(r.output("y").unwrap().data(), &[0.5]);
    let grads = g.backward(&r, &[("y", Tensor::filled(&[1, 1], 1.0))]).unwrap();
    assert_eq!(grads.params[1].data(), &[0.25]);
}

#[test]
fn backward_requires_recorded_forward() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2]).unwrap();
    let d = g.dense("d", x, 1).unwrap();
    g.mark_output("y", d).unwrap();
    let input = Tensor::filled(&[1, 2], 1.0);
    let r = g.predict(&[("x", &input)], Mode::Deterministic, &mut rng(0)).unwrap();
    assert!(r.output("y").is_some());
    assert!(matches!(
        g.backward(&r, &[("y", Tensor::filled(&[1, 1], 1.0))]),
        Err(Error::NoRecordedForward)
    ));
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::<f32>::new();
    let x = g.input("patch", &[1, 4, 4]).unwrap();
    match g.dense("bad_dense", x, 3) {
        Err(Error::Shape { node, .. }) => assert_eq!(node, "bad_dense"),
        other => panic!("{other:?}"),
    }
    let c = g.conv2d("c", x, 2, 3).unwrap();
    g.mark_output("y", c).unwrap();
    let wrong = Tensor::filled(&[1, 1, 5, 4], 0.0);
    match g.forward(&[("patch", &wrong)], Mode::Deterministic, &mut rng(0)) {
        Err(Error::Shape { node, .. }) => assert_eq!(node, "patch"),
        other => panic!("{other:?}"),
    }
}

// One small graph per op kind, checked in f64 against central differences.
fn unit_graph(kind: OpKind) -> (Graph<f64>, Vec<(&'static str, Tensor<f64>)>) {
    let mut r = rng(kind as u64 + 10);
    let mut g = Graph::<f64>::new();
    let inputs = match kind {
        OpKind::Dense | OpKind::Relu | OpKind::Sigmoid | OpKind::Softplus | OpKind::Dropout | OpKind::Concat => {
            let x = g.input("x", &[4]).unwrap();
            let z = g.input("z", &[2]).unwrap();
            let h = g.dense("h", x, 5).unwrap();
            let a = match kind {
                OpKind::Relu => g.relu("act", h).unwrap(),
                OpKind::Sigmoid => g.sigmoid("act", h).unwrap(),
                OpKind::Softplus => g.softplus("act", h).unwrap(),
                OpKind::Dropout => g.dropout("act", h, DropoutSpec::new(0.3, false).unwrap()).unwrap(),
                _ => h,
            };
            let c = g.concat("cat", &[a, z]).unwrap();
            let o = g.dense("out", c, 2).unwrap();
            g.mark_output("y", o).unwrap();
            vec![("x", random_tensor(&[3, 4], &mut r)), ("z", random_tensor(&[3, 2], &mut r))]
        }
        OpKind::Conv2d | OpKind::MaxPool2x2 | OpKind::SpatialDropout | OpKind::Flatten | OpKind::Input => {
            let x = g.input("x", &[2, 6, 6]).unwrap();
            let c = g.conv2d("conv", x, 3, 3).unwrap();
            let a = match kind {
                OpKind::MaxPool2x2 => g.maxpool2x2("act", c).unwrap(),
                OpKind::SpatialDropout => g.dropout("act", c, DropoutSpec::new(0.5, true).unwrap()).unwrap(),
                _ => c,
            };
            let f = g.flatten("flat", a).unwrap();
            let o = g.dense("out", f, 2).unwrap();
            g.mark_output("y", o).unwrap();
            vec![("x", random_tensor(&[2, 2, 6, 6], &mut r))]
        }
    };
    randomize(&mut g, &mut r);
    (g, inputs)
}

#[test]
fn gradients_match_finite_differences_for_every_op_kind() {
    let kinds = [
        OpKind::Dense,
        OpKind::Conv2d,
        OpKind::MaxPool2x2,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Dropout,
        OpKind::SpatialDropout,
        OpKind::Concat,
        OpKind::Flatten,
    ];
    for kind in kinds {
        let (g, inputs) = unit_graph(kind);
        let refs: Vec<(&str, &Tensor<f64>)> = inputs.iter().map(|(n, t)| (*n, t)).collect();
        // Dropout kinds are checked with a recorded (frozen) mask.
        let record = g.forward(&refs, Mode::Train, &mut rng(5)).unwrap();
        let masks = record.masks();
        let report = if matches!(kind, OpKind::Dropout | OpKind::SpatialDropout) {
            let loss = |r: &Record<f64>| {
                let y = r.output("y").unwrap();
                Ok((
                    y.data().iter().sum::<f64>(),
                    vec![("y".to_string(), Tensor::filled(y.shape(), 1.0))],
                ))
            };
            finite_difference_check_with(&g, &refs, &masks, 1e-3, &loss).unwrap()
        } else {
            finite_difference_check(&g, &refs, 1e-3).unwrap()
        };
        assert!(report.checked > 0);
        assert!(report.max_rel_err <= 1e-4, "{kind:?}: {report:?}");
    }
}

#[test]
fn dense_only_and_softplus_head_tolerances() {
    let mut r = rng(77);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[3]).unwrap();
    let h = g.dense("h", x, 4).unwrap();
    let o = g.dense("o", h, 2).unwrap();
    g.mark_output("y", o).unwrap();
    randomize(&mut g, &mut r);
    let input = random_tensor(&[4, 3], &mut r);
    let report = finite_difference_check(&g, &[("x", &input)], 1e-3).unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");

    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[3]).unwrap();
    let h = g.dense("h", x, 1).unwrap();
    let s = g.softplus("sp", h).unwrap();
    g.mark_output("y", s).unwrap();
    randomize(&mut g, &mut r);
    let report = finite_difference_check(&g, &[("x", &input)], 1e-3).unwrap();
    assert!(report.max_rel_err <= 1e-5, "{report:?}");
}

#[test]
fn epsilon_outside_range_is_rejected() {
    let (g, inputs) = unit_graph(OpKind::Dense);
    let refs: Vec<(&str, &Tensor<f64>)> = inputs.iter().map(|(n, t)| (*n, t)).collect();
    assert!(finite_difference_check(&g, &refs, 0.1).is_err());
}

#[test]
fn forward_is_deterministic_given_stream() {
    let (g, inputs) = unit_graph(OpKind::SpatialDropout);
    let g32: Graph<f32> = g.cast();
    let x: Tensor<f32> = inputs[0].1.cast();
    let a = g32.forward(&[("x", &x)], Mode::McSample, &mut rng(9)).unwrap();
    let b = g32.forward(&[("x", &x)], Mode::McSample, &mut rng(9)).unwrap();
    let c = g32.forward(&[("x", &x)], Mode::McSample, &mut rng(10)).unwrap();
    assert_eq!(a.output("y"), b.output("y"));
    assert_ne!(a.output("y"), c.output("y"));
}

#[test]
fn inverted_dropout_preserves_expectation() {
    let rate = 0.5;
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[4]).unwrap();
    let d = g.dropout("d", x, DropoutSpec::new(rate, false).unwrap()).unwrap();
    g.mark_output("y", d).unwrap();
    let input = Tensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    let n = 100_000;
    let mut sums = [0.0; 4];
    let mut r = rng(4);
    for _ in 0..n {
        let out = g.predict(&[("x", &input)], Mode::McSample, &mut r).unwrap();
        for (s, v) in sums.iter_mut().zip(out.output("y").unwrap().data()) {
            *s += v;
        }
    }
    for (s, x) in sums.iter().zip(input.data()) {
        let mean = s / n as f64;
        // Each draw is x/(1-r) or 0: sd = |x| * sqrt(r/(1-r)).
        let se = x.abs() * (rate / (1.0 - rate)).sqrt() / (n as f64).sqrt();
        assert!((mean - x).abs() <= 4.0 * se, "{mean} vs {x}");
    }
}

#[test]
fn shared_masks_broadcast_over_batch() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2, 3, 3]).unwrap();
    let d = g.dropout("d", x, DropoutSpec::new(0.5, true).unwrap()).unwrap();
    g.mark_output("y", d).unwrap();
    let input = Tensor::filled(&[6, 2, 3, 3], 1.0);
    let masks = g.draw_shared_masks(&mut rng(2));
    let r = g.forward_with_masks(&[("x", &input)], &masks).unwrap();
    let y = r.output("y").unwrap().data();
    for s in 1..6 {
        assert_eq!(&y[..18], &y[s * 18..(s + 1) * 18]);
    }
    // Whole channels are either dropped or scaled.
    for ch in y.chunks(9) {
        assert!(ch.iter().all(|v| *v == ch[0]));
    }
}
