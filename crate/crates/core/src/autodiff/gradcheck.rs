//! Central finite-difference verification of `Graph::backward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{DropoutMasks, Graph, Record};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1e-8, |numeric|)` over checked entries.
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub checked: usize,
    /// Entries whose ±epsilon perturbation crossed a relu or pooling kink.
    pub skipped: usize,
}

/// Scalar loss over a forward record, returning its value and the gradient
/// seeds for the graph outputs.
pub type LossFn<'a> = dyn Fn(&Record<f64>) -> Result<(f64, Vec<(String, Tensor<f64>)>)> + 'a;

/// Checks every parameter of `graph` against central differences of `loss`
/// with the dropout masks held fixed.
pub fn finite_difference_check_with(
    graph: &Graph<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    masks: &DropoutMasks<f64>,
    epsilon: f64,
    loss: &LossFn<'_>,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} outside [1e-5, 1e-2]")));
    }
    let record = graph.forward_with_masks(inputs, masks)?;
    let base_sig = record.kink_signature(graph);
    let (_, seeds) = loss(&record)?;
    let seed_refs: Vec<(&str, Tensor<f64>)> = seeds.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    let analytic = graph.backward(&record, &seed_refs)?;

    let mut work = graph.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: None,
        checked: 0,
        skipped: 0,
    };
    for (pi, grad) in analytic.params.iter().enumerate() {
        for i in 0..grad.len() {
            let original = work.params()[pi].value.data()[i];
            let mut eval = |delta: f64| -> Result<(f64, u64)> {
                work.params_mut()[pi].value.data_mut()[i] = original + delta;
                let r = work.forward_with_masks(inputs, masks)?;
                Ok((loss(&r)?.0, r.kink_signature(&work)))
            };
            let (plus, sig_p) = eval(epsilon)?;
            let (minus, sig_m) = eval(-epsilon)?;
            work.params_mut()[pi].value.data_mut()[i] = original;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = Some(format!("{}[{i}]", graph.params()[pi].name));
            }
        }
    }
    Ok(report)
}

/// Deterministic-mode check with the loss `sum_o <c_o, output_o>` for fixed
/// pseudo-random coefficients `c_o` in [0.5, 1.5].
pub fn finite_difference_check(graph: &Graph<f64>, inputs: &[(&str, &Tensor<f64>)], epsilon: f64) -> Result<GradCheckReport> {
    let probe = graph.forward_with_masks(inputs, &DropoutMasks::identity())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let coeffs: Vec<(String, Tensor<f64>)> = graph
        .outputs()
        .iter()
        .map(|(name, _)| {
            let out = probe.output(name).expect("output evaluated");
            let data = (0..out.len()).map(|_| rng.random_range(0.5..1.5)).collect();
            (name.clone(), Tensor::from_parts(out.shape().to_vec(), data))
        })
        .collect();
    let loss = move |r: &Record<f64>| {
        let mut total = 0.0;
        for (name, c) in &coeffs {
            let out = r.output(name).expect("output evaluated");
            total += out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok((total, coeffs.clone()))
    };
    finite_difference_check_with(graph, inputs, &DropoutMasks::identity(), epsilon, &loss)
}
