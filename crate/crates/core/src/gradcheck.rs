//! Central-difference oracle for reverse-mode gradients.
//!
//! The graph output is projected to a scalar with fixed pseudo-random
//! weights, so every output element contributes with a distinct sign and
//! magnitude. Relative error per element is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)` with a default
//! floor of 1e-8.
//!
//! In f64 the central difference carries roughly `1e-14 / eps` absolute noise
//! on an O(10) objective, so elements whose gradient is far below 1e-6 cannot
//! be resolved to 1e-5 relative. Checks that include parameters with such
//! gradients raise `floor` explicitly.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamStore, RngState};
use crate::tensor::Tensor;

pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step, in `[1e-6, 1e-4]`.
    pub eps: f64,
    /// Check at most this many (randomly chosen) elements per tensor.
    pub max_elements_per_tensor: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Also check every trainable parameter the graph touches.
    pub check_params: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_elements_per_tensor: None,
            seed: 0x5eed,
            floor: DEFAULT_FLOOR,
            check_params: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstElement {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstElement>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks gradients with respect to `inputs` only.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    grad_check_params(&store, |g, _, xs| f(g, xs), inputs, opts)
}

/// Checks gradients with respect to `inputs` and, when `opts.check_params`
/// is set, every trainable parameter of `store` that the graph touches.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(Error::Config(format!("grad_check eps must be in [1e-6, 1e-4], got {}", opts.eps)));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, store, &vars)?;
    let weights = projection_weights(g.value(out).numel(), opts.seed);
    let root = project(&mut g, out, &weights)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut pick = RngState::new(opts.seed ^ 0x9e37_79b9);

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, store, &vars)?;
        let root = project(&mut g, out, &weights)?;
        Ok(g.value(root).item())
    };

    let mut perturbed = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for idx in sample_indices(inputs[i].numel(), opts.max_elements_per_tensor, &mut pick) {
            let orig = inputs[i].data()[idx];
            perturbed[i].data_mut()[idx] = orig + opts.eps;
            let fp = eval(store, &perturbed)?;
            perturbed[i].data_mut()[idx] = orig - opts.eps;
            let fm = eval(store, &perturbed)?;
            perturbed[i].data_mut()[idx] = orig;
            record(&mut report, opts.floor, &format!("input[{i}]"), idx, analytic.data()[idx], (fp - fm) / (2.0 * opts.eps));
        }
    }

    let mut pstore = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable || !opts.check_params {
            continue;
        }
        let Some(v) = g.param_var(id) else { continue };
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
        for idx in sample_indices(p.value.numel(), opts.max_elements_per_tensor, &mut pick) {
            let orig = p.value.data()[idx];
            pstore.get_mut(id).value.data_mut()[idx] = orig + opts.eps;
            let fp = eval(&pstore, inputs)?;
            pstore.get_mut(id).value.data_mut()[idx] = orig - opts.eps;
            let fm = eval(&pstore, inputs)?;
            pstore.get_mut(id).value.data_mut()[idx] = orig;
            record(&mut report, opts.floor, &p.name, idx, analytic.data()[idx], (fp - fm) / (2.0 * opts.eps));
        }
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, floor: f64, tensor: &str, index: usize, analytic: f64, numeric: f64) {
    report.checked += 1;
    let rel = relative_error(analytic, numeric, floor);
    if rel > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = report.max_rel_error.max(rel);
        report.worst = Some(WorstElement {
            tensor: tensor.to_string(),
            index,
            analytic,
            numeric,
        });
    }
}

fn projection_weights(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    Tensor::from_fn(vec![n], |_| {
        let m = rng.uniform(0.5, 1.5);
        if rng.coin() {
            m
        } else {
            -m
        }
    })
}

fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(weights.reshape(shape)?);
    let y = g.mul(out, w)?;
    g.sum(y)
}

fn sample_indices(n: usize, limit: Option<usize>, rng: &mut RngState) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..n).collect(),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_fn(vec![3], |i| i as f64);
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::full(vec![2], 4.0))),
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 3);
        let w = r.worst.unwrap();
        assert_eq!((w.analytic, w.numeric), (0.0, 0.0));
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        // Forward is x², backward claims 3x instead of 2x.
        let square = |g: &mut Graph<f64>, xs: &[Var]| {
            let out = g.value(xs[0]).map(|v| v * v);
            g.custom(
                "bad_square",
                xs,
                out,
                Arc::new(|ins: &[&Tensor<f64>], _out: &Tensor<f64>, gy: &Tensor<f64>| {
                    vec![gy.zip_map(ins[0], |gv, x| gv * 3.0 * x).unwrap()]
                }),
            )
        };
        let x = Tensor::from_fn(vec![4], |i| 0.3 + i as f64);
        let r = grad_check(square, &[x], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.3, "{r:?}");
    }

    #[test]
    fn eps_outside_range_rejected() {
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(|g, xs| g.sum(xs[0]), &[Tensor::zeros(vec![1])], &opts).is_err());
    }

    #[test]
    fn non_finite_intermediate_names_the_op() {
        let x = Tensor::full(vec![1], 800.0);
        let err = grad_check(|g, xs| g.exp(xs[0]), &[x], &GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("exp"), "{err}");
    }
}
