// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Relative error with the denominator `max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate with the largest error.
    pub worst: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` around `x` on the
/// given coordinates.
pub fn compare_gradient<F>(
    analytic: &Tensor,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Analytic gradient of a scalar graph function at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let value = g.value(y).item();
    let grad = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, grad))
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).item())
}

/// Worst relative error over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    Ok(finite_diff_report(&f, x, eps, &coords)?.max_rel_error)
}

/// Like [`finite_diff_check`] but on `samples` coordinates drawn without
/// replacement (all of them if `samples >= x.len()`).
pub fn finite_diff_check_sampled<F>(f: F, x: &Tensor, eps: f64, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords = sample_coords(x.len(), samples, seed);
    Ok(finite_diff_report(&f, x, eps, &coords)?.max_rel_error)
}

pub fn finite_diff_report<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let (_, grad) = analytic_gradient(f, x)?;
    compare_gradient(&grad, x, eps, coords, |p| eval_scalar(f, p))
}

pub fn sample_coords(len: usize, samples: usize, seed: u64) -> Vec<usize> {
    if samples >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, len, samples).into_vec();
    v.sort_unstable();
    v
}

/// `samples` distinct (parameter, flat index) pairs drawn uniformly over all
/// trainable coordinates of `store`.
pub fn sample_param_coords(store: &ParamStore, samples: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let mut all = Vec::new();
    for &id in &ids {
        all.extend((0..store.value(id).len()).map(|i| (id, i)));
    }
    sample_coords(all.len(), samples, seed)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// Compares the gradients accumulated in `store` against central
/// differences of `f` with respect to the given parameter coordinates.
pub fn compare_param_gradient<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for (n, &(id, i)) in coords.iter().enumerate() {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + eps;
        let fp = f(store)?;
        store.value_mut(id).data_mut()[i] = orig - eps;
        let fm = f(store)?;
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = store.grad(id).data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst = n;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
