use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{GradMap, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Number of scalar parameters to sample; `None` checks every trainable scalar.
    pub subsample: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            subsample: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` over the checked scalars.
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<GradCheckWorst>,
    /// `(analytic, numeric)` for every checked scalar, in check order.
    #[serde(skip)]
    pub pairs: Vec<(f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` returns the loss and its analytic gradient for the given
/// parameters. Only entries marked trainable are perturbed; a trainable entry
/// missing from the returned gradient map counts as an all-zero gradient.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, GradMap)>,
{
    finite_diff_check_with(&loss_fn, |p| loss_fn(p).map(|(l, _)| l), params, opts)
}

/// [`finite_diff_check`] with a separate forward-only `value_fn` for the
/// perturbed evaluations. It must compute the same loss as `loss_fn`.
pub fn finite_diff_check_with<F, V>(loss_fn: F, value_fn: V, params: &ParamSet, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(f64, GradMap)>,
    V: Fn(&ParamSet) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!("finite-difference eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let (loss, grads) = loss_fn(params)?;
    let (loss2, grads2) = loss_fn(params)?;
    if loss.to_bits() != loss2.to_bits() {
        return Err(Error::NonDeterministic(format!("loss {loss} vs {loss2} on identical parameters")));
    }
    let forward = value_fn(params)?;
    if forward.to_bits() != loss.to_bits() {
        return Err(Error::NonDeterministic(format!("forward-only loss {forward} differs from {loss}")));
    }
    for (name, g) in &grads {
        let same = grads2
            .get(name)
            .map_or(false, |g2| g.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        if !same {
            return Err(Error::NonDeterministic(format!("gradient of '{name}' differs between evaluations")));
        }
    }

    let mut candidates: Vec<(String, usize)> = Vec::new();
    for (name, entry) in params.iter().filter(|(_, e)| e.trainable) {
        candidates.extend((0..entry.tensor.len()).map(|i| (name.to_string(), i)));
    }
    if let Some(n) = opts.subsample {
        if n < candidates.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), n).into_vec();
            picked.sort_unstable();
            candidates = picked.into_iter().map(|i| candidates[i].clone()).collect();
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
        pairs: Vec::new(),
    };
    let mut probe = params.clone();
    for (name, index) in candidates {
        let original = params.require(&name)?.data()[index];
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[index]);

        probe.get_mut(&name).unwrap().data_mut()[index] = original + opts.eps;
        let plus = value_fn(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[index] = original - opts.eps;
        let minus = value_fn(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[index] = original;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        report.pairs.push((analytic, numeric));
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(GradCheckWorst {
                param: name,
                index,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}
