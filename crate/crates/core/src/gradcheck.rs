//! Central finite-difference checks of parameter gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so that two gradients that
/// are both numerically zero compare equal.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks `count` distinct `(param, flat index)` entries uniformly over all
/// scalars of the given parameters.
pub fn sample_entries<R: Rng + ?Sized>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    count: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let sizes: Vec<usize> = ids.iter().map(|&id| store.value(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(ParamId, usize)> = sample(rng, total, count.min(total))
        .into_iter()
        .map(|mut flat| {
            let mut k = 0;
            while flat >= sizes[k] {
                flat -= sizes[k];
                k += 1;
            }
            (ids[k], flat)
        })
        .collect();
    picks.sort();
    picks
}

/// Compares `analytic` gradients against central differences of `loss` at
/// the sampled entries. The store is restored before returning.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    analytic: &[(ParamId, Tensor<f64>)],
    picks: &[(ParamId, usize)],
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for &(id, idx) in picks {
        if idx >= store.value(id).numel() {
            return Err(Error::InvalidArgument(format!("index {idx} out of range for {}", store.get(id).name)));
        }
        let a = analytic.iter().find(|(pid, _)| *pid == id).map_or(0.0, |(_, g)| g.data()[idx]);
        let orig = store.value(id).data()[idx];
        store.value_mut(id).data_mut()[idx] = orig + step;
        let plus = loss(store);
        store.value_mut(id).data_mut()[idx] = orig - step;
        let minus = loss(store);
        store.value_mut(id).data_mut()[idx] = orig;
        let n = (plus? - minus?) / (2.0 * step);
        let err = relative_error(a, n, floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((store.get(id).name.clone(), idx, a, n));
        }
    }
    Ok(report)
}
