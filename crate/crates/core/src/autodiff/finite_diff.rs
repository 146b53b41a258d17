use ndarray::Array2;

use super::GradientMap;
use crate::error::Result;
use crate::params::{ParamId, ParameterStore};

/// Central-difference gradient of `loss_fn` with respect to every scalar
/// of the parameters in `ids`.
pub fn finite_difference<F>(
    mut loss_fn: F,
    store: &ParameterStore,
    ids: &[ParamId],
    eps: f64,
) -> Result<GradientMap>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work = store.clone();
    let mut out = GradientMap::new();
    for &id in ids {
        let (rows, cols) = store.get(id).dim();
        let mut grad = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(id)[[r, c]];
                work.get_mut(id)[[r, c]] = orig + eps;
                let plus = loss_fn(&work)?;
                work.get_mut(id)[[r, c]] = orig - eps;
                let minus = loss_fn(&work)?;
                work.get_mut(id)[[r, c]] = orig;
                grad[[r, c]] = (plus - minus) / (2.0 * eps);
            }
        }
        out.insert(id, grad);
    }
    Ok(out)
}

/// `max |a - b| / max(1, |b|)` over all shared entries, with `b` the
/// reference map.
pub fn max_relative_error(a: &GradientMap, b: &GradientMap) -> f64 {
    let mut worst = 0.0f64;
    for (id, gb) in b.iter() {
        let Some(ga) = a.get(id) else {
            return f64::INFINITY;
        };
        for (x, y) in ga.iter().zip(gb.iter()) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    worst
}
