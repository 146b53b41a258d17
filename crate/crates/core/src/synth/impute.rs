use ndarray::Array2;

use crate::error::{Error, Result};

/// Last observation carried forward along each column; cells before the
/// first observation take `defaults[j]`.
pub fn locf_impute(x: &Array2<f64>, defaults: &[f64]) -> Result<Array2<f64>> {
    if defaults.len() != x.ncols() {
        return Err(Error::shape("locf defaults", (1, x.ncols()), (1, defaults.len())));
    }
    let mut out = x.clone();
    for (mut col, &d) in out.columns_mut().into_iter().zip(defaults) {
        let mut last = d;
        for v in col.iter_mut() {
            if v.is_nan() {
                *v = last;
            } else {
                last = *v;
            }
        }
    }
    Ok(out)
}

/// Mean of the observed cells of each feature over `matrices`; features
/// never observed get 0.
pub fn feature_means<'a>(matrices: impl IntoIterator<Item = &'a Array2<f64>>, features: usize) -> Vec<f64> {
    let mut sum = vec![0.0; features];
    let mut count = vec![0usize; features];
    for m in matrices {
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                if !v.is_nan() {
                    sum[j] += v;
                    count[j] += 1;
                }
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}
