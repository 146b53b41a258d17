//! Model input: a batch of imputed visit matrices laid out time-major.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// `steps[t]` is the `N x F` matrix of visit `t` across the batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub steps: Vec<Array2<f64>>,
    /// `N x 1` labels when known.
    pub labels: Option<Array2<f64>>,
    pub ids: Vec<usize>,
}

impl Batch {
    /// Builds a batch from per-patient `T x F` matrices. Missing cells are
    /// encoded as NaN and rejected.
    pub fn from_matrices(
        matrices: &[&Array2<f64>],
        labels: Option<&[f64]>,
        ids: Vec<usize>,
    ) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (t, f) = first.dim();
        if t == 0 {
            return Err(Error::Data("patient with zero visits".into()));
        }
        for m in matrices {
            if m.dim() != (t, f) {
                return Err(Error::shape("batch", (t, f), m.dim()));
            }
            if m.iter().any(|v| v.is_nan()) {
                return Err(Error::Data("missing marker in model input; impute first".into()));
            }
        }
        let n = matrices.len();
        let mut steps = vec![Array2::zeros((n, f)); t];
        for (i, m) in matrices.iter().enumerate() {
            for (step, row) in steps.iter_mut().zip(m.rows()) {
                step.row_mut(i).assign(&row);
            }
        }
        let labels = match labels {
            Some(y) => {
                if y.len() != n {
                    return Err(Error::shape("labels", (n, 1), (y.len(), 1)));
                }
                Some(Array2::from_shape_vec((n, 1), y.to_vec()).expect("n x 1"))
            }
            None => None,
        };
        if ids.len() != n {
            return Err(Error::Contract("batch id count differs from patient count".into()));
        }
        Ok(Self { steps, labels, ids })
    }

    pub fn single(x: &Array2<f64>) -> Result<Self> {
        Self::from_matrices(&[x], None, vec![0])
    }

    pub fn len(&self) -> usize {
        self.steps.first().map_or(0, |s| s.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visits(&self) -> usize {
        self.steps.len()
    }

    pub fn features(&self) -> usize {
        self.steps.first().map_or(0, |s| s.ncols())
    }

    /// The `T x F` matrix of patient `i`.
    pub fn patient(&self, i: usize) -> Array2<f64> {
        let rows: Vec<_> = self.steps.iter().map(|s| s.row(i)).collect();
        ndarray::stack(Axis(0), &rows).expect("rows share a length")
    }
}

/// Imputed patients with labels, addressed by position.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Vec<Array2<f64>>,
    pub y: Vec<f64>,
    pub ids: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Vec<Array2<f64>>, y: Vec<f64>, ids: Vec<usize>) -> Result<Self> {
        if x.len() != y.len() || x.len() != ids.len() {
            return Err(Error::Contract("labeled set columns differ in length".into()));
        }
        Ok(Self { x, y, ids })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.first().map_or(0, |m| m.ncols())
    }

    /// Batch of the patients at positions `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let xs: Vec<&Array2<f64>> = idx.iter().map(|&i| &self.x[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
        Batch::from_matrices(&xs, Some(&ys), idx.iter().map(|&i| self.ids[i]).collect())
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1.0).count()
    }
}
