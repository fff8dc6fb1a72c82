use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Per-column affine input normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations; near-constant columns keep unit scale.
    pub fn fit(data: &Matrix) -> Result<Self> {
        if data.rows() == 0 {
            return Err(Error::Shape("cannot fit a standardizer on zero rows".into()));
        }
        let n = data.rows() as f64;
        let mut mean = vec![0.0; data.cols()];
        for row in data.iter_rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; data.cols()];
        for row in data.iter_rows() {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &Matrix) -> Result<Matrix> {
        if data.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "standardizer expects {} columns, got {}",
                self.dim(),
                data.cols()
            )));
        }
        let mut out = data.clone();
        for r in 0..out.rows() {
            for ((x, &m), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }
}
