use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::CMatrix;
use crate::error::{Error, Result};

/// Row-major matrix exchange format `{"dim": d, "re": [[..]], "im": [[..]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub dim: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl MatrixJson {
    pub fn from_matrix(m: &CMatrix) -> Self {
        let d = m.nrows();
        let rows = |f: fn(&Complex64) -> f64| -> Vec<Vec<f64>> {
            (0..d)
                .map(|i| (0..d).map(|j| f(&m[(i, j)])).collect())
                .collect()
        };
        Self {
            dim: d,
            re: rows(|z| z.re + 0.0),
            im: rows(|z| z.im + 0.0),
        }
    }

    pub fn to_matrix(&self) -> Result<CMatrix> {
        let d = self.dim;
        let check = |rows: &Vec<Vec<f64>>| -> Result<()> {
            if rows.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: rows.len(),
                });
            }
            for r in rows {
                if r.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: r.len(),
                    });
                }
            }
            Ok(())
        };
        check(&self.re)?;
        check(&self.im)?;
        Ok(CMatrix::from_fn(d, d, |i, j| {
            Complex64::new(self.re[i][j], self.im[i][j])
        }))
    }

    pub fn from_path(path: &std::path::Path) -> Result<CMatrix> {
        let text = std::fs::read_to_string(path)?;
        let parsed: MatrixJson = serde_json::from_str(&text)?;
        parsed.to_matrix()
    }
}
