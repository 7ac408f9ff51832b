use num_complex::Complex64;

use super::{CMatrix, HermitianMatrix, I, ONE};
use crate::error::{Error, Result};

/// `<A, B> = Tr{A† B}`.
pub fn hs_inner(a: &CMatrix, b: &CMatrix) -> Result<Complex64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum())
}

/// Orthonormal basis of traceless Hermitian operators on a `d`-level system.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorBasis {
    dim: usize,
    elements: Vec<HermitianMatrix>,
    // Nonzero entries of each element as (column-major index, conjugated value).
    support: Vec<Vec<(usize, Complex64)>>,
}

impl OperatorBasis {
    fn from_elements(dim: usize, elements: Vec<HermitianMatrix>) -> Self {
        let support = elements
            .iter()
            .map(|b| {
                b.matrix()
                    .iter()
                    .enumerate()
                    .filter(|(_, z)| z.norm() > 0.0)
                    .map(|(k, z)| (k, z.conj()))
                    .collect()
            })
            .collect();
        Self {
            dim,
            elements,
            support,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of elements, `d^2 - 1`.
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[HermitianMatrix] {
        &self.elements
    }

    pub fn element(&self, m: usize) -> &HermitianMatrix {
        &self.elements[m]
    }

    /// Real expansion coefficients `Re <B_m, X>` of a Hermitian operator.
    pub fn coefficients(&self, x: &CMatrix) -> Result<Vec<f64>> {
        if x.nrows() != self.dim || x.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.nrows(),
            });
        }
        // <B, X> = sum_ij conj(B[i,j]) X[i,j]; real when both are Hermitian.
        let xs = x.as_slice();
        Ok(self
            .support
            .iter()
            .map(|entries| entries.iter().map(|(k, b)| (b * xs[*k]).re).sum())
            .collect())
    }

    /// `sum_m c_m B_m`.
    pub fn resum(&self, coeffs: &[f64]) -> Result<CMatrix> {
        if coeffs.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: coeffs.len(),
            });
        }
        let mut out = CMatrix::zeros(self.dim, self.dim);
        for (c, b) in coeffs.iter().zip(&self.elements) {
            out += b.matrix().scale(*c);
        }
        Ok(out)
    }

    /// Gram matrix `G[m][n] = <B_m, B_n>`.
    pub fn gram(&self) -> Vec<Vec<Complex64>> {
        self.elements
            .iter()
            .map(|a| {
                self.elements
                    .iter()
                    .map(|b| hs_inner(a.matrix(), b.matrix()).expect("equal dims"))
                    .collect()
            })
            .collect()
    }
}

/// Normalized generalized Gell-Mann matrices.
///
/// Ordering: symmetric off-diagonal pairs `(j,k)`, `j < k`, row-major; then
/// the antisymmetric pairs in the same order; then the `d - 1` diagonal
/// elements. Every element has unit Hilbert-Schmidt norm, so `d = 2` gives
/// the Pauli matrices divided by `sqrt 2`.
pub fn gell_mann_basis(d: usize) -> Result<OperatorBasis> {
    if d < 2 {
        return Err(Error::InvalidDimension {
            dim: d,
            reason: "operator basis needs d >= 2",
        });
    }
    let r2 = std::f64::consts::SQRT_2;
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|j| (j + 1..d).map(move |k| (j, k)))
        .collect();
    let mut elements = Vec::with_capacity(d * d - 1);
    for &(j, k) in &pairs {
        let mut m = CMatrix::zeros(d, d);
        m[(j, k)] = ONE / r2;
        m[(k, j)] = ONE / r2;
        elements.push(HermitianMatrix::from_hermitian_part(&m));
    }
    for &(j, k) in &pairs {
        let mut m = CMatrix::zeros(d, d);
        m[(j, k)] = -I / r2;
        m[(k, j)] = I / r2;
        elements.push(HermitianMatrix::from_hermitian_part(&m));
    }
    for l in 1..d {
        let norm = ((l * (l + 1)) as f64).sqrt();
        let mut m = CMatrix::zeros(d, d);
        for k in 0..l {
            m[(k, k)] = ONE / norm;
        }
        m[(l, l)] = -(l as f64) * ONE / norm;
        elements.push(HermitianMatrix::from_hermitian_part(&m));
    }
    Ok(OperatorBasis::from_elements(d, elements))
}
