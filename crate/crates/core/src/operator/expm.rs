use nalgebra::{DVector, SymmetricEigen};
use num_complex::Complex64;

use super::{CMatrix, HermitianMatrix, UnitaryMatrix};
use crate::error::{Error, Result};

/// Eigenvalue gaps below this are treated as degenerate in the divided
/// differences of the exponential.
pub const DEGENERACY_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 10_000;

/// Spectral decomposition `H = V diag(lambda) V†`.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    values: DVector<f64>,
    vectors: CMatrix,
}

impl HermitianEigen {
    pub fn new(h: &HermitianMatrix) -> Result<Self> {
        let m = h.matrix().clone();
        let norm = m.norm();
        let dim = m.nrows();
        let eig =
            SymmetricEigen::try_new(m, f64::EPSILON, MAX_SWEEPS).ok_or(Error::NoConvergence {
                operation: "Hermitian eigendecomposition",
                dim,
                norm,
            })?;
        Ok(Self {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
        })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn vectors(&self) -> &CMatrix {
        &self.vectors
    }

    fn phases(&self, s: f64) -> Vec<Complex64> {
        self.values
            .iter()
            .map(|l| Complex64::from_polar(1.0, -s * l))
            .collect()
    }

    /// `exp(-i s H)`.
    pub fn exp(&self, s: f64) -> CMatrix {
        let phases = self.phases(s);
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= phases[k];
        }
        scaled * self.vectors.adjoint()
    }

    /// Derivative of `exp(-i s (H + eps E))` at `eps = 0` (Daleckii-Krein).
    pub fn exp_derivative(&self, e: &CMatrix, s: f64) -> CMatrix {
        let n = self.values.len();
        let phases = self.phases(s);
        let v = &self.vectors;
        let mut inner = v.adjoint() * e * v;
        for l in 0..n {
            for k in 0..n {
                let gap = self.values[k] - self.values[l];
                let phi = if gap.abs() < DEGENERACY_TOL {
                    Complex64::new(0.0, -s) * phases[k]
                } else {
                    (phases[k] - phases[l]) / gap
                };
                inner[(k, l)] *= phi;
            }
        }
        v * inner * v.adjoint()
    }
}

/// `exp(-i s h)` via the eigendecomposition of `h`.
pub fn expm_hermitian(h: &HermitianMatrix, s: f64) -> Result<UnitaryMatrix> {
    Ok(UnitaryMatrix::from_unchecked(h.eigen()?.exp(s)))
}

/// Directional derivative of `exp(-i s (h + eps e))` at `eps = 0`.
pub fn expm_directional_derivative(
    h: &HermitianMatrix,
    e: &HermitianMatrix,
    s: f64,
) -> Result<CMatrix> {
    if h.dim() != e.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            found: e.dim(),
        });
    }
    Ok(h.eigen()?.exp_derivative(e.matrix(), s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{max_abs_diff, pauli};
    use crate::rng::Streams;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_hermitian(d: usize, seed: u64) -> HermitianMatrix {
        let mut rng = Streams::new(seed).stream(0);
        let a = CMatrix::from_fn(d, d, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        HermitianMatrix::from_hermitian_part(&a)
    }

    #[test]
    fn diagonal_generator() {
        let z = HermitianMatrix::new(pauli::z()).unwrap();
        let u = expm_hermitian(&z, FRAC_PI_2).unwrap();
        let expect = CMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(0.0, -1.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 1.0),
            ],
        );
        assert!(max_abs_diff(u.matrix(), &expect) < 1e-15);
    }

    #[test]
    fn zero_time_is_identity() {
        let h = random_hermitian(4, 1);
        let u = expm_hermitian(&h, 0.0).unwrap();
        assert!(max_abs_diff(u.matrix(), &CMatrix::identity(4, 4)) < 1e-14);
    }

    #[test]
    fn inverse_and_unitarity() {
        for seed in 0..10 {
            let h = random_hermitian(5, seed);
            let u = expm_hermitian(&h, 0.7).unwrap();
            let v = expm_hermitian(&h, -0.7).unwrap();
            assert!(max_abs_diff(&(u.matrix() * v.matrix()), &CMatrix::identity(5, 5)) < 1e-10);
            assert!(u.unitarity_defect() < 1e-10);
        }
    }

    #[test]
    fn composition() {
        let h = random_hermitian(4, 9);
        let a = expm_hermitian(&h, 0.3).unwrap();
        let b = expm_hermitian(&h, 1.1).unwrap();
        let ab = expm_hermitian(&h, 1.4).unwrap();
        assert!(max_abs_diff(a.mul(&b).matrix(), ab.matrix()) < 1e-10);
    }

    #[test]
    fn commuting_direction() {
        let z = HermitianMatrix::new(pauli::z()).unwrap();
        let t = 0.83;
        let d = expm_directional_derivative(&z, &z, t).unwrap();
        // [h, e] = 0 gives -i t e exp(-i t h).
        let expect = z.matrix() * expm_hermitian(&z, t).unwrap().matrix() * Complex64::new(0.0, -t);
        assert!(max_abs_diff(&d, &expect) < 1e-14);
    }

    #[test]
    fn zero_direction() {
        let h = random_hermitian(3, 4);
        let d = expm_directional_derivative(&h, &HermitianMatrix::zeros(3), 0.9).unwrap();
        assert!(d.norm() == 0.0);
    }

    #[test]
    fn matches_central_finite_difference() {
        let eps = 1e-6;
        for seed in 0..5 {
            let h = random_hermitian(4, seed);
            let e = random_hermitian(4, seed + 100);
            let s = 1.3;
            let plus = expm_hermitian(&h.add_scaled(&e, eps).unwrap(), s).unwrap();
            let minus = expm_hermitian(&h.add_scaled(&e, -eps).unwrap(), s).unwrap();
            let fd = (plus.matrix() - minus.matrix()).unscale(2.0 * eps);
            let exact = expm_directional_derivative(&h, &e, s).unwrap();
            assert!(max_abs_diff(&fd, &exact) < 1e-8);
        }
    }

    #[test]
    fn degenerate_spectrum_uses_limit() {
        // h has a doubly degenerate eigenvalue; compare against finite differences.
        let h = HermitianMatrix::new(CMatrix::from_diagonal(&DVector::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(-2.0, 0.0),
        ])))
        .unwrap();
        let e = random_hermitian(3, 77);
        let eps = 1e-6;
        let fd = (expm_hermitian(&h.add_scaled(&e, eps).unwrap(), 0.6)
            .unwrap()
            .matrix()
            - expm_hermitian(&h.add_scaled(&e, -eps).unwrap(), 0.6)
                .unwrap()
                .matrix())
        .unscale(2.0 * eps);
        let exact = expm_directional_derivative(&h, &e, 0.6).unwrap();
        assert!(max_abs_diff(&fd, &exact) < 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn derivative_is_linear(seed in 0u64..500, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let h = random_hermitian(3, seed);
            let e1 = random_hermitian(3, seed + 1000);
            let e2 = random_hermitian(3, seed + 2000);
            let combo = e1.scale(alpha).add_scaled(&e2, beta).unwrap();
            let lhs = expm_directional_derivative(&h, &combo, 0.8).unwrap();
            let rhs = expm_directional_derivative(&h, &e1, 0.8).unwrap() * Complex64::new(alpha, 0.0)
                + expm_directional_derivative(&h, &e2, 0.8).unwrap() * Complex64::new(beta, 0.0);
            proptest::prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
        }

        #[test]
        fn exp_composes(seed in 0u64..500, s1 in -2.0f64..2.0, s2 in -2.0f64..2.0) {
            let h = random_hermitian(4, seed);
            let a = expm_hermitian(&h, s1).unwrap();
            let b = expm_hermitian(&h, s2).unwrap();
            let ab = expm_hermitian(&h, s1 + s2).unwrap();
            proptest::prop_assert!(max_abs_diff(a.mul(&b).matrix(), ab.matrix()) < 1e-10);
        }
    }
}
