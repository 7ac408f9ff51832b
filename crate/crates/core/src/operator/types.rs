use nalgebra::DVector;
use num_complex::Complex64;

use super::{max_abs_diff, spectral_norm, trace, CMatrix, CVector, HermitianEigen};
use crate::error::{Error, Result};

const HERMITIAN_TOL: f64 = 1e-12;
const UNITARY_TOL: f64 = 1e-10;
const NORM_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-12;
const POSITIVITY_TOL: f64 = 1e-10;

fn check_square(m: &CMatrix) -> Result<usize> {
    let (r, c) = m.shape();
    if r != c {
        return Err(Error::DimensionMismatch {
            expected: r,
            found: c,
        });
    }
    if r == 0 {
        return Err(Error::InvalidDimension {
            dim: 0,
            reason: "matrix must be non-empty",
        });
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix {
    m: CMatrix,
}

impl HermitianMatrix {
    /// Validates `m = m†` entrywise within 1e-12.
    pub fn new(m: CMatrix) -> Result<Self> {
        check_square(&m)?;
        let deviation = max_abs_diff(&m, &m.adjoint());
        if deviation > HERMITIAN_TOL {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(Self { m })
    }

    /// Like [`HermitianMatrix::new`] but additionally requires `|Tr m| <= 1e-12`.
    pub fn traceless(m: CMatrix) -> Result<Self> {
        let h = Self::new(m)?;
        let tr = trace(&h.m).norm();
        if tr > TRACE_TOL {
            return Err(Error::NotTraceless { trace: tr });
        }
        Ok(h)
    }

    /// Takes the Hermitian part `(m + m†)/2` without validation. For matrices
    /// that are Hermitian up to roundoff by construction.
    pub fn from_hermitian_part(m: &CMatrix) -> Self {
        Self {
            m: (m + m.adjoint()).unscale(2.0),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            m: CMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn trace(&self) -> f64 {
        trace(&self.m).re
    }

    pub fn is_traceless(&self) -> bool {
        trace(&self.m).norm() <= TRACE_TOL
    }

    /// `self + coef * other`.
    pub fn add_scaled(&self, other: &HermitianMatrix, coef: f64) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(Self {
            m: &self.m + other.m.scale(coef),
        })
    }

    pub fn scale(&self, coef: f64) -> Self {
        Self {
            m: self.m.scale(coef),
        }
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn eigen(&self) -> Result<HermitianEigen> {
        HermitianEigen::new(self)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let mut v: Vec<f64> = self.eigen()?.values().iter().cloned().collect();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }

    /// Largest eigenvalue modulus.
    pub fn spectral_norm(&self) -> Result<f64> {
        Ok(self
            .eigenvalues()?
            .into_iter()
            .fold(0.0, |a, x: f64| a.max(x.abs())))
    }

    /// Hilbert-Schmidt norm.
    pub fn hs_norm(&self) -> f64 {
        self.m.norm()
    }

    /// `U† self U`.
    pub fn conjugate_by(&self, u: &UnitaryMatrix) -> Self {
        Self::from_hermitian_part(&(u.matrix().adjoint() * &self.m * u.matrix()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryMatrix {
    m: CMatrix,
}

impl UnitaryMatrix {
    /// Validates `U†U = 1` within 1e-10 in operator norm.
    pub fn new(m: CMatrix) -> Result<Self> {
        let d = check_square(&m)?;
        let dev = m.adjoint() * &m - CMatrix::identity(d, d);
        let frob = dev.norm();
        if frob > UNITARY_TOL {
            let op = spectral_norm(&dev);
            if op > UNITARY_TOL {
                return Err(Error::NotUnitary { deviation: op });
            }
        }
        Ok(Self { m })
    }

    /// Wraps a matrix that is unitary by construction.
    pub(crate) fn from_unchecked(m: CMatrix) -> Self {
        Self { m }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: CMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn into_matrix(self) -> CMatrix {
        self.m
    }

    pub fn adjoint(&self) -> Self {
        Self {
            m: self.m.adjoint(),
        }
    }

    /// `self * rhs`.
    pub fn mul(&self, rhs: &UnitaryMatrix) -> Self {
        Self {
            m: &self.m * &rhs.m,
        }
    }

    /// Operator-norm distance of `U†U` from the identity.
    pub fn unitarity_defect(&self) -> f64 {
        let d = self.dim();
        spectral_norm(&(self.m.adjoint() * &self.m - CMatrix::identity(d, d)))
    }

    pub fn apply(&self, psi: &PureState) -> PureState {
        PureState {
            v: &self.m * &psi.v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    v: CVector,
}

impl PureState {
    /// Validates unit l2 norm within 1e-12.
    pub fn new(v: CVector) -> Result<Self> {
        if v.len() == 0 {
            return Err(Error::InvalidDimension {
                dim: 0,
                reason: "state must be non-empty",
            });
        }
        let norm = v.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized { norm });
        }
        Ok(Self { v })
    }

    /// Normalizes `v`; fails on the zero vector.
    pub fn normalized(v: CVector) -> Result<Self> {
        let norm = v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NotNormalized { norm });
        }
        Ok(Self { v: v.unscale(norm) })
    }

    /// Computational basis state `|k>`.
    pub fn basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::IndexOutOfRange {
                index: k,
                max: dim.saturating_sub(1),
            });
        }
        let mut v = CVector::zeros(dim);
        v[k] = Complex64::new(1.0, 0.0);
        Ok(Self { v })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn amplitudes(&self) -> &CVector {
        &self.v
    }

    pub fn norm(&self) -> f64 {
        self.v.norm()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &PureState) -> Complex64 {
        self.v.dotc(&other.v)
    }

    /// `e^{i theta} |self>`.
    pub fn with_phase(&self, theta: f64) -> Self {
        Self {
            v: self.v.map(|z| z * Complex64::from_polar(1.0, theta)),
        }
    }

    pub fn projector(&self) -> CMatrix {
        &self.v * self.v.adjoint()
    }

    pub fn density_matrix(&self) -> DensityMatrix {
        DensityMatrix {
            m: HermitianMatrix::from_hermitian_part(&self.projector()),
        }
    }

    /// `<self| A |self>` for Hermitian `A`.
    pub fn expectation(&self, a: &HermitianMatrix) -> f64 {
        self.v.dotc(&(a.matrix() * &self.v)).re
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: HermitianMatrix,
}

impl DensityMatrix {
    /// Validates hermiticity, unit trace and eigenvalues >= -1e-10.
    pub fn new(m: CMatrix) -> Result<Self> {
        let h = HermitianMatrix::new(m)?;
        let tr = trace(h.matrix());
        if (tr - Complex64::new(1.0, 0.0)).norm() > TRACE_TOL {
            return Err(Error::InvalidDensityMatrix(format!("trace {tr} != 1")));
        }
        let min = h.eigenvalues()?.first().cloned().unwrap_or(0.0);
        if min < -POSITIVITY_TOL {
            return Err(Error::InvalidDensityMatrix(format!(
                "negative eigenvalue {min:.3e}"
            )));
        }
        Ok(Self { m: h })
    }

    /// Hermitian, unit-trace operator that may have negative eigenvalues.
    /// Used for raw linear reconstructions.
    pub(crate) fn from_hermitian_unchecked(m: HermitianMatrix) -> Self {
        Self { m }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            m: HermitianMatrix {
                m: CMatrix::identity(dim, dim).unscale(dim as f64),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn matrix(&self) -> &CMatrix {
        self.m.matrix()
    }

    pub fn hermitian(&self) -> &HermitianMatrix {
        &self.m
    }

    /// `Tr{rho A}`.
    pub fn expectation(&self, a: &HermitianMatrix) -> f64 {
        self.m
            .matrix()
            .iter()
            .zip(a.matrix().transpose().iter())
            .map(|(x, y)| x * y)
            .sum::<Complex64>()
            .re
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.m.eigenvalues()?.first().cloned().unwrap_or(0.0))
    }

    pub fn is_positive(&self) -> Result<bool> {
        Ok(self.min_eigenvalue()? >= -POSITIVITY_TOL)
    }

    /// `U rho U†`.
    pub fn evolve(&self, u: &UnitaryMatrix) -> Self {
        Self {
            m: HermitianMatrix::from_hermitian_part(
                &(u.matrix() * self.m.matrix() * u.matrix().adjoint()),
            ),
        }
    }

    /// Clips negative eigenvalues to zero and renormalizes the trace.
    pub fn positivity_repaired(&self) -> Result<Self> {
        let eig = self.m.eigen()?;
        let clipped: DVector<f64> = eig.values().map(|x| x.max(0.0));
        let total: f64 = clipped.sum();
        if !(total > 0.0) {
            return Err(Error::InvalidDensityMatrix(
                "no positive spectral weight to renormalize".into(),
            ));
        }
        let v = eig.vectors();
        let diag = CMatrix::from_diagonal(&clipped.map(|x| Complex64::new(x / total, 0.0)));
        Ok(Self {
            m: HermitianMatrix::from_hermitian_part(&(v * diag * v.adjoint())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::pauli;

    #[test]
    fn hermitian_validation() {
        assert!(HermitianMatrix::new(pauli::y()).is_ok());
        let mut bad = pauli::x();
        bad[(0, 1)] = Complex64::new(1.0, 0.5);
        assert!(matches!(
            HermitianMatrix::new(bad),
            Err(Error::NotHermitian { .. })
        ));
        assert!(matches!(
            HermitianMatrix::traceless(pauli::identity()),
            Err(Error::NotTraceless { .. })
        ));
    }

    #[test]
    fn unitary_validation() {
        assert!(UnitaryMatrix::new(pauli::x()).is_ok());
        assert!(matches!(
            UnitaryMatrix::new(pauli::x().scale(1.1)),
            Err(Error::NotUnitary { .. })
        ));
    }

    #[test]
    fn density_matrix_checks() {
        assert!(DensityMatrix::new(pauli::identity().unscale(2.0)).is_ok());
        let neg = CMatrix::from_diagonal(&CVector::from_vec(vec![
            Complex64::new(1.5, 0.0),
            Complex64::new(-0.5, 0.0),
        ]));
        assert!(DensityMatrix::new(neg.clone()).is_err());
        let raw = DensityMatrix::from_hermitian_unchecked(HermitianMatrix::new(neg).unwrap());
        let fixed = raw.positivity_repaired().unwrap();
        assert!((fixed.matrix()[(0, 0)].re - 1.0).abs() < 1e-12);
        assert!(fixed.is_positive().unwrap());
    }

    #[test]
    fn pure_state_basics() {
        let psi = PureState::normalized(CVector::from_vec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ]))
        .unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-15);
        assert!(PureState::new(CVector::from_vec(vec![Complex64::new(2.0, 0.0)])).is_err());
        let rho = psi.density_matrix();
        let y = HermitianMatrix::new(pauli::y()).unwrap();
        assert!((rho.expectation(&y) - psi.expectation(&y)).abs() < 1e-15);
        assert!((psi.expectation(&y) - 1.0).abs() < 1e-15);
    }
}
