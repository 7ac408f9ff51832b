use rand::Rng;
use rand_distr::StandardNormal;

use super::{CMatrix, CVector, PureState, UnitaryMatrix};
use crate::error::{Error, Result};
use num_complex::Complex64;

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im)
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidDimension {
            dim: d,
            reason: "Haar sampling needs d >= 2",
        });
    }
    Ok(())
}

/// Haar-distributed unitary from the QR factorization of a complex Ginibre
/// matrix, with the phases of `diag(R)` moved into `Q`.
pub fn haar_unitary<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<UnitaryMatrix> {
    check_dim(d)?;
    // Entries are drawn row-major so the stream consumption does not depend
    // on storage order.
    let mut entries = Vec::with_capacity(d * d);
    for _ in 0..d * d {
        entries.push(complex_gaussian(rng));
    }
    let z = CMatrix::from_row_slice(d, d, &entries);
    let qr = z.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (k, mut col) in q.column_iter_mut().enumerate() {
        let rkk = r[(k, k)];
        let norm = rkk.norm();
        if norm > 0.0 {
            col *= rkk / norm;
        }
    }
    Ok(UnitaryMatrix::from_unchecked(q))
}

/// Uniform point on the unit sphere of `C^d`.
pub fn haar_state<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<PureState> {
    check_dim(d)?;
    let v = CVector::from_iterator(d, (0..d).map(|_| complex_gaussian(rng)));
    PureState::normalized(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::max_abs_diff;
    use crate::rng::Streams;

    #[test]
    fn samples_are_unitary_and_deterministic() {
        let s = Streams::new(5);
        let mut rng = s.stream(0);
        for _ in 0..200 {
            let u = haar_unitary(4, &mut rng).unwrap();
            assert!(u.unitarity_defect() < 1e-10);
        }
        let a = haar_unitary(3, &mut s.stream(9)).unwrap();
        let b = haar_unitary(3, &mut s.stream(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_small_dimension() {
        let mut rng = Streams::new(0).stream(0);
        assert!(haar_unitary(1, &mut rng).is_err());
        assert!(haar_state(0, &mut rng).is_err());
    }

    #[test]
    fn states_are_normalized() {
        let mut rng = Streams::new(1).stream(0);
        for d in 2..8 {
            let psi = haar_state(d, &mut rng).unwrap();
            assert!((psi.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn first_column_matches_projector_mean() {
        // A Haar unitary's first column is a Haar state: same mean projector.
        let mut rng = Streams::new(2).stream(0);
        let n = 20_000;
        let mut acc = CMatrix::zeros(3, 3);
        for _ in 0..n {
            let u = haar_unitary(3, &mut rng).unwrap();
            let c = u.matrix().column(0).into_owned();
            acc += &c * c.adjoint();
        }
        acc.unscale_mut(n as f64);
        assert!(max_abs_diff(&acc, &CMatrix::identity(3, 3).unscale(3.0)) < 1e-2);
    }
}
