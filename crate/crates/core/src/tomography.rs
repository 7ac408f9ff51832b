//! Single-observable state tomography.
//!
//! The expectation values of one observable `M` recorded at sample times
//! `t_n` are linear in the Bloch vector of the initial state,
//! `y = Mmap x`, with `Mmap[n][m] = <B_m, U_{t_n}† M U_{t_n}>`. When `Mmap`
//! is invertible the record is informationally complete.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{lie_closure, propagate, ControlSystem, RandomFieldSpec, Trajectory};
use crate::error::{Error, Result};
use crate::operator::{
    gell_mann_basis, DensityMatrix, HermitianMatrix, OperatorBasis, UnitaryMatrix,
};
use crate::rng::Streams;

/// `s_min > INVERTIBILITY_TOL * s_max` for a map to count as invertible.
pub const INVERTIBILITY_TOL: f64 = 1e-10;

/// Looser threshold used by the Haar-time estimator and probe retries.
pub const PROBE_INVERTIBILITY_TOL: f64 = 1e-8;

/// Coefficients of `rho - 1/d` in an orthonormal traceless basis.
#[derive(Debug, Clone, PartialEq)]
pub struct BlochVector {
    dim: usize,
    coeffs: Vec<f64>,
}

impl BlochVector {
    pub fn new(dim: usize, coeffs: Vec<f64>) -> Result<Self> {
        if dim < 2 || coeffs.len() != dim * dim - 1 {
            return Err(Error::DimensionMismatch {
                expected: dim * dim - 1,
                found: coeffs.len(),
            });
        }
        Ok(Self { dim, coeffs })
    }

    pub fn from_density(rho: &DensityMatrix, basis: &OperatorBasis) -> Result<Self> {
        Self::new(rho.dim(), basis.coefficients(rho.matrix())?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `1/d + sum x_m B_m`: Hermitian with unit trace, possibly not positive.
    pub fn to_operator(&self, basis: &OperatorBasis) -> Result<HermitianMatrix> {
        let mut m = basis.resum(&self.coeffs)?;
        for k in 0..self.dim {
            m[(k, k)] += num_complex::Complex64::new(1.0 / self.dim as f64, 0.0);
        }
        Ok(HermitianMatrix::from_hermitian_part(&m))
    }

    /// Density matrix with negative eigenvalues clipped and the trace
    /// renormalized. The Bloch vector itself is left untouched.
    pub fn to_density_matrix(&self, basis: &OperatorBasis) -> Result<DensityMatrix> {
        DensityMatrix::from_hermitian_unchecked(self.to_operator(basis)?).positivity_repaired()
    }

    /// Whether `1/d + sum x_m B_m` is positive semidefinite.
    pub fn is_physical(&self, basis: &OperatorBasis) -> Result<bool> {
        DensityMatrix::from_hermitian_unchecked(self.to_operator(basis)?).is_positive()
    }
}

/// Sample times as grid indices `k` (time `k dt`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSchedule {
    times: Vec<usize>,
}

impl SampleSchedule {
    /// Validates strict increase and at least `d^2 - 1` samples.
    pub fn new(times: Vec<usize>, dim: usize) -> Result<Self> {
        let needed = dim * dim - 1;
        if times.len() < needed {
            return Err(Error::InvalidSchedule(format!(
                "{} samples, need at least {needed}",
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSchedule(
                "times must be strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    /// `{step, 2 step, ..., count step}`.
    pub fn multiples(step: usize, count: usize, dim: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::InvalidSchedule("step must be >= 1".into()));
        }
        Self::new((1..=count).map(|k| k * step).collect(), dim)
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.times.last().expect("validated non-empty")
    }
}

/// Smallest and largest singular values of a real matrix.
pub fn singular_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sv = m.clone().svd(false, false).singular_values;
    let s_max = sv.iter().cloned().fold(0.0, f64::max);
    let s_min = if m.nrows() < m.ncols() {
        0.0
    } else {
        sv.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    (s_min, s_max)
}

/// The linear map from Bloch vectors to measurement records.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMap {
    dim: usize,
    matrix: DMatrix<f64>,
    schedule: Vec<usize>,
    s_min: f64,
    s_max: f64,
}

impl MeasurementMap {
    /// Wraps an explicit `K x (d^2-1)` matrix and computes its diagnostics.
    pub fn from_matrix(dim: usize, matrix: DMatrix<f64>, schedule: Vec<usize>) -> Result<Self> {
        if matrix.ncols() != dim * dim - 1 {
            return Err(Error::DimensionMismatch {
                expected: dim * dim - 1,
                found: matrix.ncols(),
            });
        }
        if matrix.nrows() != schedule.len() {
            return Err(Error::DimensionMismatch {
                expected: schedule.len(),
                found: matrix.nrows(),
            });
        }
        let (s_min, s_max) = singular_extremes(&matrix);
        Ok(Self {
            dim,
            matrix,
            schedule,
            s_min,
            s_max,
        })
    }

    /// Rows `<B_m, U_n† M U_n>` for an explicit list of evolutions.
    pub fn from_unitaries(
        observable: &HermitianMatrix,
        unitaries: &[&UnitaryMatrix],
        basis: &OperatorBasis,
        schedule: Vec<usize>,
    ) -> Result<Self> {
        let dim = basis.dim();
        if observable.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: observable.dim(),
            });
        }
        let cols = basis.len();
        let mut matrix = DMatrix::zeros(unitaries.len(), cols);
        for (n, u) in unitaries.iter().enumerate() {
            let row = basis.coefficients(observable.conjugate_by(u).matrix())?;
            for (m, v) in row.into_iter().enumerate() {
                matrix[(n, m)] = v;
            }
        }
        Self::from_matrix(dim, matrix, schedule)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn smallest_singular_value(&self) -> f64 {
        self.s_min
    }

    pub fn largest_singular_value(&self) -> f64 {
        self.s_max
    }

    /// `s_max / s_min` (infinite when singular).
    pub fn condition_number(&self) -> f64 {
        if self.s_min > 0.0 {
            self.s_max / self.s_min
        } else {
            f64::INFINITY
        }
    }

    /// `s_min > 1e-10 s_max`.
    pub fn is_invertible(&self) -> bool {
        self.is_invertible_at(INVERTIBILITY_TOL)
    }

    pub fn is_invertible_at(&self, rel_tol: f64) -> bool {
        self.s_min > rel_tol * self.s_max
    }

    /// `Mmap x`.
    pub fn apply(&self, x: &BlochVector) -> Result<Vec<f64>> {
        if x.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.dim(),
            });
        }
        let v = &self.matrix * DVector::from_column_slice(x.coeffs());
        Ok(v.iter().cloned().collect())
    }

    /// `Mmap^{-1}` for a square invertible map.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        if self.matrix.nrows() != self.matrix.ncols() || !self.is_invertible() {
            return Err(self.incomplete());
        }
        self.matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| self.incomplete())
    }

    fn incomplete(&self) -> Error {
        Error::NotInformationallyComplete {
            s_min: self.s_min,
            s_max: self.s_max,
        }
    }
}

/// Builds `Mmap` from a trajectory's conjugated observables at the schedule.
pub fn build_measurement_map(
    traj: &Trajectory,
    schedule: &SampleSchedule,
    basis: &OperatorBasis,
) -> Result<MeasurementMap> {
    if schedule.last() > traj.n_steps() {
        return Err(Error::InvalidSchedule(format!(
            "sample index {} beyond trajectory length {}",
            schedule.last(),
            traj.n_steps()
        )));
    }
    let us: Vec<&UnitaryMatrix> = schedule
        .times()
        .iter()
        .map(|&k| traj.unitary_at(k))
        .collect::<Result<_>>()?;
    MeasurementMap::from_unitaries(
        traj.system().observable(),
        &us,
        basis,
        schedule.times().to_vec(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    Gaussian { sigma: f64 },
    Shot { shots: u64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Gaussian { sigma } if !(sigma >= 0.0) || !sigma.is_finite() => Err(
                Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")),
            ),
            NoiseModel::Shot { shots: 0 } => {
                Err(Error::InvalidParameter("shot count must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_noiseless(&self) -> bool {
        matches!(self, NoiseModel::None | NoiseModel::Gaussian { sigma: 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub values: Vec<f64>,
    pub noise_model: NoiseModel,
    /// `y_noisy - y_exact` for simulated records.
    pub noise: Option<Vec<f64>>,
}

impl MeasurementRecord {
    /// A record taken as given (e.g. from an experiment).
    pub fn observed(values: Vec<f64>) -> Self {
        Self {
            values,
            noise_model: NoiseModel::None,
            noise: None,
        }
    }
}

/// Simulates `<M>` after each evolution `U_n` applied to `rho`.
pub fn simulate_record_from_unitaries<R: Rng + ?Sized>(
    unitaries: &[&UnitaryMatrix],
    observable: &HermitianMatrix,
    rho: &DensityMatrix,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<MeasurementRecord> {
    noise.validate()?;
    if rho.dim() != observable.dim() {
        return Err(Error::DimensionMismatch {
            expected: observable.dim(),
            found: rho.dim(),
        });
    }
    let exact: Vec<f64> = unitaries
        .iter()
        .map(|u| rho.evolve(u).expectation(observable))
        .collect();
    let noisy: Vec<f64> = match noise {
        NoiseModel::None => {
            return Ok(MeasurementRecord {
                values: exact,
                noise_model: noise,
                noise: None,
            })
        }
        NoiseModel::Gaussian { sigma } => {
            let normal =
                Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            exact.iter().map(|y| y + normal.sample(rng)).collect()
        }
        NoiseModel::Shot { shots } => {
            if !rho.is_positive()? {
                return Err(Error::InvalidDensityMatrix(
                    "shot noise needs a positive state".into(),
                ));
            }
            let eig = observable.eigen()?;
            let vecs = eig.vectors();
            let mut out = Vec::with_capacity(unitaries.len());
            for u in unitaries {
                let evolved = rho.evolve(u);
                let probs: Vec<f64> = (0..vecs.ncols())
                    .map(|i| {
                        let v = vecs.column(i);
                        (v.adjoint() * evolved.matrix() * v)[(0, 0)].re.max(0.0)
                    })
                    .collect();
                out.push(sample_shot_mean(
                    &probs,
                    eig.values().as_slice(),
                    shots,
                    rng,
                )?);
            }
            out
        }
    };
    let eps = noisy.iter().zip(&exact).map(|(a, b)| a - b).collect();
    Ok(MeasurementRecord {
        values: noisy,
        noise_model: noise,
        noise: Some(eps),
    })
}

/// Mean outcome of `shots` projective measurements, drawn as a chain of
/// conditional binomials.
fn sample_shot_mean<R: Rng + ?Sized>(
    probs: &[f64],
    outcomes: &[f64],
    shots: u64,
    rng: &mut R,
) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    let mut remaining_mass = 1.0;
    let mut remaining = shots;
    let mut acc = 0.0;
    for (i, (&p, &val)) in probs.iter().zip(outcomes).enumerate() {
        if remaining == 0 {
            break;
        }
        let p = p / total;
        let count = if i + 1 == probs.len() || remaining_mass <= p {
            remaining
        } else {
            let q = (p / remaining_mass).clamp(0.0, 1.0);
            Binomial::new(remaining, q)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?
                .sample(rng)
        };
        acc += count as f64 * val;
        remaining -= count;
        remaining_mass -= p;
    }
    Ok(acc / shots as f64)
}

/// Simulates the record of `traj`'s observable at the schedule times.
pub fn simulate_record<R: Rng + ?Sized>(
    traj: &Trajectory,
    schedule: &SampleSchedule,
    rho: &DensityMatrix,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<MeasurementRecord> {
    if schedule.last() > traj.n_steps() {
        return Err(Error::InvalidSchedule(format!(
            "sample index {} beyond trajectory length {}",
            schedule.last(),
            traj.n_steps()
        )));
    }
    let us: Vec<&UnitaryMatrix> = schedule
        .times()
        .iter()
        .map(|&k| traj.unitary_at(k))
        .collect::<Result<_>>()?;
    simulate_record_from_unitaries(&us, traj.system().observable(), rho, noise, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ReconstructionMethod {
    DirectInverse,
    LeastSquares { ridge: f64 },
}

/// Ridge scale `sigma^2 (d^2-1) / |x|^2` with `|x|^2 = 1 - 1/d`, the squared
/// Bloch norm of a pure state.
pub fn ridge_heuristic(sigma_noise: f64, dim: usize) -> f64 {
    let d = dim as f64;
    sigma_noise * sigma_noise * (d * d - 1.0) / (1.0 - 1.0 / d)
}

/// Solves `Mmap x = y` (direct) or `min |Mmap x - y|^2 + ridge |x|^2`.
pub fn reconstruct(
    map: &MeasurementMap,
    record: &MeasurementRecord,
    method: ReconstructionMethod,
) -> Result<BlochVector> {
    let k = map.matrix().nrows();
    let cols = map.matrix().ncols();
    if record.values.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: record.values.len(),
        });
    }
    let y = DVector::from_column_slice(&record.values);
    let x = match method {
        ReconstructionMethod::DirectInverse => {
            if k != cols {
                return Err(Error::InvalidSchedule(format!(
                    "direct inversion needs exactly {cols} samples, got {k}"
                )));
            }
            if !map.is_invertible() {
                return Err(map.incomplete());
            }
            map.matrix()
                .clone()
                .lu()
                .solve(&y)
                .ok_or_else(|| map.incomplete())?
        }
        ReconstructionMethod::LeastSquares { ridge } => {
            if !(ridge >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "ridge must be >= 0, got {ridge}"
                )));
            }
            if k < cols {
                return Err(Error::InvalidSchedule(format!(
                    "least squares needs at least {cols} samples, got {k}"
                )));
            }
            // Augmented system [Mmap; sqrt(ridge) I] x = [y; 0], solved by SVD.
            let (a, b) = if ridge > 0.0 {
                let mut a = DMatrix::zeros(k + cols, cols);
                a.view_mut((0, 0), (k, cols)).copy_from(map.matrix());
                for i in 0..cols {
                    a[(k + i, i)] = ridge.sqrt();
                }
                let mut b = DVector::zeros(k + cols);
                b.rows_mut(0, k).copy_from(&y);
                (a, b)
            } else {
                if !map.is_invertible() {
                    return Err(map.incomplete());
                }
                (map.matrix().clone(), y)
            };
            a.svd(true, true)
                .solve(&b, 0.0)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?
        }
    };
    BlochVector::new(map.dim(), x.iter().cloned().collect())
}

/// Euclidean distance between two Bloch vectors.
pub fn reconstruction_error(x_true: &BlochVector, x_est: &BlochVector) -> Result<f64> {
    if x_true.dim() != x_est.dim() {
        return Err(Error::DimensionMismatch {
            expected: x_true.dim(),
            found: x_est.dim(),
        });
    }
    Ok(x_true
        .coeffs()
        .iter()
        .zip(x_est.coeffs())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// JSON form `{"schedule", "y", "map", "s_min", "cond"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyJson {
    pub schedule: Vec<usize>,
    pub y: Vec<f64>,
    pub map: Vec<Vec<f64>>,
    pub s_min: f64,
    pub cond: Option<f64>,
}

impl TomographyJson {
    pub fn new(map: &MeasurementMap, record: &MeasurementRecord) -> Self {
        let m = map.matrix();
        let cond = map.condition_number();
        Self {
            schedule: map.schedule().to_vec(),
            y: record.values.clone(),
            map: (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
            s_min: map.smallest_singular_value(),
            cond: cond.is_finite().then_some(cond),
        }
    }
}

/// Result of the empirical Haar-time search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaarTimeEstimate {
    pub t_star: f64,
    pub rate: f64,
    pub doublings: usize,
}

pub const HAAR_TIME_TRIALS: usize = 50;
pub const HAAR_TIME_MAX_DOUBLINGS: usize = 20;

/// Fraction of `trials` random fields of length `(d^2-1) t` whose map,
/// sampled at multiples of `t`, has `s_min > 1e-8 s_max`.
pub fn invertibility_rate(
    system: &ControlSystem,
    sampler: &RandomFieldSpec,
    t: f64,
    trials: usize,
    streams: &Streams,
) -> Result<f64> {
    let d = system.dim();
    let count = d * d - 1;
    let basis = gell_mann_basis(d)?;
    let schedule = SampleSchedule::multiples(sampler.steps_per_segment, count, d)?;
    let mut ok = 0usize;
    for trial in 0..trials {
        let mut rng = streams.stream(trial as u64);
        let field = sampler.sample(t, count, &mut rng)?;
        let traj = propagate(system, &field)?;
        let map = build_measurement_map(&traj, &schedule, &basis)?;
        if map.is_invertible_at(PROBE_INVERTIBILITY_TOL) {
            ok += 1;
        }
    }
    Ok(ok as f64 / trials as f64)
}

/// Doubles a candidate `T*` from `1/|H0|` until random fields reach the
/// target invertibility rate over 50 trials.
pub fn estimate_haar_time(
    system: &ControlSystem,
    sampler: &RandomFieldSpec,
    streams: &Streams,
    target_rate: f64,
) -> Result<HaarTimeEstimate> {
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target rate must lie in (0, 1), got {target_rate}"
        )));
    }
    sampler.validate()?;
    let d = system.dim();
    let closure = lie_closure(system, 4 * d * d)?;
    if !closure.is_fully_controllable {
        return Err(Error::NotControllable {
            found: closure.dimension_found,
            expected: d * d - 1,
        });
    }
    let norm = system.drift().spectral_norm()?;
    let mut t = if norm > 0.0 { 1.0 / norm } else { 1.0 };
    let mut best = 0.0f64;
    for doubling in 0..=HAAR_TIME_MAX_DOUBLINGS {
        let rate = invertibility_rate(
            system,
            sampler,
            t,
            HAAR_TIME_TRIALS,
            &streams.child(doubling as u64),
        )?;
        if rate >= target_rate {
            return Ok(HaarTimeEstimate {
                t_star: t,
                rate,
                doublings: doubling,
            });
        }
        best = best.max(rate);
        t *= 2.0;
    }
    Err(Error::EstimationFailed {
        doublings: HAAR_TIME_MAX_DOUBLINGS,
        best_rate: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ControlField;
    use crate::operator::{haar_state, pauli, PureState};
    use crate::presets;

    fn h(m: crate::operator::CMatrix) -> HermitianMatrix {
        HermitianMatrix::new(m).unwrap()
    }

    fn random_traj(sys: &ControlSystem, segment_steps: usize, t: f64, seed: u64) -> Trajectory {
        let d = sys.dim();
        let spec = RandomFieldSpec {
            amplitude: 1.0,
            steps_per_segment: segment_steps,
        };
        let f = spec
            .sample(t, d * d - 1, &mut Streams::new(seed).stream(0))
            .unwrap();
        propagate(sys, &f).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(SampleSchedule::new(vec![1, 2], 2).is_err());
        assert!(SampleSchedule::new(vec![1, 3, 3], 2).is_err());
        assert_eq!(
            SampleSchedule::multiples(4, 3, 2).unwrap().times(),
            &[4, 8, 12]
        );
    }

    #[test]
    fn commuting_system_freezes_orbit() {
        let sys = ControlSystem::with_control_observable(h(pauli::z()), h(pauli::z())).unwrap();
        let f = ControlField::new(0.3, vec![0.4, -1.0, 2.0, 0.1, 0.7, -0.3]).unwrap();
        let traj = propagate(&sys, &f).unwrap();
        let basis = gell_mann_basis(2).unwrap();
        let sched = SampleSchedule::new(vec![1, 3, 6], 2).unwrap();
        let map = build_measurement_map(&traj, &sched, &basis).unwrap();
        for n in 0..3 {
            assert!(map.matrix()[(n, 0)].abs() < 1e-14);
            assert!(map.matrix()[(n, 1)].abs() < 1e-14);
            assert!((map.matrix()[(n, 2)] - std::f64::consts::SQRT_2).abs() < 1e-14);
        }
        assert!(!map.is_invertible());
    }

    #[test]
    fn xy_orbit_has_zero_z_column() {
        let sys = presets::qubit().unwrap();
        let f = ControlField::constant(0.21, 12, 0.0).unwrap();
        let traj = propagate(&sys, &f).unwrap();
        let basis = gell_mann_basis(2).unwrap();
        let sched = SampleSchedule::new(vec![2, 5, 11], 2).unwrap();
        let map = build_measurement_map(&traj, &sched, &basis).unwrap();
        for n in 0..3 {
            assert!(map.matrix()[(n, 2)].abs() < 1e-14);
        }
        assert!(!map.is_invertible());
        assert!(matches!(
            reconstruct(
                &map,
                &MeasurementRecord::observed(vec![0.0; 3]),
                ReconstructionMethod::DirectInverse
            ),
            Err(Error::NotInformationallyComplete { .. })
        ));
    }

    #[test]
    fn random_fields_are_almost_always_complete() {
        let sys = presets::qubit().unwrap();
        let basis = gell_mann_basis(2).unwrap();
        let sched = SampleSchedule::multiples(10, 3, 2).unwrap();
        let good = (0..100)
            .filter(|&seed| {
                let traj = random_traj(&sys, 10, 1.0, seed);
                build_measurement_map(&traj, &sched, &basis)
                    .unwrap()
                    .smallest_singular_value()
                    > 1e-6
            })
            .count();
        assert!(good >= 99, "{good}");
    }

    #[test]
    fn schedule_beyond_trajectory() {
        let sys = presets::qubit().unwrap();
        let traj = propagate(&sys, &ControlField::constant(0.1, 5, 0.0).unwrap()).unwrap();
        let sched = SampleSchedule::new(vec![1, 2, 6], 2).unwrap();
        assert!(build_measurement_map(&traj, &sched, &gell_mann_basis(2).unwrap()).is_err());
    }

    #[test]
    fn maximally_mixed_gives_zero_record() {
        let sys = presets::ising_chain(2, 1.0, 1.0, 0.5).unwrap();
        let traj = random_traj(&sys, 5, 1.0, 3);
        let sched = SampleSchedule::multiples(5, 15, 4).unwrap();
        let rec = simulate_record(
            &traj,
            &sched,
            &DensityMatrix::maximally_mixed(4),
            NoiseModel::None,
            &mut Streams::new(0).stream(0),
        )
        .unwrap();
        assert!(rec.values.iter().all(|y| y.abs() < 1e-14));
    }

    #[test]
    fn noiseless_record_is_map_times_bloch() {
        let sys = presets::ising_chain(2, 1.0, 1.0, 0.5).unwrap();
        let basis = gell_mann_basis(4).unwrap();
        let traj = random_traj(&sys, 5, 1.0, 4);
        let sched = SampleSchedule::multiples(5, 15, 4).unwrap();
        let map = build_measurement_map(&traj, &sched, &basis).unwrap();
        let psi = haar_state(4, &mut Streams::new(1).stream(0)).unwrap();
        let rho = psi.density_matrix();
        let x = BlochVector::from_density(&rho, &basis).unwrap();
        let rec = simulate_record(
            &traj,
            &sched,
            &rho,
            NoiseModel::None,
            &mut Streams::new(0).stream(0),
        )
        .unwrap();
        for (a, b) in rec.values.iter().zip(map.apply(&x).unwrap()) {
            assert!((a - b).abs() < 1e-11);
        }
        let est = reconstruct(&map, &rec, ReconstructionMethod::DirectInverse).unwrap();
        assert!(reconstruction_error(&x, &est).unwrap() < 1e-9);
        let ls = reconstruct(
            &map,
            &rec,
            ReconstructionMethod::LeastSquares { ridge: 0.0 },
        )
        .unwrap();
        assert!(reconstruction_error(&x, &ls).unwrap() < 1e-9);
    }

    #[test]
    fn shot_noise_within_binomial_envelope() {
        let sys = presets::qubit().unwrap();
        let traj = random_traj(&sys, 10, 1.0, 5);
        let sched = SampleSchedule::multiples(10, 3, 2).unwrap();
        let rho = PureState::basis(2, 0).unwrap().density_matrix();
        let exact = simulate_record(
            &traj,
            &sched,
            &rho,
            NoiseModel::None,
            &mut Streams::new(0).stream(0),
        )
        .unwrap();
        let shots = 10_000u64;
        // Oracle: eigenvalue spread of X is 2; sd <= spread/(2 sqrt n).
        let envelope = 5.0 * 2.0 / (shots as f64).sqrt();
        let mut within = 0;
        let total = 300;
        for trial in 0..total {
            let rec = simulate_record(
                &traj,
                &sched,
                &rho,
                NoiseModel::Shot { shots },
                &mut Streams::new(7).stream(trial),
            )
            .unwrap();
            within += rec
                .values
                .iter()
                .zip(&exact.values)
                .filter(|(a, b)| (*a - *b).abs() < envelope)
                .count();
        }
        assert!(within as f64 >= 0.99 * (3 * total) as f64);
    }

    #[test]
    fn shot_noise_rejects_non_positive_state() {
        let sys = presets::qubit().unwrap();
        let traj = random_traj(&sys, 10, 1.0, 6);
        let sched = SampleSchedule::multiples(10, 3, 2).unwrap();
        let basis = gell_mann_basis(2).unwrap();
        let bad = BlochVector::new(2, vec![2.0, 0.0, 0.0]).unwrap();
        assert!(!bad.is_physical(&basis).unwrap());
        let rho = DensityMatrix::from_hermitian_unchecked(bad.to_operator(&basis).unwrap());
        let mut rng = Streams::new(0).stream(0);
        assert!(simulate_record(
            &traj,
            &sched,
            &rho,
            NoiseModel::Shot { shots: 10 },
            &mut rng
        )
        .is_err());
        assert!(simulate_record(
            &traj,
            &sched,
            &rho,
            NoiseModel::Gaussian { sigma: 0.1 },
            &mut rng
        )
        .is_ok());
        let repaired = bad.to_density_matrix(&basis).unwrap();
        assert!(repaired.is_positive().unwrap());
        assert_eq!(bad.coeffs(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn gaussian_error_propagates_linearly() {
        let sys = presets::qubit().unwrap();
        let basis = gell_mann_basis(2).unwrap();
        let traj = random_traj(&sys, 10, 1.0, 8);
        let sched = SampleSchedule::multiples(10, 3, 2).unwrap();
        let map = build_measurement_map(&traj, &sched, &basis).unwrap();
        let rho = PureState::basis(2, 1).unwrap().density_matrix();
        let x = BlochVector::from_density(&rho, &basis).unwrap();
        let rec = simulate_record(
            &traj,
            &sched,
            &rho,
            NoiseModel::Gaussian { sigma: 0.05 },
            &mut Streams::new(2).stream(0),
        )
        .unwrap();
        let est = reconstruct(&map, &rec, ReconstructionMethod::DirectInverse).unwrap();
        let eps = DVector::from_vec(rec.noise.clone().unwrap());
        let predicted = map.inverse().unwrap() * eps;
        for m in 0..3 {
            assert!((est.coeffs()[m] - x.coeffs()[m] - predicted[m]).abs() < 1e-12);
        }
        let err = reconstruction_error(&x, &est).unwrap();
        assert!((err - predicted.norm()).abs() < 1e-12);
    }

    #[test]
    fn identity_map_returns_record() {
        let map = MeasurementMap::from_matrix(2, DMatrix::identity(3, 3), vec![1, 2, 3]).unwrap();
        let rec = MeasurementRecord::observed(vec![0.1, -0.2, 0.3]);
        let est = reconstruct(&map, &rec, ReconstructionMethod::DirectInverse).unwrap();
        assert_eq!(est.coeffs(), &[0.1, -0.2, 0.3]);
        assert_eq!(map.condition_number(), 1.0);
    }

    #[test]
    fn direct_inverse_needs_square_map() {
        let map =
            MeasurementMap::from_matrix(2, DMatrix::identity(4, 3), vec![1, 2, 3, 4]).unwrap();
        let rec = MeasurementRecord::observed(vec![0.0; 4]);
        assert!(reconstruct(&map, &rec, ReconstructionMethod::DirectInverse).is_err());
        assert!(reconstruct(
            &map,
            &rec,
            ReconstructionMethod::LeastSquares { ridge: 0.0 }
        )
        .is_ok());
    }

    #[test]
    fn ridge_shrinks_estimate() {
        let map = MeasurementMap::from_matrix(2, DMatrix::identity(3, 3), vec![1, 2, 3]).unwrap();
        let rec = MeasurementRecord::observed(vec![1.0, 0.0, 0.0]);
        let est = reconstruct(
            &map,
            &rec,
            ReconstructionMethod::LeastSquares { ridge: 1.0 },
        )
        .unwrap();
        assert!((est.coeffs()[0] - 0.5).abs() < 1e-12);
        assert!(ridge_heuristic(0.1, 2) > 0.0);
    }

    #[test]
    fn reconstruction_error_cases() {
        let a = BlochVector::new(2, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(reconstruction_error(&a, &a).unwrap(), 0.0);
        let e = BlochVector::new(2, vec![1.0, 0.0, 0.0]).unwrap();
        let z = BlochVector::new(2, vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(reconstruction_error(&e, &z).unwrap(), 1.0);
        let mut rng = Streams::new(3).stream(0);
        for _ in 0..20 {
            let u: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let v: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let oracle = DVector::from_vec(u.clone()) - DVector::from_vec(v.clone());
            let got = reconstruction_error(
                &BlochVector::new(3, u).unwrap(),
                &BlochVector::new(3, v).unwrap(),
            )
            .unwrap();
            assert!((got - oracle.norm()).abs() < 1e-14);
        }
    }

    #[test]
    fn basis_records_round_trip() {
        let sys = presets::ising_chain(2, 1.0, 1.0, 0.5).unwrap();
        let basis = gell_mann_basis(4).unwrap();
        let traj = random_traj(&sys, 5, 1.0, 9);
        let sched = SampleSchedule::multiples(5, 15, 4).unwrap();
        let map = build_measurement_map(&traj, &sched, &basis).unwrap();
        assert!(map.is_invertible());
        for m in 0..15 {
            let mut e = vec![0.0; 15];
            e[m] = 1.0;
            let x = BlochVector::new(4, e).unwrap();
            let rec = MeasurementRecord::observed(map.apply(&x).unwrap());
            let est = reconstruct(&map, &rec, ReconstructionMethod::DirectInverse).unwrap();
            assert!(reconstruction_error(&x, &est).unwrap() < 1e-9);
        }
    }

    #[test]
    fn oversampling_reduces_error() {
        let sys = presets::qubit().unwrap();
        let basis = gell_mann_basis(2).unwrap();
        let rho = PureState::basis(2, 0).unwrap().density_matrix();
        let x = BlochVector::from_density(&rho, &basis).unwrap();
        let noise = NoiseModel::Gaussian { sigma: 0.05 };
        let mut err_k1 = 0.0;
        let mut err_k3 = 0.0;
        let trials = 200;
        for trial in 0..trials {
            let spec = RandomFieldSpec {
                amplitude: 1.0,
                steps_per_segment: 10,
            };
            let f = spec
                .sample(1.0, 9, &mut Streams::new(1000 + trial).stream(0))
                .unwrap();
            let long = propagate(&sys, &f).unwrap();
            let mut rng = Streams::new(55).stream(trial);
            for (k, acc) in [(3usize, &mut err_k1), (9usize, &mut err_k3)] {
                let sched = SampleSchedule::multiples(10, k, 2).unwrap();
                let map = build_measurement_map(&long, &sched, &basis).unwrap();
                let rec = simulate_record(&long, &sched, &rho, noise, &mut rng).unwrap();
                let est = reconstruct(
                    &map,
                    &rec,
                    ReconstructionMethod::LeastSquares { ridge: 0.0 },
                )
                .unwrap();
                *acc += reconstruction_error(&x, &est).unwrap();
            }
        }
        assert!(err_k3 <= err_k1, "{err_k3} > {err_k1}");
    }

    #[test]
    fn haar_time_estimation() {
        let sys = presets::qubit().unwrap();
        let spec = RandomFieldSpec::default();
        let est = estimate_haar_time(&sys, &spec, &Streams::new(3), 0.98).unwrap();
        assert!(est.t_star.is_finite() && est.rate >= 0.98);
        // Holdout with fresh seeds.
        let holdout = invertibility_rate(&sys, &spec, est.t_star, 50, &Streams::new(999)).unwrap();
        assert!(holdout >= 0.98 - 0.05);

        let commuting =
            ControlSystem::with_control_observable(h(pauli::z()), h(pauli::z())).unwrap();
        assert!(matches!(
            estimate_haar_time(&commuting, &spec, &Streams::new(3), 0.98),
            Err(Error::NotControllable { .. })
        ));
        assert!(estimate_haar_time(&sys, &spec, &Streams::new(3), 1.0).is_err());
    }

    #[test]
    fn json_shape() {
        let map = MeasurementMap::from_matrix(2, DMatrix::identity(3, 3), vec![1, 2, 3]).unwrap();
        let rec = MeasurementRecord::observed(vec![0.5, 0.0, 0.0]);
        let v = serde_json::to_value(TomographyJson::new(&map, &rec)).unwrap();
        for key in ["schedule", "y", "map", "s_min", "cond"] {
            assert!(v.get(key).is_some());
        }
    }
}
