//! Monte Carlo experiments on Haar-random measurement maps and on the
//! concentration of the fidelity gradient over random targets.
//!
//! Every trial `i` draws from `streams.stream(i)`, results are collected in
//! trial order and reduced sequentially, so outputs depend only on the seed.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::csvio::csv_writer;
use crate::dynamics::{propagate, ControlField, ControlSystem, RandomFieldSpec};
use crate::error::{Error, Result};
use crate::operator::{
    gell_mann_basis, haar_state, haar_unitary, CMatrix, HermitianMatrix, OperatorBasis, PureState,
};
use crate::presets;
use crate::rng::Streams;
use crate::tomography::{
    build_measurement_map, singular_extremes, SampleSchedule, INVERTIBILITY_TOL,
};

pub const MIN_MOMENT_SAMPLES: usize = 1000;
pub const MIN_INVERSE_NORM_TRIALS: usize = 100;
pub const MIN_TAIL_SAMPLES: usize = 1000;

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        let s = sorted(values.to_vec());
        Self {
            min: quantile(&s, 0.0),
            q25: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q75: quantile(&s, 0.75),
            max: quantile(&s, 1.0),
        }
    }
}

/// `diag(1, -1, 0, ..., 0)`.
pub fn sigma_z_type(d: usize) -> Result<HermitianMatrix> {
    if d < 2 {
        return Err(Error::InvalidDimension {
            dim: d,
            reason: "need d >= 2",
        });
    }
    let mut m = CMatrix::zeros(d, d);
    m[(0, 0)] = Complex64::new(1.0, 0.0);
    m[(1, 1)] = Complex64::new(-1.0, 0.0);
    HermitianMatrix::traceless(m)
}

fn tr_m2(m: &HermitianMatrix) -> f64 {
    m.hs_norm().powi(2)
}

/// `E|z|` for a standard normal vector in `R^k`.
pub fn expected_chi_norm(k: usize) -> f64 {
    // c_1 = sqrt(2/pi), c_{k+1} = k / c_k.
    let mut c = (2.0 / std::f64::consts::PI).sqrt();
    for j in 1..k {
        c = j as f64 / c;
    }
    c
}

fn haar_row<R: Rng + ?Sized>(
    m: &HermitianMatrix,
    basis: &OperatorBasis,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let u = haar_unitary(m.dim(), rng)?;
    basis.coefficients(m.conjugate_by(&u).matrix())
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentsResult {
    pub d: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub variance: Vec<f64>,
    pub variance_se: Vec<f64>,
    pub predicted_variance: f64,
    /// `E[M_{n,m} M_{n',m'}]` for rows from independent unitaries.
    pub cross: Vec<Vec<f64>>,
    pub cross_se: Vec<Vec<f64>>,
}

/// First and second moments of `<B_m, U† M U>` over Haar `U`.
pub fn run_moments_experiment(
    d: usize,
    m: &HermitianMatrix,
    n_samples: usize,
    streams: &Streams,
) -> Result<MomentsResult> {
    if m.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: m.dim(),
        });
    }
    if !m.is_traceless() {
        return Err(Error::NotTraceless { trace: m.trace() });
    }
    if n_samples < MIN_MOMENT_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "n_samples must be >= {MIN_MOMENT_SAMPLES}, got {n_samples}"
        )));
    }
    let basis = gell_mann_basis(d)?;
    let k = basis.len();
    let pairs = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream(i as u64);
            Ok((
                haar_row(m, &basis, &mut rng)?,
                haar_row(m, &basis, &mut rng)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = n_samples as f64;
    let mut s1 = vec![0.0; k];
    let mut s2 = vec![0.0; k];
    let mut s4 = vec![0.0; k];
    let mut c1 = vec![vec![0.0; k]; k];
    let mut c2 = vec![vec![0.0; k]; k];
    for (r, r2) in &pairs {
        for a in 0..k {
            s1[a] += r[a];
            s2[a] += r[a] * r[a];
            s4[a] += r[a].powi(4);
            for b in 0..k {
                let p = r[a] * r2[b];
                c1[a][b] += p;
                c2[a][b] += p * p;
            }
        }
    }
    let se = |sum: f64, sum_sq: f64| -> f64 {
        let mean = sum / n;
        ((sum_sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt()
    };
    let mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
    Ok(MomentsResult {
        d,
        n_samples,
        seed: streams.seed(),
        mean_se: (0..k).map(|a| se(s1[a], s2[a])).collect(),
        variance: (0..k).map(|a| s2[a] / n - mean[a] * mean[a]).collect(),
        variance_se: (0..k).map(|a| se(s2[a], s4[a])).collect(),
        mean,
        predicted_variance: tr_m2(m) / k as f64,
        cross: c1
            .iter()
            .map(|row| row.iter().map(|s| s / n).collect())
            .collect(),
        cross_se: (0..k)
            .map(|a| (0..k).map(|b| se(c1[a][b], c2[a][b])).collect())
            .collect(),
    })
}

impl MomentsResult {
    /// One row per basis index.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w)?;
        wtr.write_record([
            "m",
            "mean",
            "mean_se",
            "variance",
            "variance_se",
            "predicted_variance",
        ])?;
        for a in 0..self.mean.len() {
            wtr.serialize((
                a,
                self.mean[a],
                self.mean_se[a],
                self.variance[a],
                self.variance_se[a],
                self.predicted_variance,
            ))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// One row per `(m, m')` pair of independent rows.
    pub fn write_cross_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w)?;
        wtr.write_record(["m", "m_prime", "cross", "cross_se"])?;
        for (a, row) in self.cross.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                wtr.serialize((a, b, v, self.cross_se[a][b]))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn max_mean_z(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.mean_se)
            .map(|(m, s)| (m / s).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_cross_z(&self) -> f64 {
        self.cross
            .iter()
            .flatten()
            .zip(self.cross_se.iter().flatten())
            .map(|(c, s)| (c / s).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_variance_rel_err(&self) -> f64 {
        self.variance
            .iter()
            .map(|v| (v / self.predicted_variance - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> Value {
        json!({
            "experiment": "moments",
            "seed": self.seed,
            "params": {"d": self.d, "n_samples": self.n_samples},
            "predicted_variance": self.predicted_variance,
            "quantiles": {
                "mean": Quantiles::of(&self.mean),
                "variance": Quantiles::of(&self.variance),
            },
            "max_mean_z": self.max_mean_z(),
            "max_cross_z": self.max_cross_z(),
            "max_variance_rel_err": self.max_variance_rel_err(),
        })
    }
}

/// Where the rows of a random measurement map come from.
#[derive(Debug, Clone)]
pub enum RowSource {
    /// Independent Haar conjugations.
    IdealHaar,
    /// One random-field trajectory sampled at multiples of the Haar time
    /// (`probe.steps_per_segment` steps of width `dt`).
    RandomField {
        system: ControlSystem,
        probe: RandomFieldSpec,
        dt: f64,
    },
}

impl RowSource {
    pub fn name(&self) -> &'static str {
        match self {
            RowSource::IdealHaar => "ideal-haar",
            RowSource::RandomField { .. } => "random-field",
        }
    }
}

/// A square `(d^2-1) x (d^2-1)` map drawn from `source`.
pub fn random_map<R: Rng + ?Sized>(
    m: &HermitianMatrix,
    basis: &OperatorBasis,
    source: &RowSource,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let k = basis.len();
    match source {
        RowSource::IdealHaar => {
            let mut out = DMatrix::zeros(k, k);
            for n in 0..k {
                let row = haar_row(m, basis, rng)?;
                for (j, v) in row.into_iter().enumerate() {
                    out[(n, j)] = v;
                }
            }
            Ok(out)
        }
        RowSource::RandomField { system, probe, dt } => {
            let sys = system.replace_observable(m.clone())?;
            let field = probe.sample(probe.steps_per_segment as f64 * dt, k, rng)?;
            let traj = propagate(&sys, &field)?;
            let schedule = SampleSchedule::multiples(probe.steps_per_segment, k, m.dim())?;
            Ok(build_measurement_map(&traj, &schedule, basis)?
                .matrix()
                .clone())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InverseNormResult {
    pub d: usize,
    pub n_trials: usize,
    pub seed: u64,
    pub source: String,
    pub tr_m2: f64,
    pub s_min: Vec<f64>,
    /// `1 / s_min`; infinite for singular trials.
    pub inverse_norm: Vec<f64>,
    /// `s_min (d^2-1)^{3/2} / |Tr M^2|`, NaN for singular trials.
    pub l_hat: Vec<f64>,
    pub singular: Vec<bool>,
}

pub fn l_hat(s_min: f64, d: usize, tr_m2: f64) -> f64 {
    s_min * ((d * d - 1) as f64).powf(1.5) / tr_m2.abs()
}

/// Smallest singular values of random maps and the implied constant.
pub fn run_inverse_norm_experiment(
    d: usize,
    m: &HermitianMatrix,
    n_trials: usize,
    source: &RowSource,
    streams: &Streams,
) -> Result<InverseNormResult> {
    if m.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: m.dim(),
        });
    }
    if n_trials < MIN_INVERSE_NORM_TRIALS {
        return Err(Error::InvalidParameter(format!(
            "n_trials must be >= {MIN_INVERSE_NORM_TRIALS}, got {n_trials}"
        )));
    }
    let basis = gell_mann_basis(d)?;
    let t2 = tr_m2(m);
    let ext = (0..n_trials)
        .into_par_iter()
        .map(|i| {
            Ok(singular_extremes(&random_map(
                m,
                &basis,
                source,
                &mut streams.stream(i as u64),
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    let singular: Vec<bool> = ext
        .iter()
        .map(|(lo, hi)| *lo <= INVERTIBILITY_TOL * hi)
        .collect();
    let s_min: Vec<f64> = ext.iter().map(|e| e.0).collect();
    Ok(InverseNormResult {
        d,
        n_trials,
        seed: streams.seed(),
        source: source.name().into(),
        tr_m2: t2,
        inverse_norm: s_min
            .iter()
            .zip(&singular)
            .map(|(s, &z)| if z { f64::INFINITY } else { 1.0 / s })
            .collect(),
        l_hat: s_min
            .iter()
            .zip(&singular)
            .map(|(s, &z)| if z { f64::NAN } else { l_hat(*s, d, t2) })
            .collect(),
        s_min,
        singular,
    })
}

impl InverseNormResult {
    pub fn singular_count(&self) -> usize {
        self.singular.iter().filter(|s| **s).count()
    }

    /// `L-hat` of the non-singular trials.
    pub fn valid_l_hat(&self) -> Vec<f64> {
        self.l_hat
            .iter()
            .cloned()
            .filter(|x| x.is_finite())
            .collect()
    }

    pub fn l_hat_quantiles(&self) -> Quantiles {
        Quantiles::of(&self.valid_l_hat())
    }

    pub fn s_min_quantiles(&self) -> Quantiles {
        Quantiles::of(&self.s_min)
    }

    /// `(d^2-1)^{3/2} / (L |Tr M^2|)`.
    pub fn lower_bound(&self, l: f64) -> f64 {
        ((self.d * self.d - 1) as f64).powf(1.5) / (l * self.tr_m2.abs())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w)?;
        wtr.write_record(["trial", "s_min", "inverse_norm", "l_hat", "singular"])?;
        for i in 0..self.n_trials {
            wtr.serialize((
                i,
                self.s_min[i],
                self.inverse_norm[i],
                self.l_hat[i],
                self.singular[i],
            ))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> Value {
        json!({
            "experiment": "bound-eq4",
            "seed": self.seed,
            "params": {"d": self.d, "n_trials": self.n_trials, "source": self.source, "tr_m2": self.tr_m2},
            "singular_trials": self.singular_count(),
            "quantiles": {"l_hat": self.l_hat_quantiles(), "s_min": self.s_min_quantiles()},
        })
    }
}

/// `2 exp(-kappa^2 d / (81 pi^3 E_max^2))`.
pub fn tail_bound(kappa: f64, d: usize, e_max: f64) -> f64 {
    2.0 * (-kappa * kappa * d as f64 / (81.0 * std::f64::consts::PI.powi(3) * e_max * e_max)).exp()
}

/// Levy's lemma with `N = 2d` and `lambda = 4 E_max`:
/// `2 exp(-kappa^2 d / (72 pi^2 E_max^2))`.
pub fn tail_bound_levy(kappa: f64, d: usize, e_max: f64) -> f64 {
    2.0 * (-kappa * kappa * d as f64 / (72.0 * std::f64::consts::PI.powi(2) * e_max * e_max)).exp()
}

/// 20 log-spaced points in `[0.01 E_max, 2 E_max]`.
pub fn default_kappa_grid(e_max: f64) -> Vec<f64> {
    let (lo, hi) = ((0.01 * e_max).ln(), (2.0 * e_max).ln());
    (0..20)
        .map(|i| (lo + (hi - lo) * i as f64 / 19.0).exp())
        .collect()
}

/// Fixed vectors `a = U_T U_t† Hc U_t psi0` and `b = U_T psi0`; the
/// integrand for target `g` is `2 Im(<g|a><b|g>)`.
#[derive(Debug, Clone)]
pub struct GradientIntegrand {
    pub a: nalgebra::DVector<Complex64>,
    pub b: nalgebra::DVector<Complex64>,
}

impl GradientIntegrand {
    pub fn new(
        system: &ControlSystem,
        field: &ControlField,
        t_index: usize,
        psi0: &PureState,
    ) -> Result<Self> {
        let traj = propagate(system, field)?;
        let ut = traj.endpoint().matrix();
        let u = traj.unitary_at(t_index)?.matrix();
        let a = ut * u.adjoint() * system.control().matrix() * u * psi0.amplitudes();
        let b = ut * psi0.amplitudes();
        Ok(Self { a, b })
    }

    pub fn eval(&self, g: &PureState) -> f64 {
        let v = g.amplitudes();
        2.0 * (v.dotc(&self.a) * self.b.dotc(v)).im
    }

    /// Largest attainable `|h|` over unit targets: the top eigenvalue of
    /// the Hermitian form `-i (a b† - b a†)`.
    pub fn max_abs(&self) -> Result<f64> {
        let ab = &self.a * self.b.adjoint();
        let form = (&ab - ab.adjoint()) * Complex64::new(0.0, -1.0);
        let vals = HermitianMatrix::from_hermitian_part(&form).eigenvalues()?;
        Ok(vals.iter().map(|x| x.abs()).fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TailResult {
    pub d: usize,
    pub e_max: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub t_index: usize,
    pub samples: Vec<f64>,
    pub kappa: Vec<f64>,
    pub tail: Vec<f64>,
    pub bound: Vec<f64>,
    pub bound_levy: Vec<f64>,
}

pub fn e_max(control: &HermitianMatrix) -> Result<f64> {
    Ok(control
        .eigenvalues()?
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max))
}

/// Tail of the gradient integrand over Haar targets at grid time `t_index`.
pub fn run_tail_experiment(
    system: &ControlSystem,
    field: &ControlField,
    t_index: usize,
    n_samples: usize,
    kappa_grid: Option<Vec<f64>>,
    streams: &Streams,
) -> Result<TailResult> {
    if n_samples < MIN_TAIL_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "n_samples must be >= {MIN_TAIL_SAMPLES}, got {n_samples}"
        )));
    }
    let e = e_max(system.control())?;
    let kappa = kappa_grid.unwrap_or_else(|| default_kappa_grid(e));
    if kappa.is_empty() || kappa[0] <= 0.0 || kappa.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "kappa grid must be positive and ascending".into(),
        ));
    }
    let d = system.dim();
    let psi0 = PureState::basis(d, 0)?;
    let h = GradientIntegrand::new(system, field, t_index, &psi0)?;
    let samples = sample_integrand(&h, d, n_samples, streams)?;
    let n = n_samples as f64;
    let tail = kappa
        .iter()
        .map(|k| samples.iter().filter(|g| g.abs() > *k).count() as f64 / n)
        .collect();
    Ok(TailResult {
        d,
        e_max: e,
        n_samples,
        seed: streams.seed(),
        t_index,
        samples,
        bound: kappa.iter().map(|k| tail_bound(*k, d, e)).collect(),
        bound_levy: kappa.iter().map(|k| tail_bound_levy(*k, d, e)).collect(),
        tail,
        kappa,
    })
}

fn sample_integrand(
    h: &GradientIntegrand,
    d: usize,
    n: usize,
    streams: &Streams,
) -> Result<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| Ok(h.eval(&haar_state(d, &mut streams.stream(i as u64))?)))
        .collect()
}

/// `bound + 3 sqrt(bound (1 - bound) / n)`, the largest tail consistent
/// with the bound at three binomial standard errors.
pub fn binomial_ceiling(bound: f64, n: usize) -> f64 {
    let b = bound.min(1.0);
    b + 3.0 * (b * (1.0 - b) / n as f64).sqrt()
}

impl TailResult {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.n_samples as f64
    }

    pub fn standard_error(&self) -> f64 {
        let m = self.mean();
        let var =
            self.samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (self.n_samples - 1) as f64;
        (var / self.n_samples as f64).sqrt()
    }

    pub fn abs_quantiles(&self) -> Quantiles {
        Quantiles::of(&self.samples.iter().map(|x| x.abs()).collect::<Vec<_>>())
    }

    /// Per kappa: bound at least 1, so nothing can violate it.
    pub fn trivially_satisfied(&self) -> Vec<bool> {
        self.bound.iter().map(|b| *b >= 1.0).collect()
    }

    pub fn violations(&self) -> Vec<bool> {
        self.tail
            .iter()
            .zip(&self.bound)
            .map(|(t, b)| *t > binomial_ceiling(*b, self.n_samples))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w)?;
        wtr.write_record([
            "kappa",
            "tail",
            "bound",
            "bound_levy",
            "ceiling",
            "trivial",
            "violated",
        ])?;
        let (triv, viol) = (self.trivially_satisfied(), self.violations());
        for i in 0..self.kappa.len() {
            wtr.serialize((
                self.kappa[i],
                self.tail[i],
                self.bound[i],
                self.bound_levy[i],
                binomial_ceiling(self.bound[i], self.n_samples),
                triv[i],
                viol[i],
            ))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> Value {
        json!({
            "experiment": "bound-eq5",
            "seed": self.seed,
            "params": {"d": self.d, "e_max": self.e_max, "n_samples": self.n_samples, "t_index": self.t_index},
            "mean": self.mean(),
            "standard_error": self.standard_error(),
            "violations": self.violations().iter().filter(|v| **v).count(),
            "trivially_satisfied": self.trivially_satisfied().iter().filter(|v| **v).count(),
            "quantiles": {"abs_gradient": self.abs_quantiles()},
        })
    }
}

/// System, field and evaluation time used for `n` qubits: the qubit preset
/// for `n = 1`, otherwise the Ising chain.
pub fn flattening_setup(
    n: usize,
    streams: &Streams,
) -> Result<(ControlSystem, ControlField, usize)> {
    let system = if n == 1 {
        presets::qubit()?
    } else {
        presets::ising_chain(n, 1.0, 1.0, 0.5)?
    };
    let steps = 40;
    let field = RandomFieldSpec {
        amplitude: 1.0,
        steps_per_segment: steps,
    }
    .sample(4.0, 1, &mut streams.stream(u64::MAX))?;
    Ok((system, field, steps / 2))
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatteningRow {
    pub n: usize,
    pub d: usize,
    pub e_max: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    /// Largest `|g|` attainable over all targets.
    pub attainable_max: f64,
    /// `median / attainable_max`, which removes the field dependence of the
    /// integrand scale.
    pub normalized_median: f64,
    pub inv_sqrt_d: f64,
    pub inv_d: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatteningResult {
    pub seed: u64,
    pub n_samples: usize,
    pub rows: Vec<FlatteningRow>,
}

/// Median gradient integrand over Haar targets as the qubit count grows.
pub fn run_flattening_experiment(
    qubit_counts: &[usize],
    n_samples: usize,
    streams: &Streams,
) -> Result<FlatteningResult> {
    let mut rows = Vec::with_capacity(qubit_counts.len());
    for &n in qubit_counts {
        if !(1..=7).contains(&n) {
            return Err(Error::InvalidParameter(format!(
                "qubit count {n} outside 1..=7"
            )));
        }
        let sub = streams.child(n as u64);
        let (system, field, t) = flattening_setup(n, &sub)?;
        let d = system.dim();
        let h = GradientIntegrand::new(&system, &field, t, &PureState::basis(d, 0)?)?;
        let abs: Vec<f64> = sample_integrand(&h, d, n_samples, &sub)?
            .iter()
            .map(|x| x.abs())
            .collect();
        let q = Quantiles::of(&abs);
        let attainable_max = h.max_abs()?;
        rows.push(FlatteningRow {
            n,
            d,
            e_max: e_max(system.control())?,
            q25: q.q25,
            median: q.median,
            q75: q.q75,
            max: q.max,
            attainable_max,
            normalized_median: q.median / attainable_max,
            inv_sqrt_d: 1.0 / (d as f64).sqrt(),
            inv_d: 1.0 / d as f64,
        });
    }
    Ok(FlatteningResult {
        seed: streams.seed(),
        n_samples,
        rows,
    })
}

impl FlatteningResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w)?;
        wtr.write_record([
            "n",
            "d",
            "e_max",
            "q25",
            "median",
            "q75",
            "max",
            "attainable_max",
            "normalized_median",
            "inv_sqrt_d",
            "inv_d",
        ])?;
        for r in &self.rows {
            wtr.serialize((
                r.n,
                r.d,
                r.e_max,
                r.q25,
                r.median,
                r.q75,
                r.max,
                r.attainable_max,
                r.normalized_median,
                r.inv_sqrt_d,
                r.inv_d,
            ))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> Value {
        json!({
            "experiment": "flattening",
            "seed": self.seed,
            "params": {"n_samples": self.n_samples, "qubit_counts": self.rows.iter().map(|r| r.n).collect::<Vec<_>>()},
            "quantiles": self.rows,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseRow {
    pub d: usize,
    pub mean_error: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub l_hat_median: f64,
    /// `sigma (d^2-1)^{3/2} / (L_med |Tr M^2|) E|z|`, `z` standard normal
    /// in `R^{d^2-1}`.
    pub bound_curve: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseSensitivityResult {
    pub seed: u64,
    pub sigma: f64,
    pub n_trials: usize,
    pub rows: Vec<NoiseRow>,
    /// Per-dimension trial errors `|M^{-1} eps|`.
    pub errors: Vec<Vec<f64>>,
}

/// `|M^{-1} eps|` for Haar maps with `M = diag(1,-1,0,..)` and Gaussian
/// `eps = sigma z`.
pub fn run_noise_sensitivity_experiment(
    dims: &[usize],
    sigma: f64,
    n_trials: usize,
    streams: &Streams,
) -> Result<NoiseSensitivityResult> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    if n_trials == 0 {
        return Err(Error::InvalidParameter("n_trials must be >= 1".into()));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for &d in dims {
        let m = sigma_z_type(d)?;
        let basis = gell_mann_basis(d)?;
        let k = basis.len();
        let sub = streams.child(d as u64);
        let trials = (0..n_trials)
            .into_par_iter()
            .map(|i| {
                let mut rng = sub.stream(i as u64);
                let map = random_map(&m, &basis, &RowSource::IdealHaar, &mut rng)?;
                let z: DVector<f64> = DVector::from_fn(k, |_, _| rng.sample(StandardNormal));
                let (s_min, _) = singular_extremes(&map);
                let x = map
                    .lu()
                    .solve(&(z * sigma))
                    .ok_or(Error::NotInformationallyComplete {
                        s_min,
                        s_max: f64::NAN,
                    })?;
                Ok((x.norm(), l_hat(s_min, d, tr_m2(&m))))
            })
            .collect::<Result<Vec<_>>>()?;
        let errs: Vec<f64> = trials.iter().map(|t| t.0).collect();
        let lq = Quantiles::of(&trials.iter().map(|t| t.1).collect::<Vec<_>>());
        let q = Quantiles::of(&errs);
        rows.push(NoiseRow {
            d,
            mean_error: errs.iter().sum::<f64>() / n_trials as f64,
            q25: q.q25,
            median: q.median,
            q75: q.q75,
            l_hat_median: lq.median,
            bound_curve: sigma * (k as f64).powf(1.5) / (lq.median * tr_m2(&m))
                * expected_chi_norm(k),
        });
        errors.push(errs);
    }
    Ok(NoiseSensitivityResult {
        seed: streams.seed(),
        sigma,
        n_trials,
        rows,
        errors,
    })
}

impl NoiseSensitivityResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w)?;
        wtr.write_record([
            "d",
            "mean_error",
            "q25",
            "median",
            "q75",
            "l_hat_median",
            "bound_curve",
        ])?;
        for r in &self.rows {
            wtr.serialize((
                r.d,
                r.mean_error,
                r.q25,
                r.median,
                r.q75,
                r.l_hat_median,
                r.bound_curve,
            ))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> Value {
        json!({
            "experiment": "noise-sensitivity",
            "seed": self.seed,
            "params": {"sigma": self.sigma, "n_trials": self.n_trials, "dims": self.rows.iter().map(|r| r.d).collect::<Vec<_>>()},
            "quantiles": self.rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::pauli;

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
    }

    #[test]
    fn chi_norm_recursion() {
        assert!((expected_chi_norm(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        // E|z| in R^2 is sqrt(pi/2); in R^3 it is 2 sqrt(2/pi).
        assert!((expected_chi_norm(2) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-14);
        assert!((expected_chi_norm(3) - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
        let mut rng = Streams::new(4).stream(0);
        let n = 200_000;
        let mc: f64 = (0..n)
            .map(|_| {
                (0..8)
                    .map(|_| rng.sample::<f64, _>(StandardNormal).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mc - expected_chi_norm(8)).abs() < 5e-3);
    }

    #[test]
    fn qubit_moments() {
        let m = HermitianMatrix::new(pauli::z()).unwrap();
        let r = run_moments_experiment(2, &m, 20_000, &Streams::new(1)).unwrap();
        assert!((r.predicted_variance - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.max_variance_rel_err() < 0.05);
        assert!(r.max_mean_z() < 4.0 && r.max_cross_z() < 4.5);
        assert!(run_moments_experiment(2, &m, 10, &Streams::new(1)).is_err());
    }

    #[test]
    fn moment_error_halves_when_samples_quadruple() {
        let m = HermitianMatrix::new(pauli::z()).unwrap();
        let rms = |n: usize| -> f64 {
            let reps = 24;
            let sq: f64 = (0..reps)
                .map(|r| {
                    let res = run_moments_experiment(2, &m, n, &Streams::new(1000 + r)).unwrap();
                    res.variance
                        .iter()
                        .map(|v| (v - res.predicted_variance).powi(2))
                        .sum::<f64>()
                        / 3.0
                })
                .sum();
            (sq / reps as f64).sqrt()
        };
        let ratio = rms(2000) / rms(8000);
        assert!((1.0..=3.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn inverse_norm_consistency() {
        let m = sigma_z_type(3).unwrap();
        let r = run_inverse_norm_experiment(3, &m, 200, &RowSource::IdealHaar, &Streams::new(2))
            .unwrap();
        assert_eq!(r.singular_count(), 0);
        let l = r.l_hat_quantiles().max;
        for inv in &r.inverse_norm {
            assert!(r.lower_bound(l) <= inv * (1.0 + 1e-12));
        }
        assert!(r.l_hat.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn random_field_rows_resemble_haar() {
        let sys = presets::qubit().unwrap();
        let m = sys.observable().clone();
        let haar = run_inverse_norm_experiment(2, &m, 300, &RowSource::IdealHaar, &Streams::new(3))
            .unwrap();
        let src = RowSource::RandomField {
            system: sys,
            probe: RandomFieldSpec {
                amplitude: 1.0,
                steps_per_segment: 20,
            },
            dt: 0.1,
        };
        let field = run_inverse_norm_experiment(2, &m, 300, &src, &Streams::new(3)).unwrap();
        let ratio = haar.s_min_quantiles().median / field.s_min_quantiles().median;
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn tail_bound_formula() {
        let k = 0.3;
        let expect = 2.0 * (-0.09 * 8.0 / (81.0 * std::f64::consts::PI.powi(3) * 4.0)).exp();
        assert_eq!(tail_bound(k, 8, 2.0), expect);
        let g = default_kappa_grid(1.0);
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[19] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tail_integrand_statistics() {
        let (sys, field, t) = flattening_setup(3, &Streams::new(5)).unwrap();
        let r = run_tail_experiment(&sys, &field, t, 5000, None, &Streams::new(6)).unwrap();
        assert!(r.mean().abs() < 3.0 * r.standard_error());
        assert!(r.samples.iter().all(|g| g.abs() <= 2.0 * r.e_max));
        assert!(r.violations().iter().all(|v| !v));
        assert!(r.tail.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn integrand_matches_continuous_gradient() {
        use crate::landscape::{continuous_integrand, StatePreparationProblem};
        let (sys, field, t) = flattening_setup(2, &Streams::new(8)).unwrap();
        let g = haar_state(4, &mut Streams::new(9).stream(0)).unwrap();
        let psi0 = PureState::basis(4, 0).unwrap();
        let h = GradientIntegrand::new(&sys, &field, t, &psi0).unwrap();
        let p = StatePreparationProblem::new(sys.clone(), psi0, g.clone()).unwrap();
        let full = continuous_integrand(&p, &propagate(&sys, &field).unwrap());
        assert!((h.eval(&g) - full[t]).abs() < 1e-13);
    }

    #[test]
    fn flattening_decreases_with_size() {
        let r = run_flattening_experiment(&[1, 2, 3, 4, 5, 6], 4000, &Streams::new(10)).unwrap();
        let med: Vec<f64> = r.rows.iter().map(|x| x.median).collect();
        assert!(med.windows(2).all(|w| w[1] < w[0]), "{med:?}");
        // For Haar g, |<g|a><b|g>| ~ |a_perp| / d: two extra qubits shrink
        // the normalized median by about 4.
        let norm: Vec<f64> = r.rows.iter().map(|x| x.normalized_median).collect();
        for i in 1..norm.len() - 2 {
            let ratio = norm[i] / norm[i + 2];
            assert!((2.9..=5.5).contains(&ratio), "n={} ratio {ratio}", i + 1);
        }
        // One qubit: no concentration, sampled extremes reach the exact
        // maximum, which never exceeds 2 E_max.
        let q = &r.rows[0];
        assert!(q.max >= 0.9 * q.attainable_max && q.attainable_max <= 2.0 * q.e_max);
    }

    #[test]
    fn noise_sensitivity_trends() {
        let s = Streams::new(11);
        let a = run_noise_sensitivity_experiment(&[2, 3, 4], 0.01, 300, &s).unwrap();
        let b = run_noise_sensitivity_experiment(&[2, 3, 4], 0.02, 300, &s).unwrap();
        let means: Vec<f64> = a.rows.iter().map(|r| r.mean_error).collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert!((y.mean_error / x.mean_error - 2.0).abs() < 0.2);
        }
        let zero = run_noise_sensitivity_experiment(&[2], 0.0, 1, &s).unwrap();
        assert_eq!(zero.rows[0].mean_error, 0.0);
    }

    #[test]
    fn experiments_are_reproducible() {
        let m = sigma_z_type(2).unwrap();
        let run = || {
            let r =
                run_inverse_norm_experiment(2, &m, 100, &RowSource::IdealHaar, &Streams::new(12))
                    .unwrap();
            let mut buf = Vec::new();
            r.write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(run(), run());
    }
}
