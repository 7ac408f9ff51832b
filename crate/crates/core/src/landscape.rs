//! State-preparation fidelity, its gradient, gradient ascent and singular
//! control detection.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvio::csv_writer;
use crate::dynamics::{propagate, ControlField, ControlSystem, Trajectory};
use crate::error::{Error, Result};
use crate::operator::{CVector, HermitianMatrix, OperatorBasis, PureState};

/// Steer `initial` to `target` under `system`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePreparationProblem {
    system: ControlSystem,
    initial: PureState,
    target: PureState,
}

impl StatePreparationProblem {
    pub fn new(system: ControlSystem, initial: PureState, target: PureState) -> Result<Self> {
        for s in [&initial, &target] {
            if s.dim() != system.dim() {
                return Err(Error::DimensionMismatch {
                    expected: system.dim(),
                    found: s.dim(),
                });
            }
        }
        Ok(Self {
            system,
            initial,
            target,
        })
    }

    pub fn system(&self) -> &ControlSystem {
        &self.system
    }

    pub fn initial(&self) -> &PureState {
        &self.initial
    }

    pub fn target(&self) -> &PureState {
        &self.target
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    /// `<psi_g| U_T |phi>`.
    fn overlap(&self, traj: &Trajectory) -> Complex64 {
        self.target.inner(&traj.endpoint().apply(&self.initial))
    }
}

/// `|<psi_g| U_T |phi>|^2`.
pub fn fidelity(problem: &StatePreparationProblem, field: &ControlField) -> Result<f64> {
    let traj = propagate(problem.system(), field)?;
    Ok(fidelity_of(problem, &traj))
}

pub fn fidelity_of(problem: &StatePreparationProblem, traj: &Trajectory) -> f64 {
    problem.overlap(traj).norm_sqr()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    /// Exact derivative of the discrete propagator.
    Analytic,
    /// Integrand `2 Im[<psi_g|U_T U_t† Hc U_t|phi><phi|U_T†|psi_g>]` at the
    /// left end of each interval, times `dt`.
    Continuous,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub method: GradientMethod,
}

impl GradientReport {
    pub fn norm(&self) -> f64 {
        l2(&self.gradient)
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Forward states `psi_k = U_{t_k} phi` for `k = 0..N`.
fn forward_states(traj: &Trajectory, phi: &PureState) -> Vec<CVector> {
    traj.prefix_unitaries()
        .iter()
        .map(|u| u.matrix() * phi.amplitudes())
        .collect()
}

/// Backward states `lambda_k = (U_N ... U_{k+2})† psi_g`, i.e. the target
/// pulled back to just after step `k` (0-based).
fn backward_states(traj: &Trajectory, target: &PureState) -> Vec<CVector> {
    let n = traj.n_steps();
    let mut out = vec![target.amplitudes().clone(); n];
    for k in (0..n.saturating_sub(1)).rev() {
        out[k] = traj.step_unitaries()[k + 1].matrix().adjoint() * &out[k + 1];
    }
    out
}

/// `dJ/df_j` for the discrete propagator, inserting the exact derivative of
/// step `j` into `U_T = U_N ... U_1`.
pub fn analytic_gradient(
    problem: &StatePreparationProblem,
    field: &ControlField,
) -> Result<GradientReport> {
    let traj = propagate(problem.system(), field)?;
    Ok(analytic_gradient_of(problem, &traj))
}

pub fn analytic_gradient_of(
    problem: &StatePreparationProblem,
    traj: &Trajectory,
) -> GradientReport {
    let z = problem.overlap(traj);
    let fwd = forward_states(traj, problem.initial());
    let bwd = backward_states(traj, problem.target());
    let hc = problem.system().control().matrix();
    let dt = traj.field().dt();
    let gradient = traj
        .step_eigens()
        .par_iter()
        .enumerate()
        .map(|(j, eig)| {
            let dz = bwd[j].dotc(&(eig.exp_derivative(hc, dt) * &fwd[j]));
            2.0 * (z.conj() * dz).re
        })
        .collect();
    GradientReport {
        value: z.norm_sqr(),
        gradient,
        method: GradientMethod::Analytic,
    }
}

/// Per-interval integrand of the continuous-time gradient formula, scaled
/// by `dt`. Agrees with [`analytic_gradient`] to first order in `dt`.
pub fn continuous_gradient(
    problem: &StatePreparationProblem,
    field: &ControlField,
) -> Result<GradientReport> {
    let traj = propagate(problem.system(), field)?;
    let dt = field.dt();
    let integrand = continuous_integrand(problem, &traj);
    Ok(GradientReport {
        value: fidelity_of(problem, &traj),
        gradient: integrand
            .into_iter()
            .take(field.n_steps())
            .map(|g| g * dt)
            .collect(),
        method: GradientMethod::Continuous,
    })
}

/// `2 Im[<psi_g|U_T U_t† Hc U_t|phi><phi|U_T†|psi_g>]` at every grid time
/// `t_k`, `k = 0..N`.
pub fn continuous_integrand(problem: &StatePreparationProblem, traj: &Trajectory) -> Vec<f64> {
    let ut = traj.endpoint().matrix();
    let z = problem.overlap(traj);
    let g = problem.target().amplitudes();
    let hc = problem.system().control().matrix();
    // <psi_g|U_T U_t† = (U_t U_T† psi_g)†.
    let g_back = ut.adjoint() * g;
    traj.prefix_unitaries()
        .par_iter()
        .map(|u| {
            let left = u.matrix() * &g_back;
            let right = hc * (u.matrix() * problem.initial().amplitudes());
            2.0 * (left.dotc(&right) * z.conj()).im
        })
        .collect()
}

/// Central finite differences of [`fidelity`] with step `delta`.
pub fn finite_difference_gradient(
    problem: &StatePreparationProblem,
    field: &ControlField,
    delta: f64,
) -> Result<GradientReport> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "delta must be > 0, got {delta}"
        )));
    }
    let value = fidelity(problem, field)?;
    let gradient = (0..field.n_steps())
        .into_par_iter()
        .map(|j| {
            let mut amps = field.amplitudes().to_vec();
            amps[j] += delta;
            let plus = fidelity(problem, &field.with_amplitudes(amps.clone())?)?;
            amps[j] -= 2.0 * delta;
            let minus = fidelity(problem, &field.with_amplitudes(amps)?)?;
            Ok((plus - minus) / (2.0 * delta))
        })
        .collect::<Result<_>>()?;
    Ok(GradientReport {
        value,
        gradient,
        method: GradientMethod::FiniteDifference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adaptation {
    Fixed,
    /// Double on improvement; on failure halve and retry, up to 30 times.
    DoublingHalving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GradientSource {
    ModelAnalytic,
    ModelFiniteDifference {
        delta: f64,
    },
    /// Estimated from simulated measurements; see the learning module.
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub adaptation: Adaptation,
    pub max_iters: usize,
    pub threshold: f64,
    pub source: GradientSource,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            adaptation: Adaptation::DoublingHalving,
            max_iters: 200,
            threshold: 0.999,
            source: GradientSource::ModelAnalytic,
        }
    }
}

pub const MAX_HALVINGS: usize = 30;

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if let GradientSource::ModelFiniteDifference { delta } = self.source {
            if !(delta > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "delta must be > 0, got {delta}"
                )));
            }
        }
        Ok(())
    }
}

/// Something gradient ascent can climb.
pub trait Objective {
    /// Per-iteration diagnostics carried into the trace.
    type Info: Clone;

    /// Value and gradient at `field`; called once per iteration.
    fn evaluate(
        &mut self,
        field: &ControlField,
        iteration: usize,
    ) -> Result<(f64, Vec<f64>, Self::Info)>;

    /// Value at a trial field, used to accept or reject a step.
    fn value(&mut self, field: &ControlField, iteration: usize) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// No step size down to `alpha / 2^30` improved the value.
    Stalled,
    /// The objective failed after at least one successful iteration.
    SourceFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord<I> {
    pub iteration: usize,
    pub value: f64,
    pub grad_norm: f64,
    /// Step size applied after this evaluation (0 when no step was taken).
    pub alpha: f64,
    pub info: I,
}

#[derive(Debug, Clone)]
pub struct AscentTrace<I> {
    pub records: Vec<StepRecord<I>>,
    pub field: ControlField,
    pub stop: StopReason,
    pub failure: Option<String>,
}

pub type OptimizationTrace = AscentTrace<()>;

impl<I> AscentTrace<I> {
    pub fn final_value(&self) -> f64 {
        self.records.last().map(|r| r.value).unwrap_or(f64::NAN)
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }
}

impl OptimizationTrace {
    /// Columns `iteration, J, grad_norm, alpha`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w)?;
        wtr.write_record(["iteration", "J", "grad_norm", "alpha"])?;
        for r in &self.records {
            wtr.serialize((r.iteration, r.value, r.grad_norm, r.alpha))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Runs `f <- f + alpha grad J`. Errors from the objective are returned
/// alongside the partial trace.
pub fn ascend<O: Objective>(
    objective: &mut O,
    field0: &ControlField,
    config: &OptimizerConfig,
) -> Result<(AscentTrace<O::Info>, Option<(usize, Error)>)> {
    config.validate()?;
    let mut field = field0.clone();
    let mut alpha = config.alpha;
    let mut records = Vec::new();
    let mut stop = StopReason::MaxIterations;
    let mut failure = None;
    for iteration in 0..config.max_iters {
        let (value, grad, info) = match objective.evaluate(&field, iteration) {
            Ok(v) => v,
            Err(e) => {
                failure = Some((iteration, e));
                stop = StopReason::SourceFailure;
                break;
            }
        };
        let grad_norm = l2(&grad);
        let mut record = StepRecord {
            iteration,
            value,
            grad_norm,
            alpha: 0.0,
            info,
        };
        if value >= config.threshold {
            records.push(record);
            stop = StopReason::Converged;
            break;
        }
        let step = |a: f64| -> Result<ControlField> {
            field.with_amplitudes(
                field
                    .amplitudes()
                    .iter()
                    .zip(&grad)
                    .map(|(f, g)| f + a * g)
                    .collect(),
            )
        };
        match config.adaptation {
            Adaptation::Fixed => {
                record.alpha = alpha;
                records.push(record);
                field = match step(alpha) {
                    Ok(f) => f,
                    Err(e) => {
                        failure = Some((iteration, e));
                        stop = StopReason::SourceFailure;
                        break;
                    }
                };
            }
            Adaptation::DoublingHalving => {
                let mut accepted = None;
                let mut a = alpha;
                for _ in 0..=MAX_HALVINGS {
                    let trial = match step(a)
                        .and_then(|f| objective.value(&f, iteration).map(|v| (f, v)))
                    {
                        Ok(t) => t,
                        Err(e) => {
                            failure = Some((iteration, e));
                            break;
                        }
                    };
                    if trial.1 > value {
                        accepted = Some((trial.0, a));
                        break;
                    }
                    a *= 0.5;
                }
                if failure.is_some() {
                    records.push(record);
                    stop = StopReason::SourceFailure;
                    break;
                }
                match accepted {
                    Some((f, a)) => {
                        record.alpha = a;
                        records.push(record);
                        field = f;
                        alpha = 2.0 * a;
                    }
                    None => {
                        records.push(record);
                        stop = StopReason::Stalled;
                        break;
                    }
                }
            }
        }
    }
    let trace = AscentTrace {
        records,
        field,
        stop,
        failure: failure.as_ref().map(|(_, e)| e.to_string()),
    };
    Ok((trace, failure))
}

/// Model-based objective using the exact or finite-difference gradient.
pub struct ModelObjective<'a> {
    problem: &'a StatePreparationProblem,
    source: GradientSource,
}

impl<'a> ModelObjective<'a> {
    pub fn new(problem: &'a StatePreparationProblem, source: GradientSource) -> Result<Self> {
        if source == GradientSource::Measured {
            return Err(Error::InvalidParameter(
                "measured gradients need a learning protocol".into(),
            ));
        }
        Ok(Self { problem, source })
    }
}

impl Objective for ModelObjective<'_> {
    type Info = ();

    fn evaluate(&mut self, field: &ControlField, _iteration: usize) -> Result<(f64, Vec<f64>, ())> {
        let report = match self.source {
            GradientSource::ModelFiniteDifference { delta } => {
                finite_difference_gradient(self.problem, field, delta)?
            }
            _ => analytic_gradient(self.problem, field)?,
        };
        Ok((report.value, report.gradient, ()))
    }

    fn value(&mut self, field: &ControlField, _iteration: usize) -> Result<f64> {
        fidelity(self.problem, field)
    }
}

/// Gradient ascent with a model gradient source.
pub fn gradient_ascent(
    problem: &StatePreparationProblem,
    field0: &ControlField,
    config: &OptimizerConfig,
) -> Result<OptimizationTrace> {
    let mut objective = ModelObjective::new(problem, config.source)?;
    let (trace, failure) = ascend(&mut objective, field0, config)?;
    match failure {
        Some((iteration, e)) => Err(Error::Optimizer {
            iteration,
            source: Box::new(e),
        }),
        None => Ok(trace),
    }
}

/// `s_min <= SINGULAR_TOL * s_max` marks a singular control.
pub const SINGULAR_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SingularityReport {
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
    pub is_singular: bool,
    /// Traceless, unit HS norm; present when singular.
    pub null_direction: Option<HermitianMatrix>,
    /// Number of grid times used (`N + 1`).
    pub grid_points: usize,
    /// Fewer grid times than basis elements: singularity can still be
    /// certified, completeness cannot.
    pub insufficient_grid: bool,
    /// `max_k |<v, U_k† Hc U_k>|` for the reported direction.
    pub max_overlap: Option<f64>,
}

/// Rows `<B_m, U_k† Hc U_k>` for `k = 0..N`.
pub fn orbit_matrix(traj: &Trajectory, basis: &OperatorBasis) -> Result<DMatrix<f64>> {
    let hc = traj.system().control();
    let rows = traj
        .prefix_unitaries()
        .par_iter()
        .map(|u| basis.coefficients(hc.conjugate_by(u).matrix()))
        .collect::<Result<Vec<_>>>()?;
    let cols = basis.len();
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Looks for `v` with `<v, U_t† Hc U_t> = 0` at every grid time.
pub fn detect_singular_control(
    system: &ControlSystem,
    field: &ControlField,
    basis: &OperatorBasis,
) -> Result<SingularityReport> {
    if basis.dim() != system.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            found: basis.dim(),
        });
    }
    let traj = propagate(system, field)?;
    let r = orbit_matrix(&traj, basis)?;
    let grid_points = r.nrows();
    let cols = r.ncols();
    // Zero rows leave singular values unchanged but give a full right basis.
    let padded = if grid_points < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (grid_points, cols)).copy_from(&r);
        p
    } else {
        r.clone()
    };
    let svd = nalgebra::SVD::try_new(padded, false, true, f64::EPSILON, 10_000).ok_or(
        Error::NoConvergence {
            operation: "orbit matrix SVD",
            dim: cols,
            norm: r.norm(),
        },
    )?;
    let sv = &svd.singular_values;
    let (imin, s_min) = sv
        .iter()
        .cloned()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |acc, (i, s)| if s < acc.1 { (i, s) } else { acc },
        );
    let s_max = sv.iter().cloned().fold(0.0, f64::max);
    let is_singular = s_min <= SINGULAR_TOL * s_max;
    let (null_direction, max_overlap) = if is_singular {
        let vt = svd.v_t.as_ref().expect("requested");
        let mut v: Vec<f64> = vt.row(imin).iter().cloned().collect();
        let lead = v
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let overlap = (r.clone() * nalgebra::DVector::from_column_slice(&v)).amax();
        (
            Some(HermitianMatrix::from_hermitian_part(&basis.resum(&v)?)),
            Some(overlap),
        )
    } else {
        (None, None)
    };
    Ok(SingularityReport {
        smallest_singular_value: s_min,
        largest_singular_value: s_max,
        is_singular,
        null_direction,
        grid_points,
        insufficient_grid: grid_points < cols,
        max_overlap,
    })
}
