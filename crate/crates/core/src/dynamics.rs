//! Piecewise-constant controlled evolution `H(t) = H0 + f(t) Hc` and the
//! dynamical Lie algebra test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{CMatrix, HermitianEigen, HermitianMatrix, PureState, UnitaryMatrix};

/// Drift, control and measured observable of a single-field system.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSystem {
    drift: HermitianMatrix,
    control: HermitianMatrix,
    observable: HermitianMatrix,
}

impl ControlSystem {
    pub fn new(
        drift: HermitianMatrix,
        control: HermitianMatrix,
        observable: HermitianMatrix,
    ) -> Result<Self> {
        let d = drift.dim();
        for m in [&control, &observable] {
            if m.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.dim(),
                });
            }
        }
        for m in [&drift, &control, &observable] {
            if !m.is_traceless() {
                return Err(Error::NotTraceless {
                    trace: m.trace().abs(),
                });
            }
        }
        Ok(Self {
            drift,
            control,
            observable,
        })
    }

    /// System whose measured observable is the control Hamiltonian.
    pub fn with_control_observable(
        drift: HermitianMatrix,
        control: HermitianMatrix,
    ) -> Result<Self> {
        let observable = control.clone();
        Self::new(drift, control, observable)
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn drift(&self) -> &HermitianMatrix {
        &self.drift
    }

    pub fn control(&self) -> &HermitianMatrix {
        &self.control
    }

    pub fn observable(&self) -> &HermitianMatrix {
        &self.observable
    }

    pub fn replace_observable(&self, observable: HermitianMatrix) -> Result<Self> {
        Self::new(self.drift.clone(), self.control.clone(), observable)
    }

    pub fn replace_control(&self, control: HermitianMatrix) -> Result<Self> {
        Self::new(self.drift.clone(), control, self.observable.clone())
    }

    /// `H0 + f Hc`.
    pub fn hamiltonian(&self, f: f64) -> HermitianMatrix {
        self.drift
            .add_scaled(&self.control, f)
            .expect("dimensions checked at construction")
    }

    /// The system with drift and control negated, generating the inverse
    /// evolution when the field is played backwards.
    pub fn time_reversed(&self) -> Self {
        Self {
            drift: self.drift.neg(),
            control: self.control.neg(),
            observable: self.observable.clone(),
        }
    }
}

/// Piecewise-constant amplitudes on a uniform grid of width `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlField {
    dt: f64,
    amplitudes: Vec<f64>,
}

impl ControlField {
    pub fn new(dt: f64, amplitudes: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        if amplitudes.is_empty() {
            return Err(Error::InvalidParameter(
                "control field needs at least one interval".into(),
            ));
        }
        if let Some(a) = amplitudes.iter().find(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite amplitude {a}")));
        }
        Ok(Self { dt, amplitudes })
    }

    pub fn constant(dt: f64, n_steps: usize, value: f64) -> Result<Self> {
        Self::new(dt, vec![value; n_steps])
    }

    pub fn n_steps(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn total_time(&self) -> f64 {
        self.dt * self.amplitudes.len() as f64
    }

    /// Same grid with new amplitudes.
    pub fn with_amplitudes(&self, amplitudes: Vec<f64>) -> Result<Self> {
        if amplitudes.len() != self.amplitudes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.amplitudes.len(),
                found: amplitudes.len(),
            });
        }
        Self::new(self.dt, amplitudes)
    }

    /// Splits each interval into `factor` equal sub-intervals carrying the
    /// same amplitude. The represented field is unchanged.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidParameter(
                "refinement factor must be >= 1".into(),
            ));
        }
        let amps = self
            .amplitudes
            .iter()
            .flat_map(|a| std::iter::repeat_n(*a, factor))
            .collect();
        Self::new(self.dt / factor as f64, amps)
    }

    pub fn reversed(&self) -> Self {
        let mut amps = self.amplitudes.clone();
        amps.reverse();
        Self {
            dt: self.dt,
            amplitudes: amps,
        }
    }

    /// `self` followed by `next`; both must share `dt`.
    pub fn concat(&self, next: &ControlField) -> Result<Self> {
        if (self.dt - next.dt).abs() > 1e-15 * self.dt.max(next.dt) {
            return Err(Error::InvalidParameter(format!(
                "cannot concatenate fields with dt {} and {}",
                self.dt, next.dt
            )));
        }
        let mut amps = self.amplitudes.clone();
        amps.extend_from_slice(&next.amplitudes);
        Self::new(self.dt, amps)
    }
}

/// Random piecewise-constant field: i.i.d. `N(0, amplitude^2)` values,
/// `steps_per_segment` intervals per segment of duration `segment_time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomFieldSpec {
    pub amplitude: f64,
    pub steps_per_segment: usize,
}

impl Default for RandomFieldSpec {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            steps_per_segment: 10,
        }
    }
}

impl RandomFieldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "random field amplitude must be >= 0, got {}",
                self.amplitude
            )));
        }
        if self.steps_per_segment == 0 {
            return Err(Error::InvalidParameter(
                "steps_per_segment must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn sample<R: rand::Rng + ?Sized>(
        &self,
        segment_time: f64,
        n_segments: usize,
        rng: &mut R,
    ) -> Result<ControlField> {
        self.validate()?;
        let n = self.steps_per_segment * n_segments;
        let amps = (0..n)
            .map(|_| self.amplitude * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        ControlField::new(segment_time / self.steps_per_segment as f64, amps)
    }
}

/// Step and cumulative propagators of one field.
#[derive(Debug, Clone)]
pub struct Trajectory {
    system: ControlSystem,
    field: ControlField,
    step_eigens: Vec<HermitianEigen>,
    steps: Vec<UnitaryMatrix>,
    prefixes: Vec<UnitaryMatrix>,
}

/// Solves the Schrödinger equation for a piecewise-constant field.
///
/// `steps[k] = exp(-i dt (H0 + f_k Hc))` and `prefixes[k+1] = steps[k] prefixes[k]`
/// with `prefixes[0] = 1`, so `prefixes[N]` is the endpoint map `U_T`.
pub fn propagate(system: &ControlSystem, field: &ControlField) -> Result<Trajectory> {
    let d = system.dim();
    let mut step_eigens = Vec::with_capacity(field.n_steps());
    let mut steps = Vec::with_capacity(field.n_steps());
    let mut prefixes = Vec::with_capacity(field.n_steps() + 1);
    prefixes.push(UnitaryMatrix::identity(d));
    for &f in field.amplitudes() {
        let eig = system.hamiltonian(f).eigen()?;
        let step = UnitaryMatrix::from_unchecked(eig.exp(field.dt()));
        let next = step.mul(prefixes.last().expect("non-empty"));
        prefixes.push(next);
        steps.push(step);
        step_eigens.push(eig);
    }
    Ok(Trajectory {
        system: system.clone(),
        field: field.clone(),
        step_eigens,
        steps,
        prefixes,
    })
}

impl Trajectory {
    pub fn system(&self) -> &ControlSystem {
        &self.system
    }

    pub fn field(&self) -> &ControlField {
        &self.field
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step_unitaries(&self) -> &[UnitaryMatrix] {
        &self.steps
    }

    pub fn prefix_unitaries(&self) -> &[UnitaryMatrix] {
        &self.prefixes
    }

    pub(crate) fn step_eigens(&self) -> &[HermitianEigen] {
        &self.step_eigens
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k > self.n_steps() {
            return Err(Error::IndexOutOfRange {
                index: k,
                max: self.n_steps(),
            });
        }
        Ok(())
    }

    /// `U_{t_k}` with `t_k = k dt`.
    pub fn unitary_at(&self, k: usize) -> Result<&UnitaryMatrix> {
        self.check_index(k)?;
        Ok(&self.prefixes[k])
    }

    pub fn endpoint(&self) -> &UnitaryMatrix {
        self.prefixes.last().expect("prefixes always holds U_0")
    }

    /// `U_{t_k} |psi0>`.
    pub fn evolve_state(&self, psi0: &PureState, k: usize) -> Result<PureState> {
        self.check_index(k)?;
        if psi0.dim() != self.system.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.system.dim(),
                found: psi0.dim(),
            });
        }
        Ok(self.prefixes[k].apply(psi0))
    }

    /// `U_{t_k}† M U_{t_k}` for the system's observable.
    pub fn conjugated_observable(&self, k: usize) -> Result<HermitianMatrix> {
        self.conjugated(self.system.observable(), k)
    }

    /// `U_{t_k}† A U_{t_k}` for an arbitrary Hermitian `A`.
    pub fn conjugated(&self, a: &HermitianMatrix, k: usize) -> Result<HermitianMatrix> {
        self.check_index(k)?;
        Ok(a.conjugate_by(&self.prefixes[k]))
    }
}

/// Outcome of the dynamical Lie algebra closure.
#[derive(Debug, Clone)]
pub struct LieClosureReport {
    pub dimension_found: usize,
    pub is_fully_controllable: bool,
    /// False when `max_depth` rounds ran out before the span stopped growing.
    pub closed: bool,
    pub depth_used: usize,
    /// Orthonormal anti-Hermitian spanning set (real inner product `Re Tr{A†B}`).
    pub basis: Vec<CMatrix>,
}

const LIE_RANK_TOL: f64 = 1e-10;

struct RealSpan {
    vectors: Vec<Vec<f64>>,
}

impl RealSpan {
    fn vectorize(m: &CMatrix) -> Vec<f64> {
        m.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Adds `m` if it is independent of the span; returns whether it was added.
    fn try_add(&mut self, m: &CMatrix) -> bool {
        let mut v = Self::vectorize(m);
        let n0 = Self::dot(&v, &v).sqrt();
        if !(n0 > f64::MIN_POSITIVE) {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n0);
        // Two passes of classical Gram-Schmidt.
        for _ in 0..2 {
            for b in &self.vectors {
                let c = Self::dot(b, &v);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let r = Self::dot(&v, &v).sqrt();
        if r > LIE_RANK_TOL {
            v.iter_mut().for_each(|x| *x /= r);
            self.vectors.push(v);
            true
        } else {
            false
        }
    }

    fn matrices(&self, d: usize) -> Vec<CMatrix> {
        self.vectors
            .iter()
            .map(|v| {
                CMatrix::from_iterator(
                    d,
                    d,
                    v.chunks(2).map(|c| num_complex::Complex64::new(c[0], c[1])),
                )
            })
            .collect()
    }
}

/// Span of `{iH0, iHc}` under repeated commutators.
pub fn lie_closure(system: &ControlSystem, max_depth: usize) -> Result<LieClosureReport> {
    if max_depth < 1 {
        return Err(Error::InvalidParameter("max_depth must be >= 1".into()));
    }
    let d = system.dim();
    let full = d * d - 1;
    let i = num_complex::Complex64::new(0.0, 1.0);
    let mut span = RealSpan { vectors: vec![] };
    let mut elements: Vec<CMatrix> = Vec::new();
    let mut frontier: Vec<CMatrix> = Vec::new();
    for g in [system.drift(), system.control()] {
        let a = g.matrix() * i;
        if span.try_add(&a) {
            elements.push(a.clone());
            frontier.push(a);
        }
    }
    let mut closed = false;
    let mut depth = 0;
    while depth < max_depth && !closed {
        depth += 1;
        let mut next = Vec::new();
        for a in &frontier {
            let snapshot = elements.len();
            for b in elements[..snapshot].to_vec() {
                let c = a * &b - &b * a;
                if span.try_add(&c) {
                    elements.push(c.clone());
                    next.push(c);
                }
                if span.vectors.len() == full {
                    break;
                }
            }
            if span.vectors.len() == full {
                break;
            }
        }
        if next.is_empty() || span.vectors.len() == full {
            closed = true;
        }
        frontier = next;
    }
    let dimension_found = span.vectors.len();
    Ok(LieClosureReport {
        dimension_found,
        is_fully_controllable: dimension_found == full,
        closed,
        depth_used: depth,
        basis: span.matrices(d),
    })
}
