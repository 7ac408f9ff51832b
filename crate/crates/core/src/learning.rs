//! Measurement-driven optimization: the fidelity and its gradient are
//! estimated from single-observable records taken while a random probe
//! field drives the system after the control window.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::csvio::csv_writer;
use crate::dynamics::{propagate, ControlField, RandomFieldSpec, Trajectory};
use crate::error::{Error, Result};
use crate::landscape::{
    ascend, fidelity, AscentTrace, Objective, OptimizerConfig, StatePreparationProblem, StopReason,
};
use crate::operator::{gell_mann_basis, DensityMatrix, OperatorBasis};
use crate::rng::Streams;
use crate::tomography::{
    build_measurement_map, reconstruct, reconstruction_error, simulate_record, BlochVector,
    MeasurementMap, NoiseModel, ReconstructionMethod, SampleSchedule, PROBE_INVERTIBILITY_TOL,
};

/// Probe redraws before giving up on an invertible map.
pub const PROBE_ATTEMPTS: usize = 5;

#[derive(Debug, Clone)]
pub struct LearningProtocol {
    pub problem: StatePreparationProblem,
    /// Control window length `N_c` in grid steps.
    pub control_steps: usize,
    pub dt: f64,
    /// Probe amplitude scale; `steps_per_segment` is the Haar time in steps.
    pub probe: RandomFieldSpec,
    /// Number of samples `K >= d^2 - 1`, taken at multiples of the Haar time.
    pub samples: usize,
    pub noise: NoiseModel,
    /// Central-difference step `delta_f`.
    pub delta: f64,
    /// Share one probe across all finite-difference measurements of an
    /// iteration (noise is still redrawn per measurement).
    pub probe_reuse: bool,
    pub method: ReconstructionMethod,
    /// Compute ground-truth columns of the trace. Never read by the update.
    pub diagnostics: bool,
    basis: OperatorBasis,
    /// `<psi_g|B_m|psi_g>`.
    target_coeffs: Vec<f64>,
}

impl LearningProtocol {
    /// Noiseless defaults: `K = d^2 - 1`, direct inversion, `delta_f = 1e-5`.
    pub fn new(
        problem: StatePreparationProblem,
        control_steps: usize,
        dt: f64,
        probe: RandomFieldSpec,
    ) -> Result<Self> {
        let d = problem.dim();
        let basis = gell_mann_basis(d)?;
        let target_coeffs = basis.coefficients(&problem.target().projector())?;
        let p = Self {
            problem,
            control_steps,
            dt,
            probe,
            samples: d * d - 1,
            noise: NoiseModel::None,
            delta: 1e-5,
            probe_reuse: true,
            method: ReconstructionMethod::DirectInverse,
            diagnostics: true,
            basis,
            target_coeffs,
        };
        p.validate()?;
        Ok(p)
    }

    /// Switches to a noise model; noisy models use `delta_f = 1e-3`.
    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        noise.validate()?;
        self.noise = noise;
        if !noise.is_noiseless() {
            self.delta = 1e-3;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.problem.dim();
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "dt must be > 0, got {}",
                self.dt
            )));
        }
        if self.samples < d * d - 1 {
            return Err(Error::InvalidSchedule(format!(
                "{} samples, need at least {}",
                self.samples,
                d * d - 1
            )));
        }
        self.probe.validate()?;
        self.noise.validate()
    }

    pub fn basis(&self) -> &OperatorBasis {
        &self.basis
    }

    pub fn schedule(&self) -> Result<SampleSchedule> {
        SampleSchedule::multiples(
            self.probe.steps_per_segment,
            self.samples,
            self.problem.dim(),
        )
    }

    /// Haar time `T*` in time units.
    pub fn haar_time(&self) -> f64 {
        self.probe.steps_per_segment as f64 * self.dt
    }

    fn check_field(&self, field: &ControlField) -> Result<()> {
        if field.n_steps() != self.control_steps
            && !(self.control_steps == 0 && field.n_steps() == 1)
        {
            return Err(Error::DimensionMismatch {
                expected: self.control_steps,
                found: field.n_steps(),
            });
        }
        if (field.dt() - self.dt).abs() > 1e-12 * self.dt {
            return Err(Error::InvalidParameter(format!(
                "field dt {} differs from protocol dt {}",
                field.dt(),
                self.dt
            )));
        }
        Ok(())
    }

    /// `<psi_g| (1/d + sum x_m B_m) |psi_g>`.
    pub fn overlap_estimate(&self, x: &BlochVector) -> f64 {
        1.0 / self.problem.dim() as f64
            + x.coeffs()
                .iter()
                .zip(&self.target_coeffs)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn target_coeffs(&self) -> &[f64] {
        &self.target_coeffs
    }
}

/// One probe realization and its model-built map.
#[derive(Debug, Clone)]
pub struct Probe {
    pub field: ControlField,
    pub trajectory: Trajectory,
    pub map: MeasurementMap,
    pub seed: u64,
}

/// Draws probes until the map is invertible (`s_min > 1e-8 s_max`).
pub fn draw_probe(protocol: &LearningProtocol, streams: &Streams) -> Result<Probe> {
    let schedule = protocol.schedule()?;
    let segment = protocol.haar_time();
    for attempt in 0..PROBE_ATTEMPTS {
        let mut rng = streams.stream(attempt as u64);
        let field = protocol.probe.sample(segment, protocol.samples, &mut rng)?;
        let trajectory = propagate(protocol.problem.system(), &field)?;
        let map = build_measurement_map(&trajectory, &schedule, protocol.basis())?;
        if map.is_invertible_at(PROBE_INVERTIBILITY_TOL) {
            return Ok(Probe {
                field,
                trajectory,
                map,
                seed: streams.seed(),
            });
        }
    }
    Err(Error::ProbeFailure {
        attempts: PROBE_ATTEMPTS,
    })
}

#[derive(Debug, Clone)]
pub struct Measurement {
    /// Raw estimate; noise can push it outside `[0, 1]`.
    pub j_est: f64,
    pub x_est: BlochVector,
    /// `y_noisy - y_exact` when noise was simulated.
    pub noise: Option<Vec<f64>>,
}

/// Tomography of `rho` (the state at the end of the control window).
pub fn measure_state<R: Rng + ?Sized>(
    protocol: &LearningProtocol,
    rho: &DensityMatrix,
    probe: &Probe,
    rng: &mut R,
) -> Result<Measurement> {
    let schedule = protocol.schedule()?;
    let record = simulate_record(&probe.trajectory, &schedule, rho, protocol.noise, rng)?;
    let x_est = reconstruct(&probe.map, &record, protocol.method)?;
    Ok(Measurement {
        j_est: protocol.overlap_estimate(&x_est),
        x_est,
        noise: record.noise,
    })
}

fn state_after(protocol: &LearningProtocol, field: &ControlField) -> Result<DensityMatrix> {
    if protocol.control_steps == 0 {
        return Ok(protocol.problem.initial().density_matrix());
    }
    let traj = propagate(protocol.problem.system(), field)?;
    Ok(traj
        .endpoint()
        .apply(protocol.problem.initial())
        .density_matrix())
}

fn measure_with_probe<R: Rng + ?Sized>(
    protocol: &LearningProtocol,
    field: &ControlField,
    probe: &Probe,
    rng: &mut R,
) -> Result<Measurement> {
    measure_state(protocol, &state_after(protocol, field)?, probe, rng)
}

/// Estimates `J` for `field` with a freshly drawn probe.
pub fn measure_fidelity<R: Rng + ?Sized>(
    protocol: &LearningProtocol,
    field: &ControlField,
    rng: &mut R,
) -> Result<(f64, BlochVector)> {
    protocol.check_field(field)?;
    let streams = Streams::new(rng.random());
    let probe = draw_probe(protocol, &streams.child(0))?;
    let m = measure_with_probe(protocol, field, &probe, &mut streams.stream(1))?;
    Ok((m.j_est, m.x_est))
}

/// Central differences of the estimated fidelity; noise substream `2j` for
/// `f + delta e_j` and `2j + 1` for `f - delta e_j`.
pub fn measured_gradient_with_probe(
    protocol: &LearningProtocol,
    field: &ControlField,
    probe: Option<&Probe>,
    streams: &Streams,
) -> Result<Vec<f64>> {
    protocol.check_field(field)?;
    if protocol.control_steps == 0 {
        return Ok(vec![]);
    }
    let delta = protocol.delta;
    (0..field.n_steps())
        .into_par_iter()
        .map(|j| {
            let mut pm = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let idx = (2 * j + s) as u64;
                let mut amps = field.amplitudes().to_vec();
                amps[j] += sign * delta;
                let shifted = field.with_amplitudes(amps)?;
                let own;
                let p = match probe {
                    Some(p) => p,
                    None => {
                        own = draw_probe(protocol, &streams.child(1).child(idx))?;
                        &own
                    }
                };
                pm[s] = measure_with_probe(protocol, &shifted, p, &mut streams.stream(idx))?.j_est;
            }
            Ok((pm[0] - pm[1]) / (2.0 * delta))
        })
        .collect()
}

/// Measured gradient, drawing the probe(s) from `rng`.
pub fn measured_gradient<R: Rng + ?Sized>(
    protocol: &LearningProtocol,
    field: &ControlField,
    rng: &mut R,
) -> Result<Vec<f64>> {
    protocol.check_field(field)?;
    if protocol.control_steps == 0 {
        return Ok(vec![]);
    }
    let streams = Streams::new(rng.random());
    let probe = if protocol.probe_reuse {
        Some(draw_probe(protocol, &streams.child(0))?)
    } else {
        None
    };
    measured_gradient_with_probe(protocol, field, probe.as_ref(), &streams.child(2))
}

/// Per-iteration diagnostics of the learning loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LearningInfo {
    pub j_est: f64,
    /// Simulator ground truth; NaN when diagnostics are off.
    pub j_true: f64,
    pub recon_err: f64,
    pub probe_seed: u64,
}

pub type LearningTrace = AscentTrace<LearningInfo>;

/// Columns `iter, J_est, J_true, recon_err, grad_norm, alpha, probe_seed`.
pub fn write_learning_csv<W: Write>(trace: &LearningTrace, w: W) -> Result<()> {
    let mut wtr = csv_writer(w)?;
    wtr.write_record([
        "iter",
        "J_est",
        "J_true",
        "recon_err",
        "grad_norm",
        "alpha",
        "probe_seed",
    ])?;
    for r in &trace.records {
        wtr.serialize((
            r.iteration,
            r.info.j_est,
            r.info.j_true,
            r.info.recon_err,
            r.grad_norm,
            r.alpha,
            r.info.probe_seed,
        ))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Iteration `i` uses `streams.child(i)`: child 0 for the probe, stream 1
/// for the value measurement, child 2 for the gradient and child 3 for
/// trial values.
struct LearningObjective<'a> {
    protocol: &'a LearningProtocol,
    streams: Streams,
    probe: Option<(usize, Probe)>,
    trials: u64,
}

impl LearningObjective<'_> {
    fn probe_for(&mut self, iteration: usize) -> Result<Probe> {
        if let Some((i, p)) = &self.probe {
            if *i == iteration {
                return Ok(p.clone());
            }
        }
        let p = draw_probe(
            self.protocol,
            &self.streams.child(iteration as u64).child(0),
        )?;
        self.probe = Some((iteration, p.clone()));
        self.trials = 0;
        Ok(p)
    }
}

impl Objective for LearningObjective<'_> {
    type Info = LearningInfo;

    fn evaluate(
        &mut self,
        field: &ControlField,
        iteration: usize,
    ) -> Result<(f64, Vec<f64>, LearningInfo)> {
        let it = self.streams.child(iteration as u64);
        let probe = self.probe_for(iteration)?;
        let m = measure_with_probe(self.protocol, field, &probe, &mut it.stream(1))?;
        let grad = measured_gradient_with_probe(
            self.protocol,
            field,
            self.protocol.probe_reuse.then_some(&probe),
            &it.child(2),
        )?;
        let (j_true, recon_err) = if self.protocol.diagnostics {
            let rho = state_after(self.protocol, field)?;
            let x = BlochVector::from_density(&rho, self.protocol.basis())?;
            (
                fidelity(&self.protocol.problem, field)?,
                reconstruction_error(&x, &m.x_est)?,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let info = LearningInfo {
            j_est: m.j_est,
            j_true,
            recon_err,
            probe_seed: probe.seed,
        };
        Ok((m.j_est.clamp(0.0, 1.0), grad, info))
    }

    fn value(&mut self, field: &ControlField, iteration: usize) -> Result<f64> {
        let probe = self.probe_for(iteration)?;
        let stream = self
            .streams
            .child(iteration as u64)
            .child(3)
            .stream(self.trials);
        self.trials += 1;
        let mut rng = stream;
        Ok(measure_with_probe(self.protocol, field, &probe, &mut rng)?
            .j_est
            .clamp(0.0, 1.0))
    }
}

/// Gradient ascent driven only by reconstructed quantities. Repeated probe
/// failure after the first iteration ends the run with the partial trace.
pub fn run_learning_control<R: Rng + ?Sized>(
    protocol: &LearningProtocol,
    field0: &ControlField,
    config: &OptimizerConfig,
    rng: &mut R,
) -> Result<LearningTrace> {
    protocol.validate()?;
    protocol.check_field(field0)?;
    let mut objective = LearningObjective {
        protocol,
        streams: Streams::new(rng.random()),
        probe: None,
        trials: 0,
    };
    let (trace, failure) = ascend(&mut objective, field0, config)?;
    match failure {
        None => Ok(trace),
        Some((iteration, Error::ProbeFailure { .. })) if iteration > 0 => {
            debug_assert_eq!(trace.stop, StopReason::SourceFailure);
            Ok(trace)
        }
        Some((iteration, e)) => Err(Error::Optimizer {
            iteration,
            source: Box::new(e),
        }),
    }
}
