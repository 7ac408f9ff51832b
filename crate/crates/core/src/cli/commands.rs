use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::SVD;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::config::{parse_state, ExperimentConfig, RowSourceSpec, StateChoice, Subcommand};
use crate::csvio::csv_writer;
use crate::dynamics::{lie_closure, propagate, ControlField, ControlSystem, RandomFieldSpec};
use crate::error::{Error, Result};
use crate::landscape::{
    detect_singular_control, fidelity_of, gradient_ascent, orbit_matrix, StatePreparationProblem,
};
use crate::learning::{run_learning_control, write_learning_csv, LearningProtocol};
use crate::operator::{
    gell_mann_basis, haar_state, max_abs_diff, pauli, DensityMatrix, HermitianMatrix, MatrixJson,
    PureState,
};
use crate::presets::{preset, site_operator};
use crate::rng::{Streams, SCHEME};
use crate::tomography::{
    build_measurement_map, reconstruct, reconstruction_error, ridge_heuristic, simulate_record,
    BlochVector, NoiseModel, ReconstructionMethod, SampleSchedule, TomographyJson,
};
use crate::verification::{
    run_flattening_experiment, run_inverse_norm_experiment, run_moments_experiment,
    run_noise_sensitivity_experiment, run_tail_experiment, sigma_z_type, RowSource,
};

/// Lie closure is reported by `evolve` up to this dimension.
const EVOLVE_CLOSURE_MAX_DIM: usize = 16;

// Stream families of the run seed.
const FIELD_STREAMS: u64 = 0;
const STATE_STREAMS: u64 = 1;
const EXPERIMENT_STREAMS: u64 = 2;
const LEARNING_STREAMS: u64 = 3;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub seed: u64,
    pub rng: &'static str,
    pub output_dir: PathBuf,
    pub config: ExperimentConfig,
    pub artifacts: Vec<Artifact>,
}

struct Outputs {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Outputs {
    fn create(root: &Path, sub: Subcommand) -> Result<Self> {
        let base = root.join(sub.name());
        fs::create_dir_all(&base)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        let mut dir = base.join(&stamp);
        let mut k = 1;
        while dir.exists() {
            dir = base.join(format!("{stamp}-{k}"));
            k += 1;
        }
        fs::create_dir(&dir)?;
        Ok(Self {
            dir,
            artifacts: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.artifacts.push(Artifact {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.put(name, buf)
    }

    fn json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut buf = serde_json::to_vec_pretty(value)?;
        buf.push(b'\n');
        self.put(name, buf)
    }
}

/// Runs the configured subcommand, writes its artifacts and `manifest.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    match cfg.workers {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(|| run_inner(cfg)),
        None => run_inner(cfg),
    }
}

fn run_inner(cfg: &ExperimentConfig) -> Result<Manifest> {
    let mut out = Outputs::create(&cfg.out, cfg.subcommand)?;
    let streams = Streams::new(cfg.seed);
    let summary = match cfg.subcommand {
        Subcommand::Evolve => evolve(cfg, &streams, &mut out)?,
        Subcommand::Tomo => tomo(cfg, &streams, &mut out)?,
        Subcommand::SingularCheck => singular_check(cfg, &streams, &mut out)?,
        Subcommand::Optimize => optimize(cfg, &streams, &mut out)?,
        Subcommand::Learn => learn(cfg, &streams, &mut out)?,
        Subcommand::Moments => moments(cfg, &streams, &mut out)?,
        Subcommand::BoundEq4 => bound_eq4(cfg, &streams, &mut out)?,
        Subcommand::BoundEq5 => bound_eq5(cfg, &streams, &mut out)?,
        Subcommand::Flattening => flattening(cfg, &streams, &mut out)?,
        Subcommand::NoiseSensitivity => noise_sensitivity(cfg, &streams, &mut out)?,
    };
    out.json("summary.json", &summary)?;
    let manifest = Manifest {
        tool: "qlandscape",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: cfg.subcommand.name(),
        seed: cfg.seed,
        rng: SCHEME,
        output_dir: out.dir.clone(),
        config: cfg.clone(),
        artifacts: out.artifacts.clone(),
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    fs::write(out.dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// The configured system, with the optional Pauli control override applied.
pub fn build_system(cfg: &ExperimentConfig) -> Result<ControlSystem> {
    let s = &cfg.system;
    let system = match &s.drift {
        Some(drift) => {
            let h0 = HermitianMatrix::new(MatrixJson::from_path(drift)?)?;
            let hc_path = s
                .control
                .as_ref()
                .ok_or_else(|| Error::Config("system.drift needs system.control".into()))?;
            let hc = HermitianMatrix::new(MatrixJson::from_path(hc_path)?)?;
            let m = match &s.observable {
                Some(p) => HermitianMatrix::new(MatrixJson::from_path(p)?)?,
                None => hc.clone(),
            };
            ControlSystem::new(h0, hc, m)?
        }
        None => preset(&s.preset, &s.params)?,
    };
    let Some(name) = &s.control_pauli else {
        return Ok(system);
    };
    let d = system.dim();
    if !d.is_power_of_two() {
        return Err(Error::Config(format!(
            "control_pauli needs a qubit register, dimension is {d}"
        )));
    }
    let op = match name.as_str() {
        "x" => pauli::x(),
        "y" => pauli::y(),
        "z" => pauli::z(),
        other => return Err(Error::Config(format!("unknown Pauli `{other}`"))),
    };
    let hc = HermitianMatrix::new(site_operator(&op, 0, d.trailing_zeros() as usize))?;
    let follows = max_abs_diff(system.observable().matrix(), system.control().matrix()) < 1e-12;
    let m = if follows {
        hc.clone()
    } else {
        system.observable().clone()
    };
    ControlSystem::new(system.drift().clone(), hc, m)
}

pub fn build_field(cfg: &ExperimentConfig, streams: &Streams) -> Result<ControlField> {
    let f = &cfg.field;
    match &f.amplitudes {
        Some(a) => ControlField::new(f.dt, a.clone()),
        None => RandomFieldSpec {
            amplitude: f.random_scale,
            steps_per_segment: f.n_steps,
        }
        .sample(
            f.n_steps as f64 * f.dt,
            1,
            &mut streams.child(FIELD_STREAMS).stream(0),
        ),
    }
}

fn pure_state(spec: &str, d: usize, streams: &Streams, stream: u64) -> Result<PureState> {
    match parse_state(spec)? {
        StateChoice::Haar => haar_state(d, &mut streams.child(STATE_STREAMS).stream(stream)),
        StateChoice::Basis(k) => PureState::basis(d, k),
        StateChoice::Mixed => Err(Error::Config(format!("`{spec}` is not a pure state"))),
    }
}

fn problem(
    cfg: &ExperimentConfig,
    system: ControlSystem,
    streams: &Streams,
) -> Result<StatePreparationProblem> {
    let d = system.dim();
    let initial = pure_state(&cfg.states.initial, d, streams, 0)?;
    let target = pure_state(&cfg.states.target, d, streams, 1)?;
    StatePreparationProblem::new(system, initial, target)
}

fn write_field(field: &ControlField, buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv_writer(buf)?;
    w.write_record(["k", "t", "f"])?;
    for (k, f) in field.amplitudes().iter().enumerate() {
        w.serialize((k, k as f64 * field.dt(), f))?;
    }
    w.flush()?;
    Ok(())
}

fn noise_sigma(noise: NoiseModel, m: &HermitianMatrix) -> Result<f64> {
    Ok(match noise {
        NoiseModel::None => 0.0,
        NoiseModel::Gaussian { sigma } => sigma,
        NoiseModel::Shot { shots } => m.spectral_norm()? / (shots as f64).sqrt(),
    })
}

fn reconstruction_method(
    cfg: &ExperimentConfig,
    m: &HermitianMatrix,
) -> Result<ReconstructionMethod> {
    if let Some(method) = cfg.reconstruction {
        return Ok(method);
    }
    if cfg.noise.is_noiseless() {
        return Ok(ReconstructionMethod::DirectInverse);
    }
    Ok(ReconstructionMethod::LeastSquares {
        ridge: ridge_heuristic(noise_sigma(cfg.noise, m)?, m.dim()),
    })
}

fn evolve(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let system = build_system(cfg)?;
    let field = build_field(cfg, streams)?;
    let problem = problem(cfg, system.clone(), streams)?;
    let traj = propagate(&system, &field)?;
    let target = problem.target();
    let mut states = Vec::with_capacity(field.n_steps() + 1);
    for k in 0..=field.n_steps() {
        states.push(traj.evolve_state(problem.initial(), k)?);
    }
    out.csv("trajectory.csv", |buf| {
        let mut w = csv_writer(buf)?;
        w.write_record(["k", "t", "f", "expect_m", "overlap_target"])?;
        for (k, psi) in states.iter().enumerate() {
            let f = field.amplitudes().get(k).copied().unwrap_or(f64::NAN);
            w.serialize((
                k,
                k as f64 * field.dt(),
                f,
                psi.expectation(system.observable()),
                target.inner(psi).norm_sqr(),
            ))?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.csv("field.csv", |buf| write_field(&field, buf))?;
    let closure = if system.dim() <= EVOLVE_CLOSURE_MAX_DIM {
        let r = lie_closure(&system, 4 * system.dim() * system.dim())?;
        json!({"dimension": r.dimension_found, "fully_controllable": r.is_fully_controllable, "closed": r.closed})
    } else {
        Value::Null
    };
    Ok(json!({
        "experiment": "evolve",
        "dim": system.dim(),
        "n_steps": field.n_steps(),
        "total_time": field.total_time(),
        "unitarity_defect": traj.endpoint().unitarity_defect(),
        "final_fidelity": fidelity_of(&problem, &traj),
        "lie_closure": closure,
    }))
}

fn tomo(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let system = build_system(cfg)?;
    let d = system.dim();
    let field = build_field(cfg, streams)?;
    let traj = propagate(&system, &field)?;
    let basis = gell_mann_basis(d)?;
    let schedule = match &cfg.schedule.times {
        Some(t) => SampleSchedule::new(t.clone(), d)?,
        None => SampleSchedule::multiples(
            cfg.schedule.step,
            cfg.schedule.samples.unwrap_or(d * d - 1),
            d,
        )?,
    };
    let rho = match parse_state(&cfg.states.tomography)? {
        StateChoice::Mixed => DensityMatrix::maximally_mixed(d),
        _ => pure_state(&cfg.states.tomography, d, streams, 2)?.density_matrix(),
    };
    let x_true = BlochVector::from_density(&rho, &basis)?;
    let record = simulate_record(
        &traj,
        &schedule,
        &rho,
        cfg.noise,
        &mut streams.child(EXPERIMENT_STREAMS).stream(0),
    )?;
    let map = build_measurement_map(&traj, &schedule, &basis)?;
    let method = reconstruction_method(cfg, system.observable())?;
    let x_est = reconstruct(&map, &record, method)?;
    let err = reconstruction_error(&x_true, &x_est)?;

    out.csv("record.csv", |buf| {
        let mut w = csv_writer(buf)?;
        w.write_record(["n", "k", "t", "y", "noise"])?;
        for (n, (&k, &y)) in schedule.times().iter().zip(&record.values).enumerate() {
            let eps = record.noise.as_ref().map_or(0.0, |e| e[n]);
            w.serialize((n, k, k as f64 * field.dt(), y, eps))?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.csv("bloch.csv", |buf| {
        let mut w = csv_writer(buf)?;
        w.write_record(["m", "x_true", "x_est"])?;
        for (m, (a, b)) in x_true.coeffs().iter().zip(x_est.coeffs()).enumerate() {
            w.serialize((m, a, b))?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.json(
        "tomography.json",
        &serde_json::to_value(TomographyJson::new(&map, &record))?,
    )?;
    Ok(json!({
        "experiment": "tomo",
        "dim": d,
        "samples": schedule.len(),
        "s_min": map.smallest_singular_value(),
        "s_max": map.largest_singular_value(),
        "condition_number": finite_or_null(map.condition_number()),
        "invertible": map.is_invertible(),
        "noise": cfg.noise,
        "method": method,
        "reconstruction_error": err,
        "physical": x_est.is_physical(&basis)?,
    }))
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn singular_check(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let system = build_system(cfg)?;
    let field = build_field(cfg, streams)?;
    let basis = gell_mann_basis(system.dim())?;
    let report = detect_singular_control(&system, &field, &basis)?;
    let orbit = orbit_matrix(&propagate(&system, &field)?, &basis)?;
    let mut sv: Vec<f64> = SVD::new(orbit, false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    out.csv("orbit_singular_values.csv", |buf| {
        let mut w = csv_writer(buf)?;
        w.write_record(["index", "singular_value"])?;
        for (i, s) in sv.iter().enumerate() {
            w.serialize((i, s))?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.csv("field.csv", |buf| write_field(&field, buf))?;
    let direction = report
        .null_direction
        .as_ref()
        .map(|v| serde_json::to_value(MatrixJson::from_matrix(v.matrix())))
        .transpose()?;
    Ok(json!({
        "experiment": "singular-check",
        "dim": system.dim(),
        "is_singular": report.is_singular,
        "smallest_singular_value": report.smallest_singular_value,
        "largest_singular_value": report.largest_singular_value,
        "grid_points": report.grid_points,
        "insufficient_grid": report.insufficient_grid,
        "max_overlap": report.max_overlap,
        "null_direction": direction,
    }))
}

fn optimize(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let problem = problem(cfg, build_system(cfg)?, streams)?;
    let field0 = build_field(cfg, streams)?;
    let trace = gradient_ascent(&problem, &field0, &cfg.optimizer)?;
    out.csv("trace.csv", |buf| trace.write_csv(buf))?;
    out.csv("field.csv", |buf| write_field(&trace.field, buf))?;
    Ok(json!({
        "experiment": "optimize",
        "dim": problem.dim(),
        "iterations": trace.records.len(),
        "initial_value": trace.records.first().map(|r| r.value),
        "final_value": trace.final_value(),
        "stop": trace.stop,
    }))
}

fn learn(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let problem = problem(cfg, build_system(cfg)?, streams)?;
    let field0 = build_field(cfg, streams)?;
    let l = &cfg.learning;
    let observable = problem.system().observable().clone();
    let probe = RandomFieldSpec {
        amplitude: l.probe_amplitude,
        steps_per_segment: l.haar_steps,
    };
    let mut protocol = LearningProtocol::new(problem, cfg.field.n_steps, cfg.field.dt, probe)?
        .with_noise(cfg.noise)?;
    if let Some(k) = l.samples {
        protocol.samples = k;
    }
    if let Some(delta) = l.delta {
        protocol.delta = delta;
    }
    protocol.probe_reuse = l.probe_reuse;
    protocol.method = reconstruction_method(cfg, &observable)?;
    protocol.validate()?;
    let trace = run_learning_control(
        &protocol,
        &field0,
        &cfg.optimizer,
        &mut streams.child(LEARNING_STREAMS).stream(0),
    )?;
    out.csv("learning.csv", |buf| write_learning_csv(&trace, buf))?;
    out.csv("field.csv", |buf| write_field(&trace.field, buf))?;
    let last = trace.records.last();
    Ok(json!({
        "experiment": "learn",
        "dim": protocol.problem.dim(),
        "iterations": trace.records.len(),
        "final_j_est": last.map(|r| r.info.j_est),
        "final_j_true": last.map(|r| r.info.j_true),
        "stop": trace.stop,
        "failure": trace.failure,
        "haar_time": protocol.haar_time(),
        "samples": protocol.samples,
        "delta": protocol.delta,
        "method": protocol.method,
    }))
}

fn moments(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let d = cfg.experiment.d;
    let r = run_moments_experiment(
        d,
        &sigma_z_type(d)?,
        cfg.experiment.n_samples,
        &streams.child(EXPERIMENT_STREAMS),
    )?;
    out.csv("moments.csv", |buf| r.write_csv(buf))?;
    out.csv("cross.csv", |buf| r.write_cross_csv(buf))?;
    Ok(r.summary())
}

fn bound_eq4(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let e = &cfg.experiment;
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for &d in &e.dims {
        let source = match e.row_source {
            RowSourceSpec::IdealHaar => RowSource::IdealHaar,
            RowSourceSpec::RandomField => {
                let mut params = cfg.system.params.clone();
                params.dim = d;
                RowSource::RandomField {
                    system: preset("random-gue", &params)?,
                    probe: RandomFieldSpec {
                        amplitude: cfg.learning.probe_amplitude,
                        steps_per_segment: cfg.learning.haar_steps,
                    },
                    dt: cfg.field.dt,
                }
            }
        };
        let r = run_inverse_norm_experiment(
            d,
            &sigma_z_type(d)?,
            e.n_trials,
            &source,
            &streams.child(EXPERIMENT_STREAMS).child(d as u64),
        )?;
        out.csv(&format!("inverse_norm_d{d}.csv"), |buf| r.write_csv(buf))?;
        medians.push(r.l_hat_quantiles().median);
        rows.push(r.summary());
    }
    let lo = medians.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = medians.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(json!({
        "experiment": "bound-eq4",
        "row_source": e.row_source,
        "per_dim": rows,
        "median_l_hat_spread": finite_or_null(hi / lo),
    }))
}

fn bound_eq5(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let system = build_system(cfg)?;
    let field = build_field(cfg, streams)?;
    let e = &cfg.experiment;
    let t_index = e.t_index.unwrap_or(field.n_steps() / 2);
    let r = run_tail_experiment(
        &system,
        &field,
        t_index,
        e.n_samples,
        e.kappa.clone(),
        &streams.child(EXPERIMENT_STREAMS),
    )?;
    out.csv("tail.csv", |buf| r.write_csv(buf))?;
    Ok(r.summary())
}

fn flattening(cfg: &ExperimentConfig, streams: &Streams, out: &mut Outputs) -> Result<Value> {
    let e = &cfg.experiment;
    let r = run_flattening_experiment(
        &e.qubit_counts,
        e.n_samples,
        &streams.child(EXPERIMENT_STREAMS),
    )?;
    out.csv("flattening.csv", |buf| r.write_csv(buf))?;
    Ok(r.summary())
}

fn noise_sensitivity(
    cfg: &ExperimentConfig,
    streams: &Streams,
    out: &mut Outputs,
) -> Result<Value> {
    let e = &cfg.experiment;
    let r = run_noise_sensitivity_experiment(
        &e.dims,
        e.sigma,
        e.n_trials,
        &streams.child(EXPERIMENT_STREAMS),
    )?;
    out.csv("noise_sensitivity.csv", |buf| r.write_csv(buf))?;
    Ok(r.summary())
}
