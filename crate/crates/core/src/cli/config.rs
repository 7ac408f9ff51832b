use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::landscape::OptimizerConfig;
use crate::presets::{PresetParams, PRESET_NAMES};
use crate::tomography::{NoiseModel, ReconstructionMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Subcommand {
    #[default]
    Evolve,
    Tomo,
    SingularCheck,
    Learn,
    Optimize,
    Moments,
    BoundEq4,
    BoundEq5,
    Flattening,
    NoiseSensitivity,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Evolve => "evolve",
            Subcommand::Tomo => "tomo",
            Subcommand::SingularCheck => "singular-check",
            Subcommand::Learn => "learn",
            Subcommand::Optimize => "optimize",
            Subcommand::Moments => "moments",
            Subcommand::BoundEq4 => "bound-eq4",
            Subcommand::BoundEq5 => "bound-eq5",
            Subcommand::Flattening => "flattening",
            Subcommand::NoiseSensitivity => "noise-sensitivity",
        }
    }
}

/// Either a named preset or three matrix JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSpec {
    pub preset: String,
    pub params: PresetParams,
    /// Matrix files; when `drift` is set the preset is ignored.
    pub drift: Option<PathBuf>,
    pub control: Option<PathBuf>,
    /// Defaults to the control matrix.
    pub observable: Option<PathBuf>,
    /// Replace the control by a Pauli (`x`, `y`, `z`) on the first qubit.
    /// An observable equal to the old control follows the replacement.
    pub control_pauli: Option<String>,
}

impl Default for SystemSpec {
    fn default() -> Self {
        Self {
            preset: "qubit".into(),
            params: PresetParams::default(),
            drift: None,
            control: None,
            observable: None,
            control_pauli: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSpec {
    pub n_steps: usize,
    pub dt: f64,
    /// Explicit amplitudes; otherwise i.i.d. `N(0, random_scale^2)`.
    pub amplitudes: Option<Vec<f64>>,
    pub random_scale: f64,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            n_steps: 40,
            dt: 0.1,
            amplitudes: None,
            random_scale: 1.0,
        }
    }
}

/// Sample grid indices: explicit `times`, or `samples` multiples of `step`
/// (`samples` defaults to `d^2 - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub step: usize,
    pub samples: Option<usize>,
    pub times: Option<Vec<usize>>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            step: 5,
            samples: None,
            times: None,
        }
    }
}

/// States are written `haar`, `basis:k` or `mixed` (maximally mixed; only
/// meaningful for `tomo`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateSpec {
    pub initial: String,
    pub target: String,
    /// State reconstructed by `tomo`.
    pub tomography: String,
}

impl Default for StateSpec {
    fn default() -> Self {
        Self {
            initial: "basis:0".into(),
            target: "haar".into(),
            tomography: "haar".into(),
        }
    }
}

/// The control window `N_c` is `field.n_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningSpec {
    pub probe_amplitude: f64,
    /// Haar time in grid steps of width `field.dt`.
    pub haar_steps: usize,
    /// Defaults to `d^2 - 1`.
    pub samples: Option<usize>,
    /// Defaults to 1e-5 (noiseless) or 1e-3 (noisy).
    pub delta: Option<f64>,
    pub probe_reuse: bool,
}

impl Default for LearningSpec {
    fn default() -> Self {
        Self {
            probe_amplitude: 1.0,
            haar_steps: 10,
            samples: None,
            delta: None,
            probe_reuse: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSourceSpec {
    IdealHaar,
    /// Random-GUE system of each dimension (seed `system.params.seed`),
    /// probed with `learning.probe_amplitude`, `learning.haar_steps`, `field.dt`.
    RandomField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Dimension for `moments`.
    pub d: usize,
    /// Dimensions for `bound-eq4` and `noise-sensitivity`.
    pub dims: Vec<usize>,
    pub n_samples: usize,
    pub n_trials: usize,
    pub qubit_counts: Vec<usize>,
    pub sigma: f64,
    /// Grid index for `bound-eq5`; defaults to `n_steps / 2`.
    pub t_index: Option<usize>,
    pub row_source: RowSourceSpec,
    pub kappa: Option<Vec<f64>>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            d: 2,
            dims: vec![2, 3, 4, 5],
            n_samples: 10_000,
            n_trials: 1000,
            qubit_counts: vec![2, 3, 4, 5, 6],
            sigma: 0.01,
            t_index: None,
            row_source: RowSourceSpec::IdealHaar,
            kappa: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub subcommand: Subcommand,
    pub system: SystemSpec,
    pub field: FieldSpec,
    pub noise: NoiseModel,
    pub schedule: ScheduleSpec,
    /// Defaults to direct inversion when noiseless, ridge least squares
    /// with the heuristic ridge otherwise.
    pub reconstruction: Option<ReconstructionMethod>,
    pub optimizer: OptimizerConfig,
    pub states: StateSpec,
    pub learning: LearningSpec,
    pub experiment: ExperimentSpec,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            subcommand: Subcommand::default(),
            system: SystemSpec::default(),
            field: FieldSpec::default(),
            noise: NoiseModel::None,
            schedule: ScheduleSpec::default(),
            reconstruction: None,
            optimizer: OptimizerConfig::default(),
            states: StateSpec::default(),
            learning: LearningSpec::default(),
            experiment: ExperimentSpec::default(),
            seed: 0,
            out: PathBuf::from("runs"),
            workers: None,
        }
    }
}

fn bad(msg: String) -> Error {
    Error::Config(msg)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(format!("{name} must be a finite number > 0, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(format!("{name} must be a finite number >= 0, got {v}")))
    }
}

/// Parsed state designator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateChoice {
    Haar,
    Basis(usize),
    Mixed,
}

pub fn parse_state(s: &str) -> Result<StateChoice> {
    match s {
        "haar" => Ok(StateChoice::Haar),
        "mixed" => Ok(StateChoice::Mixed),
        _ => match s.strip_prefix("basis:").map(str::parse::<usize>) {
            Some(Ok(k)) => Ok(StateChoice::Basis(k)),
            _ => Err(bad(format!(
                "state `{s}`: expected haar, mixed or basis:<k>"
            ))),
        },
    }
}

impl ExperimentConfig {
    /// Range and file-existence checks.
    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        if s.drift.is_none() {
            if !PRESET_NAMES.contains(&s.preset.as_str()) {
                return Err(Error::UnknownPreset(s.preset.clone()));
            }
            if s.control.is_some() || s.observable.is_some() {
                return Err(bad(
                    "system.control/observable files need system.drift".into()
                ));
            }
        } else if s.control.is_none() {
            return Err(bad("system.drift needs system.control".into()));
        }
        for p in [&s.drift, &s.control, &s.observable].into_iter().flatten() {
            if !p.is_file() {
                return Err(bad(format!("matrix file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &s.control_pauli {
            if !matches!(p.as_str(), "x" | "y" | "z") {
                return Err(bad(format!(
                    "system.control_pauli `{p}`: expected x, y or z"
                )));
            }
        }

        let f = &self.field;
        if f.n_steps == 0 {
            return Err(bad("field.n_steps must be >= 1".into()));
        }
        positive("field.dt", f.dt)?;
        non_negative("field.random_scale", f.random_scale)?;
        if let Some(a) = &f.amplitudes {
            if a.len() != f.n_steps {
                return Err(bad(format!(
                    "field.amplitudes has {} entries, field.n_steps is {}",
                    a.len(),
                    f.n_steps
                )));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(bad("field.amplitudes must be finite".into()));
            }
        }

        self.noise
            .validate()
            .map_err(|e| bad(format!("noise: {e}")))?;
        if self.schedule.step == 0 {
            return Err(bad("schedule.step must be >= 1".into()));
        }
        if let Some(ReconstructionMethod::LeastSquares { ridge }) = self.reconstruction {
            non_negative("reconstruction.ridge", ridge)?;
        }
        self.optimizer
            .validate()
            .map_err(|e| bad(format!("optimizer: {e}")))?;
        for st in [
            &self.states.initial,
            &self.states.target,
            &self.states.tomography,
        ] {
            parse_state(st)?;
        }
        if parse_state(&self.states.initial)? == StateChoice::Mixed
            || parse_state(&self.states.target)? == StateChoice::Mixed
        {
            return Err(bad("initial and target states must be pure".into()));
        }

        let l = &self.learning;
        non_negative("learning.probe_amplitude", l.probe_amplitude)?;
        if l.haar_steps == 0 {
            return Err(bad("learning.haar_steps must be >= 1".into()));
        }
        if let Some(d) = l.delta {
            positive("learning.delta", d)?;
        }

        let e = &self.experiment;
        if e.d < 2 {
            return Err(bad("experiment.d must be >= 2".into()));
        }
        if e.dims.is_empty() || e.dims.iter().any(|&d| d < 2) {
            return Err(bad(
                "experiment.dims must be non-empty with entries >= 2".into()
            ));
        }
        if e.qubit_counts.is_empty() || e.qubit_counts.iter().any(|&n| !(1..=7).contains(&n)) {
            return Err(bad(
                "experiment.qubit_counts must be non-empty with entries in 1..=7".into(),
            ));
        }
        if e.n_samples == 0 || e.n_trials == 0 {
            return Err(bad("experiment.n_samples and n_trials must be >= 1".into()));
        }
        non_negative("experiment.sigma", e.sigma)?;
        if let Some(k) = &e.kappa {
            for &v in k {
                positive("experiment.kappa", v)?;
            }
        }
        if self.workers == Some(0) {
            return Err(bad("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `root.a.b.c = value`, creating objects along the path. `value` is
/// parsed as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(bad(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(bad(format!(
                    "override `{key}`: `{part}` is under a non-object"
                )));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Values supplied on the command line; flags win over the file and overrides.
#[derive(Debug, Clone, Default)]
pub struct CliInputs {
    pub subcommand: Option<Subcommand>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub overrides: Vec<String>,
}

/// File, then `--override`s, then flags.
pub fn resolve(inputs: &CliInputs) -> Result<ExperimentConfig> {
    let mut root = match &inputs.config {
        Some(p) => read_config_file(p)?,
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(bad("config file must hold a JSON object".into()));
    }
    for o in &inputs.overrides {
        apply_override(&mut root, o)?;
    }
    let map = root.as_object_mut().expect("object");
    if let Some(s) = inputs.subcommand {
        map.insert("subcommand".into(), serde_json::to_value(s)?);
    }
    if let Some(seed) = inputs.seed {
        map.insert("seed".into(), seed.into());
    }
    if let Some(out) = &inputs.out {
        map.insert("out".into(), serde_json::to_value(out)?);
    }
    if let Some(w) = inputs.workers {
        map.insert("workers".into(), w.into());
    }
    ExperimentConfig::from_json(root)
}

fn read_config_file(p: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(p)
        .map_err(|e| bad(format!("cannot read config {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| bad(format!("config {}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trip_is_identity() {
        let inputs = CliInputs {
            subcommand: Some(Subcommand::Learn),
            seed: Some(u64::MAX),
            overrides: vec![
                "system.preset=ising-chain".into(),
                "system.params.n=3".into(),
                "field.dt=0.07".into(),
                "noise={\"kind\":\"gaussian\",\"sigma\":0.01}".into(),
                "reconstruction={\"method\":\"least-squares\",\"ridge\":1e-4}".into(),
                "experiment.kappa=[0.1,0.2]".into(),
            ],
            ..Default::default()
        };
        let cfg = resolve(&inputs).unwrap();
        assert_eq!(cfg.seed, u64::MAX);
        assert_eq!(cfg.system.params.n, 3);
        let text = serde_json::to_string(&cfg).unwrap();
        let again = ExperimentConfig::from_json(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn flags_beat_overrides_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, json!({"seed": 1, "field": {"dt": 0.2}}).to_string()).unwrap();
        let inputs = CliInputs {
            config: Some(path),
            seed: Some(9),
            overrides: vec!["seed=5".into(), "field.dt=0.3".into()],
            ..Default::default()
        };
        let cfg = resolve(&inputs).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.field.dt, 0.3);
    }

    #[test]
    fn rejects_bad_input() {
        let unknown = json!({"fild": {}});
        assert!(ExperimentConfig::from_json(unknown).is_err());
        let negative = json!({"field": {"dt": -1.0}});
        assert!(ExperimentConfig::from_json(negative).is_err());
        let missing =
            json!({"system": {"drift": "/nonexistent/h0.json", "control": "/nonexistent/hc.json"}});
        assert!(ExperimentConfig::from_json(missing).is_err());
        let preset = json!({"system": {"preset": "heisenberg"}});
        assert!(matches!(
            ExperimentConfig::from_json(preset),
            Err(Error::UnknownPreset(_))
        ));
        let seed = json!({"seed": -3});
        assert!(ExperimentConfig::from_json(seed).is_err());
        let mut root = json!({"seed": 1});
        assert!(apply_override(&mut root, "seed.x=1").is_err());
        assert!(apply_override(&mut root, "novalue").is_err());
    }

    #[test]
    fn state_designators() {
        assert_eq!(parse_state("basis:3").unwrap(), StateChoice::Basis(3));
        assert_eq!(parse_state("haar").unwrap(), StateChoice::Haar);
        assert!(parse_state("basis:").is_err());
        assert!(parse_state("pure").is_err());
    }
}
