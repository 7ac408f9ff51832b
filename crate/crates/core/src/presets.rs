//! Named control systems.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{lie_closure, ControlSystem};
use crate::error::{Error, Result};
use crate::operator::{kron_all, pauli, CMatrix, HermitianMatrix};
use crate::rng::Streams;

pub const PRESET_NAMES: [&str; 3] = ["qubit", "ising-chain", "random-gue"];

const MAX_REDRAWS: usize = 5;

/// Constructor parameters shared by all presets; unused fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetParams {
    /// Qubit count for `ising-chain`.
    pub n: usize,
    /// Ising coupling `J_c`.
    pub coupling: f64,
    /// Transverse field `h`.
    pub field: f64,
    /// Longitudinal field `g`; `g = 0` leaves a free-fermion chain that is
    /// not fully controllable.
    pub longitudinal: f64,
    /// Hilbert space dimension for `random-gue`.
    pub dim: usize,
    /// Draw seed for `random-gue`.
    pub seed: u64,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self {
            n: 2,
            coupling: 1.0,
            field: 1.0,
            longitudinal: 0.5,
            dim: 3,
            seed: 0,
        }
    }
}

/// Single-site operator `op` on site `site` (0-based) of an `n`-qubit chain.
pub fn site_operator(op: &CMatrix, site: usize, n: usize) -> CMatrix {
    let factors: Vec<CMatrix> = (0..n)
        .map(|k| {
            if k == site {
                op.clone()
            } else {
                pauli::identity()
            }
        })
        .collect();
    kron_all(&factors)
}

pub fn preset(name: &str, params: &PresetParams) -> Result<ControlSystem> {
    match name {
        "qubit" => qubit(),
        "ising-chain" => ising_chain(params.n, params.coupling, params.field, params.longitudinal),
        "random-gue" => random_gue(params.dim, params.seed),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// `H0 = Z`, `Hc = X`, `M = X`.
pub fn qubit() -> Result<ControlSystem> {
    ControlSystem::with_control_observable(
        HermitianMatrix::new(pauli::z())?,
        HermitianMatrix::new(pauli::x())?,
    )
}

/// Tilted-field Ising chain with open boundaries,
/// `H0 = J sum Z_k Z_{k+1} + h sum X_k + g sum Z_k`, controlled through `X`
/// and measured through `Z` on the first site.
pub fn ising_chain(
    n: usize,
    coupling: f64,
    field: f64,
    longitudinal: f64,
) -> Result<ControlSystem> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "ising-chain needs at least 2 qubits, got {n}"
        )));
    }
    if n > 8 {
        return Err(Error::InvalidParameter(format!(
            "ising-chain limited to 8 qubits, got {n}"
        )));
    }
    let d = 1usize << n;
    let mut drift = CMatrix::zeros(d, d);
    for k in 0..n - 1 {
        drift += (site_operator(&pauli::z(), k, n) * site_operator(&pauli::z(), k + 1, n))
            .scale(coupling);
    }
    for k in 0..n {
        drift += site_operator(&pauli::x(), k, n).scale(field);
        drift += site_operator(&pauli::z(), k, n).scale(longitudinal);
    }
    ControlSystem::new(
        HermitianMatrix::traceless(drift)?,
        HermitianMatrix::traceless(site_operator(&pauli::x(), 0, n))?,
        HermitianMatrix::traceless(site_operator(&pauli::z(), 0, n))?,
    )
}

fn traceless_gue<R: Rng + ?Sized>(d: usize, rng: &mut R) -> HermitianMatrix {
    let mut entries = Vec::with_capacity(d * d);
    for _ in 0..d * d {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        entries.push(Complex64::new(re, im));
    }
    let a = CMatrix::from_row_slice(d, d, &entries);
    let h = (&a + a.adjoint()).unscale(2.0);
    let shift = h.trace() / d as f64;
    HermitianMatrix::from_hermitian_part(&(h - CMatrix::identity(d, d) * shift))
}

/// Traceless Gaussian-unitary-ensemble drift and control, `M = Hc`. Redraws
/// (up to 5 times) if the pair is not fully controllable.
pub fn random_gue(d: usize, seed: u64) -> Result<ControlSystem> {
    if d < 2 {
        return Err(Error::InvalidDimension {
            dim: d,
            reason: "random-gue needs d >= 2",
        });
    }
    let streams = Streams::new(seed);
    let mut last = 0;
    for attempt in 0..MAX_REDRAWS {
        let mut rng = streams.stream(attempt as u64);
        let drift = traceless_gue(d, &mut rng);
        let control = traceless_gue(d, &mut rng);
        let sys = ControlSystem::with_control_observable(drift, control)?;
        let report = lie_closure(&sys, 4 * d * d)?;
        if report.is_fully_controllable {
            return Ok(sys);
        }
        last = report.dimension_found;
    }
    Err(Error::NotControllable {
        found: last,
        expected: d * d - 1,
    })
}
