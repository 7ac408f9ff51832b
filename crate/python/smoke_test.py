"""Smoke test for the pyqlandscape extension module.

Build first:  maturin build --release -m crates/py/Cargo.toml && pip install target/wheels/pyqlandscape-*.whl
Run:          python -m pytest python/smoke_test.py
"""

import json
import math

import pytest

import pyqlandscape as ql

SX = [[0, 1], [1, 0]]
SZ = [[1, 0], [0, -1]]


def test_presets_are_controllable():
    assert ql.ControlSystem.preset("qubit").lie_closure_dimension() == 3
    assert ql.ControlSystem.preset("ising-chain", n=2).lie_closure_dimension() == 15


def test_gradient_matches_finite_differences():
    sys = ql.ControlSystem.preset("ising-chain", n=2)
    field = ql.ControlField.random(25, 0.12, seed=3)
    psi0, psig = ql.random_state(4, seed=1), ql.random_state(4, seed=2)
    g = ql.gradient(sys, field, psi0, psig)
    fd = ql.finite_difference_gradient(sys, field, psi0, psig)
    diff = math.sqrt(sum((a - b) ** 2 for a, b in zip(g, fd)))
    norm = math.sqrt(sum(b * b for b in fd))
    assert diff / norm < 1e-6


def test_noiseless_tomography_is_exact():
    sys = ql.ControlSystem(SZ, SX)
    field = ql.ControlField.random(21, 0.15, seed=5)
    rho = [[0.7, 0.2 - 0.1j], [0.2 + 0.1j, 0.3]]
    out = ql.tomography(sys, field, rho, [7, 14, 21])
    assert out["invertible"]
    assert out["reconstruction_error"] < 1e-9


def test_commuting_control_is_singular():
    sys = ql.ControlSystem(SZ, SZ)
    out = ql.singular_check(sys, ql.ControlField.random(20, 0.1, seed=0))
    assert out["is_singular"]


def test_optimize_and_learn_raise_fidelity():
    sys = ql.ControlSystem.preset("qubit")
    field = ql.ControlField.random(20, 0.15, seed=8)
    psi0, psig = [1, 0], ql.random_state(2, seed=9)
    _, values = ql.optimize(sys, field, psi0, psig)
    assert values[-1] > 0.99
    out = ql.learn(sys, field, psi0, psig, haar_steps=7, max_iters=100)
    assert max(out["j_true"]) > 0.99
    assert len(out["field"]) == 20


def test_errors_are_typed():
    with pytest.raises(ql.QlandscapeError):
        ql.ControlSystem.preset("heisenberg")
    with pytest.raises(ql.QlandscapeError):
        ql.ControlField(-0.1, [0.0])


def test_run_experiment_writes_manifest(tmp_path):
    manifest = json.loads(ql.run_experiment("tomo", str(tmp_path), seed=4))
    files = {a["file"] for a in manifest["artifacts"]}
    assert {"record.csv", "bloch.csv", "summary.json"} <= files
    summary = json.loads((tmp_path / "tomo").glob("*/summary.json").__next__().read_text())
    assert summary["reconstruction_error"] < 1e-9
