import numpy as np
import pytest

from hyqal import qsim
from hyqal.errors import ConfigError, ShapeError
from hyqal.qsim import (
    CircuitSpec,
    StateVector,
    angle_encode,
    apply_cnot,
    apply_rotation,
    apply_variational,
    expectations,
    expectations_and_gradients,
    gradient_check,
    measure_z,
    quantum_gradients,
)
import oracles


def _random_case(rng, nq, nl, topology="ring"):
    spec = CircuitSpec(nq, nl, topology)
    u = rng.uniform(-np.pi, np.pi, size=nq)
    theta = rng.uniform(-np.pi, np.pi, size=spec.theta_shape)
    return spec, u, theta


@pytest.mark.parametrize("nq", [1, 2, 3, 4])
def test_oracle_equivalence(nq):
    rng = np.random.default_rng(100 + nq)
    worst = 0.0
    for draw in range(50):
        topology = "ring" if draw % 2 == 0 else "line"
        spec, u, theta = _random_case(rng, nq, 1 + draw % 3, topology)
        got = apply_variational(angle_encode(u), spec, theta).amplitudes
        want = oracles.variational_unitary(nq, theta, topology) @ oracles.encoded_state(u)
        worst = max(worst, np.max(np.abs(got - want)))
        assert np.allclose(measure_z(StateVector(got)), oracles.z_expectations(want), atol=1e-12)
    assert worst < 1e-10


def test_oracle_equivalence_other_axes(rng):
    spec = CircuitSpec(3, 2, axes=("x", "y", "z"))
    u = rng.uniform(-3, 3, size=3)
    theta = rng.uniform(-3, 3, size=spec.theta_shape)
    got = apply_variational(angle_encode(u), spec, theta).amplitudes
    want = oracles.variational_unitary(3, theta, axes=("x", "y", "z")) @ oracles.encoded_state(u)
    assert np.max(np.abs(got - want)) < 1e-10


def test_batched_matches_single(rng):
    spec = CircuitSpec(4, 2)
    u = rng.normal(size=(6, 4))
    theta = rng.normal(size=spec.theta_shape)
    batch = expectations(u, spec, theta)
    for i in range(6):
        assert np.allclose(batch[i], expectations(u[i], spec, theta), atol=1e-14)
        assert np.allclose(batch[i], oracles.circuit_readout(u[i], theta), atol=1e-10)


# -- encoding / gates / readout examples -----------------------------------
def test_encode_zero_is_ground_state():
    amps = angle_encode(np.zeros(3)).amplitudes
    assert amps[0] == 1 and np.all(amps[1:] == 0)


def test_encode_pi_flips_single_qubit():
    assert np.allclose(angle_encode([np.pi]).amplitudes, [0, 1], atol=1e-15)


def test_encode_half_pi_two_qubits():
    assert np.allclose(angle_encode([np.pi / 2, np.pi / 2]).amplitudes, 0.5)


def test_encode_length_mismatch():
    with pytest.raises(ShapeError):
        expectations(np.zeros(3), CircuitSpec(2, 1), np.zeros((1, 2, 2)))


def test_zero_theta_line_keeps_ground_state():
    spec = CircuitSpec(2, 1, "line")
    out = apply_variational(angle_encode([0.0, 0.0]), spec, np.zeros(spec.theta_shape))
    assert np.allclose(out.amplitudes, [1, 0, 0, 0])


def test_cnot_truth_table():
    # |10> in q1 q0 notation with control qubit 0 set: index 1
    spec = CircuitSpec(2, 1, "line")
    out = apply_variational(angle_encode([np.pi, 0.0]), spec, np.zeros(spec.theta_shape))
    assert np.allclose(np.abs(out.amplitudes), [0, 0, 0, 1], atol=1e-15)
    amps = np.zeros((1, 4), complex)
    amps[0, 1] = 1
    apply_cnot(amps, 0, 1)
    assert np.array_equal(amps[0], [0, 0, 0, 1])


def test_measure_examples():
    assert np.allclose(measure_z(angle_encode(np.zeros(4))), 1.0)
    assert np.isclose(measure_z(angle_encode([np.pi / 3]))[0], 0.5)
    uniform = StateVector(np.full(8, 8 ** -0.5))
    assert np.allclose(measure_z(uniform), 0.0, atol=1e-15)


def test_product_state_factorises(rng):
    u = rng.uniform(-3, 3, size=5)
    assert np.allclose(measure_z(angle_encode(u)), np.cos(u), atol=1e-14)


def test_readout_bounded(rng):
    z = expectations(rng.normal(0, 10, size=(50, 4)), CircuitSpec(4, 3), rng.normal(0, 10, size=(3, 4, 2)))
    assert np.all(np.abs(z) <= 1.0)


def test_ring_and_line_entanglers():
    assert CircuitSpec(3, 1, "ring").entanglers() == [(0, 1), (1, 2), (2, 0)]
    assert CircuitSpec(2, 1, "ring").entanglers() == [(0, 1), (1, 0)]
    assert CircuitSpec(3, 1, "line").entanglers() == [(0, 1), (1, 2)]
    assert CircuitSpec(1, 1).entanglers() == []
    assert CircuitSpec(4, 1, "none").entanglers() == []


def test_spec_validation():
    for bad in (dict(num_qubits=0), dict(num_qubits=17), dict(num_layers=-1), dict(topology="star"),
                dict(axes=("w",))):
        with pytest.raises(ConfigError):
            CircuitSpec(**bad)
    assert CircuitSpec(3, 0).theta_shape == (0, 3, 2)


def test_norm_preserved_over_long_sequence(rng):
    nq = 5
    amps = angle_encode(rng.uniform(-3, 3, size=nq)).amplitudes[None].copy()
    for _ in range(1000):
        if rng.random() < 0.3:
            c, t = rng.choice(nq, size=2, replace=False)
            apply_cnot(amps, int(c), int(t))
        else:
            apply_rotation(amps, "xyz"[rng.integers(3)], int(rng.integers(nq)), rng.uniform(-7, 7))
        assert abs(np.linalg.norm(amps[0]) - 1) < 1e-12


def test_gate_touch_counter():
    nq = 6
    amps = np.zeros((1, 2 ** nq), complex)
    amps[0, 0] = 1
    qsim.counters.clear()
    apply_rotation(amps, "y", 2, 0.3)
    assert qsim.counters["rotation"] == 2 ** nq
    apply_rotation(np.zeros((3, 2 ** nq), complex), "z", 0, 0.1)
    assert qsim.counters["rotation"] == 4 * 2 ** nq


# -- gradients --------------------------------------------------------------
def test_single_qubit_derivative():
    spec = CircuitSpec(1, 0)
    gu, gt = quantum_gradients([np.pi / 2], spec, np.zeros(spec.theta_shape), [1.0])
    assert np.isclose(gu[0], -1.0)
    assert gt.shape == (0, 1, 2)


def test_parameter_shift_vs_finite_difference():
    rng = np.random.default_rng(2024)
    for case in range(20):
        nq = 1 + case % 6
        nl = case % 4
        spec, u, theta = _random_case(rng, nq, nl, "ring" if case % 2 else "line")
        w = rng.normal(size=nq)
        gu, gt = quantum_gradients(u, spec, theta, w)

        def f():
            return float(w @ oracles.circuit_readout(u, theta, spec.topology))

        assert np.max(np.abs(gu - oracles.central_difference(f, u))) < 1e-6
        if theta.size:
            assert np.max(np.abs(gt - oracles.central_difference(f, theta))) < 1e-6


def test_batched_gradients_sum_theta(rng):
    spec = CircuitSpec(3, 2)
    u = rng.normal(size=(4, 3))
    theta = rng.normal(size=spec.theta_shape)
    w = rng.normal(size=(4, 3))
    z, gu, gt = expectations_and_gradients(u, spec, theta, w)
    assert np.allclose(z, expectations(u, spec, theta), atol=1e-14)
    parts = [quantum_gradients(u[i], spec, theta, w[i]) for i in range(4)]
    assert np.allclose(gu, np.stack([p[0] for p in parts]), atol=1e-14)
    assert np.allclose(gt, sum(p[1] for p in parts), atol=1e-13)


def test_locality_without_entanglement(rng):
    nq = 4
    spec = CircuitSpec(nq, 1, "none")
    u = rng.normal(size=nq)
    theta = rng.normal(size=spec.theta_shape)
    for j in range(nq):
        w = np.zeros(nq)
        w[j] = 1.0
        gu, gt = quantum_gradients(u, spec, theta, w)
        mask = np.ones(nq, bool)
        mask[j] = False
        # exactly zero in exact arithmetic; shifted runs differ only by rounding
        assert np.max(np.abs(gu[mask])) < 1e-15 and np.max(np.abs(gt[:, mask])) < 1e-15
        assert gu[j] != 0.0 and np.any(gt[:, j] != 0.0)


def test_gradient_check_helper():
    rel, abs_err = gradient_check(CircuitSpec(3, 2), seed=7)
    assert rel < 1e-4 and abs_err < 1e-6


def test_theta_shape_mismatch():
    with pytest.raises(ShapeError):
        expectations(np.zeros(2), CircuitSpec(2, 1), np.zeros((2, 2, 2)))
