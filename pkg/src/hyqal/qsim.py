"""Exact statevector simulation of the angle-encoded variational circuit.

Conventions
-----------
* Basis index ``k`` stores qubit ``q`` in bit ``q`` of ``k`` (little endian),
  so ``measure_z`` component ``q`` is ``sum_k |a_k|^2 * (1 - 2 * ((k >> q) & 1))``.
* ``RY(t) = [[cos t/2, -sin t/2], [sin t/2, cos t/2]]`` and
  ``RZ(t) = diag(exp(-i t/2), exp(i t/2))``.
* Each variational layer applies, on every qubit, the rotations listed in
  ``CircuitSpec.axes`` (default RY then RZ), then the CNOT entanglers of the
  topology.

All circuit routines are batched: a batch of ``S`` states is a complex array
of shape ``(S, 2**Q)``, and every rotation may carry a per-state angle.  The
parameter-shift gradient exploits this by simulating all shifted circuits of
a batch in one pass.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .errors import ConfigError, ShapeError

MAX_QUBITS = 16
SHIFT = np.pi / 2

# amplitude touches per gate kind; read by tests to check cost scaling
counters: Counter = Counter()


@dataclass(frozen=True)
class CircuitSpec:
    num_qubits: int = 8
    num_layers: int = 2
    topology: str = "ring"
    axes: tuple = ("y", "z")

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if not 1 <= self.num_qubits <= MAX_QUBITS:
            raise ConfigError(f"num_qubits must be in [1, {MAX_QUBITS}], got {self.num_qubits}")
        # zero layers is allowed: encoding followed directly by readout
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.topology not in ("ring", "line", "none"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if not self.axes or any(a not in ("x", "y", "z") for a in self.axes):
            raise ConfigError(f"rotation axes must be drawn from x/y/z, got {self.axes}")

    @property
    def theta_shape(self):
        return (self.num_layers, self.num_qubits, len(self.axes))

    def entanglers(self):
        q = self.num_qubits
        if q == 1 or self.topology == "none":
            return []
        if self.topology == "line":
            return [(i, i + 1) for i in range(q - 1)]
        if q == 2:
            return [(0, 1), (1, 0)]
        return [(i, (i + 1) % q) for i in range(q)]


class StateVector:
    """A (possibly batched) register state; ``amplitudes`` is (2**Q,) or (S, 2**Q)."""

    def __init__(self, amplitudes, num_qubits=None):
        amps = np.asarray(amplitudes, dtype=np.complex128)
        n = amps.shape[-1]
        q = int(round(np.log2(n))) if n > 0 else 0
        if n < 2 or (1 << q) != n:
            raise ShapeError("statevector", ("2**Q",), amps.shape)
        if num_qubits is not None and num_qubits != q:
            raise ShapeError("statevector", (1 << num_qubits,), amps.shape)
        self.amplitudes = amps
        self.num_qubits = q

    def norm(self):
        return np.sqrt(np.sum(np.abs(self.amplitudes) ** 2, axis=-1))

    def __repr__(self):
        return f"StateVector(num_qubits={self.num_qubits}, batch_shape={self.amplitudes.shape[:-1]})"


def _as_batch(a):
    a = np.asarray(a)
    return (a[None], True) if a.ndim == 1 else (a, False)


_AXIS_CODE = {"x": 0, "y": 1, "z": 2}


@numba.njit(cache=True)
def _rotate_kernel(amps, axis, qubit, angles):
    rows, n = amps.shape
    bit = 1 << qubit
    for s in range(rows):
        half = 0.5 * angles[s]
        c = np.cos(half)
        sn = np.sin(half)
        for k in range(n):
            if k & bit:
                continue
            a0 = amps[s, k]
            a1 = amps[s, k | bit]
            if axis == 1:
                amps[s, k] = c * a0 - sn * a1
                amps[s, k | bit] = sn * a0 + c * a1
            elif axis == 2:
                amps[s, k] = complex(c, -sn) * a0
                amps[s, k | bit] = complex(c, sn) * a1
            else:
                amps[s, k] = c * a0 - 1j * sn * a1
                amps[s, k | bit] = -1j * sn * a0 + c * a1


@numba.njit(cache=True)
def _cnot_kernel(amps, control, target):
    rows, n = amps.shape
    cbit = 1 << control
    tbit = 1 << target
    for s in range(rows):
        for k in range(n):
            if (k & cbit) and not (k & tbit):
                tmp = amps[s, k]
                amps[s, k] = amps[s, k | tbit]
                amps[s, k | tbit] = tmp


def apply_rotation(amps, axis, qubit, angle):
    """Rotate ``qubit`` of every row of ``amps`` in place.

    ``angle`` is a scalar or a per-row array.
    """
    rows, n = amps.shape
    angles = np.broadcast_to(np.asarray(angle, dtype=np.float64), (rows,))
    _rotate_kernel(amps, _AXIS_CODE[axis], qubit, np.ascontiguousarray(angles))
    counters["rotation"] += rows * n
    return amps


def apply_cnot(amps, control, target):
    rows, n = amps.shape
    _cnot_kernel(amps, control, target)
    counters["cnot"] += rows * n
    return amps


def _encode_amps(u):
    """Product state of RY(u_q)|0> for a (S, Q) batch of angles."""
    s, nq = u.shape
    amps = np.ones((s, 1), dtype=np.complex128)
    # build from the most significant qubit down so qubit q lands on bit q
    for q in range(nq - 1, -1, -1):
        single = np.stack([np.cos(u[:, q] / 2), np.sin(u[:, q] / 2)], axis=1)
        amps = (amps[:, :, None] * single[:, None, :]).reshape(s, -1)
    counters["encode"] += s * (1 << nq)
    return amps


def angle_encode(u) -> StateVector:
    u = np.asarray(u, dtype=np.float64)
    ub, single = _as_batch(u)
    amps = _encode_amps(ub)
    return StateVector(amps[0] if single else amps)


def _check_theta(spec, theta, per_state=False):
    theta = np.asarray(theta, dtype=np.float64)
    shape = theta.shape[1:] if per_state else theta.shape
    if tuple(shape) != spec.theta_shape:
        raise ShapeError("variational params", spec.theta_shape, theta.shape)
    return theta


def _variational(amps, spec, theta, per_state=False):
    ent = spec.entanglers()
    for layer in range(spec.num_layers):
        for q in range(spec.num_qubits):
            for a, axis in enumerate(spec.axes):
                angle = theta[:, layer, q, a] if per_state else theta[layer, q, a]
                apply_rotation(amps, axis, q, angle)
        for c, t in ent:
            apply_cnot(amps, c, t)
    return amps


def apply_variational(state: StateVector, spec: CircuitSpec, theta) -> StateVector:
    """Return U(theta)|state>; the input state is not modified."""
    if state.num_qubits != spec.num_qubits:
        raise ShapeError("apply_variational", (1 << spec.num_qubits,), state.amplitudes.shape)
    theta = _check_theta(spec, theta)
    amps, single = _as_batch(state.amplitudes)
    out = _variational(amps.copy(), spec, theta)
    return StateVector(out[0] if single else out)


@lru_cache(maxsize=None)
def _z_signs(nq):
    k = np.arange(1 << nq)[:, None]
    return 1.0 - 2.0 * ((k >> np.arange(nq)[None, :]) & 1)


def _measure_amps(amps):
    nq = amps.shape[1].bit_length() - 1
    probs = amps.real ** 2 + amps.imag ** 2
    return np.clip(probs @ _z_signs(nq), -1.0, 1.0)


def measure_z(state: StateVector) -> np.ndarray:
    amps, single = _as_batch(state.amplitudes)
    z = _measure_amps(amps)
    return z[0] if single else z


def expectations(u, spec: CircuitSpec, theta) -> np.ndarray:
    """Batched circuit readout: (S, Q) angles -> (S, Q) Pauli-Z expectations."""
    u = np.asarray(u, dtype=np.float64)
    ub, single = _as_batch(u)
    if ub.shape[1] != spec.num_qubits:
        raise ShapeError("angle_encode", ("S", spec.num_qubits), u.shape)
    theta = _check_theta(spec, theta)
    z = _measure_amps(_variational(_encode_amps(ub), spec, theta))
    return z[0] if single else z


def quantum_gradients(u, spec: CircuitSpec, theta, grad_wrt_q):
    """Parameter-shift gradients of ``sum(grad_wrt_q * z)``.

    ``u`` and ``grad_wrt_q`` are (Q,) or (B, Q).  Returns ``(grad_u, grad_theta)``
    where ``grad_u`` matches ``u`` and ``grad_theta`` (shape ``spec.theta_shape``)
    is summed over the batch.
    """
    _, gu, gt = expectations_and_gradients(u, spec, theta, grad_wrt_q)
    return gu, gt


def expectations_and_gradients(u, spec: CircuitSpec, theta, grad_wrt_q):
    """Return ``(z, grad_u, grad_theta)`` using one batched simulation of every shifted circuit."""
    u = np.asarray(u, dtype=np.float64)
    g = np.asarray(grad_wrt_q, dtype=np.float64)
    ub, single = _as_batch(u)
    gb, _ = _as_batch(g)
    nq = spec.num_qubits
    if ub.shape[1] != nq:
        raise ShapeError("angle_encode", ("B", nq), u.shape)
    if gb.shape != ub.shape:
        raise ShapeError("quantum_gradients", ub.shape, g.shape, "grad_wrt_q")
    theta = _check_theta(spec, theta)
    b = ub.shape[0]
    nt = theta.size
    n = 1 << nq

    # row blocks of size b: [unshifted | u_q +/- | theta_j +/- in gate order]
    off = 1 + 2 * nq
    ncfg = off + 2 * nt
    amps = np.empty((ncfg * b, n), dtype=np.complex128)
    uu = np.repeat(ub[None], off, axis=0)
    for q in range(nq):
        uu[1 + 2 * q, :, q] += SHIFT
        uu[2 + 2 * q, :, q] -= SHIFT
    amps[:off * b] = _encode_amps(uu.reshape(off * b, nq))

    # theta branches split from the unshifted rows right before their gate,
    # so only rows already alive are pushed through each gate
    active = off * b
    flat = theta.reshape(-1)
    ent = spec.entanglers()
    j = 0
    for _layer in range(spec.num_layers):
        for q in range(nq):
            for axis in spec.axes:
                amps[active:active + b] = amps[:b]
                amps[active + b:active + 2 * b] = amps[:b]
                angles = np.full(active + 2 * b, flat[j])
                angles[active:active + b] += SHIFT
                angles[active + b:] -= SHIFT
                active += 2 * b
                apply_rotation(amps[:active], axis, q, angles)
                j += 1
        for c, t in ent:
            apply_cnot(amps[:active], c, t)

    z = _measure_amps(amps).reshape(ncfg, b, nq)
    z0 = z[0]
    dz_du = (z[1:off:2] - z[2:off:2]) / 2          # (Q_shifted, B, Q_out)
    dz_dt = (z[off::2] - z[off + 1::2]) / 2        # (nt, B, Q_out)
    grad_u = np.einsum("sbj,bj->bs", dz_du, gb)
    grad_t = np.einsum("sbj,bj->s", dz_dt, gb).reshape(spec.theta_shape)
    if single:
        return z0[0], grad_u[0], grad_t
    return z0, grad_u, grad_t


def init_theta(spec: CircuitSpec, rng, scale=0.1):
    return rng.uniform(-scale, scale, size=spec.theta_shape)


def gradient_check(spec: CircuitSpec, seed=0, batch=2, eps=1e-5):
    """Largest parameter-shift vs central-difference discrepancy on a random instance.

    The error is relative to the largest finite-difference gradient entry, so
    near-zero entries do not blow it up.  Returns ``(max_rel_error, max_abs_error)``.
    """
    rng = np.random.default_rng(seed)
    nq = spec.num_qubits
    u = rng.uniform(-np.pi, np.pi, size=(batch, nq))
    theta = rng.uniform(-np.pi, np.pi, size=spec.theta_shape)
    w = rng.normal(size=(batch, nq))
    gu, gt = quantum_gradients(u, spec, theta, w)

    def f(uu, tt):
        return float(np.sum(w * expectations(uu, spec, tt)))

    fu = np.zeros_like(u)
    for idx in np.ndindex(u.shape):
        d = np.zeros_like(u)
        d[idx] = eps
        fu[idx] = (f(u + d, theta) - f(u - d, theta)) / (2 * eps)
    ft = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        d = np.zeros_like(theta)
        d[idx] = eps
        ft[idx] = (f(u, theta + d) - f(u, theta - d)) / (2 * eps)
    analytic = np.concatenate([gu.ravel(), gt.ravel()])
    numeric = np.concatenate([fu.ravel(), ft.ravel()])
    abs_err = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(numeric))) if numeric.size else 0.0, 1e-12)
    return abs_err / scale, abs_err
