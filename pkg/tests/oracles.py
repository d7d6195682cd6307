"""Reference implementations that share no code with the library.

Each oracle is the slow, obviously-correct version of something the library
does fast: dense Kronecker-product unitaries, central finite differences,
pairwise Mann-Whitney counting, loop-based NT-Xent.
"""
import math

import numpy as np

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
P0 = np.array([[1, 0], [0, 0]], dtype=complex)
P1 = np.array([[0, 0], [0, 1]], dtype=complex)


def ry(t):
    c, s = math.cos(t / 2), math.sin(t / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz(t):
    return np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])


def rx(t):
    c, s = math.cos(t / 2), math.sin(t / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


ROT = {"x": rx, "y": ry, "z": rz}


def embed(ops, nq):
    """Kronecker product of per-qubit operators; qubit 0 is the least significant bit."""
    out = np.array([[1.0 + 0j]])
    for q in reversed(range(nq)):
        out = np.kron(out, ops.get(q, I2))
    return out


def single(gate, q, nq):
    return embed({q: gate}, nq)


def cnot(c, t, nq):
    return embed({c: P0}, nq) + embed({c: P1, t: X}, nq)


def entanglers(nq, topology):
    if nq == 1:
        return []
    if topology == "line":
        return [(q, q + 1) for q in range(nq - 1)]
    if nq == 2:
        return [(0, 1), (1, 0)]
    return [(q, (q + 1) % nq) for q in range(nq)]


def variational_unitary(nq, theta, topology="ring", axes=("y", "z")):
    theta = np.asarray(theta).reshape(-1, nq, len(axes))
    U = np.eye(2 ** nq, dtype=complex)
    for layer in theta:
        for q in range(nq):
            for a, axis in enumerate(axes):
                U = single(ROT[axis](layer[q, a]), q, nq) @ U
        for c, t in entanglers(nq, topology):
            U = cnot(c, t, nq) @ U
    return U


def encoded_state(u):
    nq = len(u)
    psi = np.zeros(2 ** nq, dtype=complex)
    psi[0] = 1.0
    for q in range(nq):
        psi = single(ry(u[q]), q, nq) @ psi
    return psi


def z_expectations(psi):
    nq = int(round(math.log2(len(psi))))
    return np.array([np.real(np.conj(psi) @ single(Z, q, nq) @ psi) for q in range(nq)])


def circuit_readout(u, theta, topology="ring", axes=("y", "z")):
    psi = variational_unitary(len(u), theta, topology, axes) @ encoded_state(u)
    return z_expectations(psi)


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (perturbed in place, then restored)."""
    g = np.zeros_like(x, dtype=float)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def mann_whitney_auc(labels, scores):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def ntxent_direct(z, tau):
    """Loss straight from the definition with explicit loops."""
    m = len(z)
    total = 0.0
    for a in range(m):
        p = a + 1 if a % 2 == 0 else a - 1
        num = math.exp(float(z[a] @ z[p]) / tau)
        den = sum(math.exp(float(z[a] @ z[b]) / tau) for b in range(m) if b != a)
        total += -math.log(num / den)
    return total / m


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
