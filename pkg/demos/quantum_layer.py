"""
Quantum feature layer walkthrough.

Encode a feature vector as RY angles, run a two-layer ring circuit, read
the Z expectations, and compare parameter-shift gradients with finite
differences.  Then fuse the readout into a classical feature vector.
"""
import numpy as np

from hyqal.hybrid import QuantumConfig, QuantumFusion
from hyqal.qsim import CircuitSpec, angle_encode, apply_variational, expectations, measure_z, quantum_gradients


def main():
    rng = np.random.default_rng(0)
    spec = CircuitSpec(num_qubits=4, num_layers=2, topology="ring")
    u = rng.uniform(-np.pi, np.pi, size=4)
    theta = rng.uniform(-np.pi, np.pi, size=spec.theta_shape)

    psi = apply_variational(angle_encode(u), spec, theta)
    print("angles u      :", np.round(u, 3))
    print("state norm    :", np.linalg.norm(psi.amplitudes))
    print("<Z_q> readout :", np.round(measure_z(psi), 4))
    # without the variational block each qubit just reads cos(u_q)
    print("cos(u)        :", np.round(np.cos(u), 4))

    # d/du and d/dTheta of sum_q w_q <Z_q>, exact via parameter shifts
    w = np.ones(4)
    gu, gt = quantum_gradients(u, spec, theta, w)
    eps = 1e-6
    fd = np.array([(expectations(u + eps * e, spec, theta) - expectations(u - eps * e, spec, theta)).sum() / (2 * eps)
                   for e in np.eye(4)])
    print("shift grad u  :", np.round(gu, 6))
    print("finite diff   :", np.round(fd, 6))
    print("max |diff|    :", np.max(np.abs(gu - fd)))

    # residual fusion: h -> h + alpha * W_r q
    fusion = QuantumFusion(8, QuantumConfig(qubits=4, layers=2, alpha_init=0.1), rng)
    h = rng.normal(size=(3, 8))
    out = fusion.forward(h)
    print("fusion shift  :", np.round(np.linalg.norm(out - h, axis=1), 4), "(alpha = 0.1)")


if __name__ == "__main__":
    main()
