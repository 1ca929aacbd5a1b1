import math

import numpy as np
import pytest

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Z = np.diag([1, -1]).astype(complex)
H = np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2)
S = np.diag([1, 1j])
T = np.diag([1, np.exp(1j * math.pi / 4)])
P0 = np.diag([1, 0]).astype(complex)
P1 = np.diag([0, 1]).astype(complex)


def rz(t):
    return np.diag([np.exp(-0.5j * t), np.exp(0.5j * t)])


def rx(t):
    return np.array([[math.cos(t / 2), -1j * math.sin(t / 2)], [-1j * math.sin(t / 2), math.cos(t / 2)]])


def ry(t):
    return np.array([[math.cos(t / 2), -math.sin(t / 2)], [math.sin(t / 2), math.cos(t / 2)]], dtype=complex)


def embed(ops: dict, n: int) -> np.ndarray:
    """Tensor product with ops[q] on qubit q (qubit 0 is the least significant bit)."""
    out = np.eye(1, dtype=complex)
    for q in reversed(range(n)):
        out = np.kron(out, ops.get(q, I2))
    return out


def controlled(u: np.ndarray, c: int, t: int, n: int, on: int = 1) -> np.ndarray:
    """u on t when qubit c reads ``on``."""
    hit, miss = (P1, P0) if on else (P0, P1)
    return embed({c: hit, t: u}, n) + embed({c: miss}, n)


def oracle_gate(kind, qubits, n, angle=None):
    one = {"X": X, "Z": Z, "H": H, "S": S, "Sdg": S.conj().T, "T": T, "Tdg": T.conj().T}
    if kind in one:
        return embed({qubits[0]: one[kind]}, n)
    if kind in ("RX", "RY", "RZ"):
        return embed({qubits[0]: {"RX": rx, "RY": ry, "RZ": rz}[kind](angle)}, n)
    c, t = qubits
    if kind == "CNOT":
        return controlled(X, c, t, n)
    if kind == "CRZ":
        return controlled(rz(angle), c, t, n)
    if kind == "ACRX":
        return controlled(rx(angle), c, t, n, on=0)
    if kind == "SWAP":
        return controlled(X, c, t, n) @ controlled(X, t, c, n) @ controlled(X, c, t, n)
    raise ValueError(kind)


def oracle_unitary(circuit) -> np.ndarray:
    u = np.eye(1 << circuit.n_qubits, dtype=complex)
    for g in circuit.gates:
        u = oracle_gate(g.kind, g.qubits, circuit.n_qubits, g.angle) @ u
    return u


def phase_dist(u, v) -> float:
    return math.sqrt(max(0.0, 1 - abs(np.trace(u.conj().T @ v)) / u.shape[0]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def aligned_diff(u, v) -> float:
    """max |u - e^{i phi} v| with the phase phi that best aligns v to u.

    Used for tight equality checks, where the square root in the phase
    distance would amplify rounding noise to about 1e-8.
    """
    ov = np.trace(v.conj().T @ u)
    phase = ov / abs(ov) if abs(ov) > 0 else 1.0
    return float(np.max(np.abs(u - phase * v)))
