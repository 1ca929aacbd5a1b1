"""Dense statevector simulation for small circuits.

Qubit 0 is the least-significant bit of the amplitude index, and bitstrings
are printed qubit-0-first.  Every kernel in this module works on a 2-D array
of shape ``(batch, 2**n)`` so that many independent runs (one per shot, one
per key) can be advanced with a single numpy call.  The public
:class:`StateVector` API is a thin single-state wrapper over those kernels.

Phase conventions::

    RZ(t) = diag(exp(-i t/2), exp(i t/2))
    T     = diag(1, exp(i pi/4))
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MAX_QUBITS = 24

CLIFFORD_T_KINDS = frozenset({"X", "Z", "H", "S", "T", "CNOT"})
ROTATION_KINDS = frozenset({"RX", "RY", "RZ", "CRZ", "ACRX"})
TWO_QUBIT_KINDS = frozenset({"CNOT", "SWAP", "CRZ", "ACRX"})
GATE_KINDS = frozenset(
    {"X", "Z", "H", "S", "Sdg", "T", "Tdg", "CNOT", "SWAP"}
) | ROTATION_KINDS

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_OMEGA = complex(math.cos(math.pi / 4), math.sin(math.pi / 4))

_DAGGER = {"S": "Sdg", "Sdg": "S", "T": "Tdg", "Tdg": "T"}


class CircuitError(ValueError):
    """Raised for malformed gates, circuits and circuit files."""


@dataclass(frozen=True)
class Gate:
    kind: str
    qubits: tuple[int, ...]
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise CircuitError(f"unknown gate kind {self.kind!r}")
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        arity = 2 if self.kind in TWO_QUBIT_KINDS else 1
        if len(self.qubits) != arity:
            raise CircuitError(f"{self.kind} takes {arity} qubit(s), got {self.qubits}")
        if len(set(self.qubits)) != arity:
            raise CircuitError(f"{self.kind} qubits must be distinct, got {self.qubits}")
        if any(q < 0 for q in self.qubits):
            raise CircuitError(f"negative qubit index in {self.qubits}")
        if self.kind in ROTATION_KINDS:
            if self.angle is None or not math.isfinite(self.angle):
                raise CircuitError(f"{self.kind} needs a finite angle")
            object.__setattr__(self, "angle", float(self.angle))
        elif self.angle is not None:
            raise CircuitError(f"{self.kind} takes no angle")

    def dagger(self) -> "Gate":
        if self.kind in ROTATION_KINDS:
            return Gate(self.kind, self.qubits, -self.angle)
        return Gate(_DAGGER.get(self.kind, self.kind), self.qubits)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "q": list(self.qubits)}
        if self.angle is not None:
            d["angle"] = self.angle
        return d


@dataclass
class Circuit:
    n_qubits: int
    gates: list[Gate] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.n_qubits <= MAX_QUBITS:
            raise CircuitError(f"n_qubits must be in [1, {MAX_QUBITS}], got {self.n_qubits}")
        self.gates = list(self.gates)
        for pos, g in enumerate(self.gates):
            self._check(g, pos)

    def _check(self, gate: Gate, pos: int | None = None):
        if max(gate.qubits) >= self.n_qubits:
            where = "" if pos is None else f" at position {pos}"
            raise CircuitError(
                f"gate {gate.kind}{list(gate.qubits)}{where} exceeds {self.n_qubits} qubits"
            )

    def append(self, kind: str, *qubits: int, angle: float | None = None) -> "Circuit":
        g = Gate(kind, qubits, angle)
        self._check(g, len(self.gates))
        self.gates.append(g)
        return self

    def extend(self, gates: Iterable[Gate]) -> "Circuit":
        for g in gates:
            self._check(g, len(self.gates))
            self.gates.append(g)
        return self

    def __len__(self):
        return len(self.gates)

    def __iter__(self):
        return iter(self.gates)

    def inverse(self) -> "Circuit":
        return Circuit(self.n_qubits, [g.dagger() for g in reversed(self.gates)])

    @property
    def clifford_t_only(self) -> bool:
        return all(g.kind in CLIFFORD_T_KINDS for g in self.gates)

    def count(self, *kinds: str) -> int:
        return sum(1 for g in self.gates if g.kind in kinds)

    def to_dict(self) -> dict:
        return {"n_qubits": self.n_qubits, "gates": [g.to_dict() for g in self.gates]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Circuit":
        try:
            n = int(data["n_qubits"])
            raw = data["gates"]
        except (KeyError, TypeError) as exc:
            raise CircuitError(f"circuit JSON needs 'n_qubits' and 'gates': {exc}") from None
        gates = []
        for pos, item in enumerate(raw):
            try:
                gates.append(Gate(item["kind"], tuple(item["q"]), item.get("angle")))
            except (CircuitError, KeyError, TypeError) as exc:
                raise CircuitError(f"gate {pos}: {exc}") from None
        try:
            return cls(n, gates)
        except CircuitError as exc:
            raise CircuitError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "Circuit":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# matrices

def rz_matrix(theta: float) -> np.ndarray:
    return np.array([[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=complex)


def rx_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def ry_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


FIXED_MATRICES = {
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "H": np.array([[1, 1], [1, -1]], dtype=complex) * _INV_SQRT2,
    "S": np.array([[1, 0], [0, 1j]], dtype=complex),
    "Sdg": np.array([[1, 0], [0, -1j]], dtype=complex),
    "T": np.array([[1, 0], [0, _OMEGA]], dtype=complex),
    "Tdg": np.array([[1, 0], [0, _OMEGA.conjugate()]], dtype=complex),
}
_ROT = {"RX": rx_matrix, "RY": ry_matrix, "RZ": rz_matrix}

_DIAG_PHASE = {"Z": -1.0, "S": 1j, "Sdg": -1j, "T": _OMEGA, "Tdg": _OMEGA.conjugate()}


def single_qubit_matrix(gate: Gate) -> np.ndarray:
    if gate.kind in _ROT:
        return _ROT[gate.kind](gate.angle)
    return FIXED_MATRICES[gate.kind]


# ---------------------------------------------------------------------------
# in-place kernels on (batch, 2**n) arrays

def _split1(psi: np.ndarray, q: int, n: int) -> np.ndarray:
    return psi.reshape(psi.shape[0], 1 << (n - 1 - q), 2, 1 << q)


def _split2(psi: np.ndarray, a: int, b: int, n: int):
    """View with separate axes for qubits a and b; returns (view, axis_a, axis_b)."""
    hi, lo = max(a, b), min(a, b)
    v = psi.reshape(psi.shape[0], 1 << (n - 1 - hi), 2, 1 << (hi - 1 - lo), 2, 1 << lo)
    return v, (2 if a == hi else 4), (2 if b == hi else 4)


def _slice2(v, axis_a, axis_b, bit_a, bit_b):
    idx = [slice(None)] * 6
    idx[axis_a] = bit_a
    idx[axis_b] = bit_b
    return v[tuple(idx)]


def apply_matrix_1q(psi: np.ndarray, mat: np.ndarray, q: int, n: int) -> None:
    """Apply a 2x2 matrix, or a (batch, 2, 2) stack of them, to qubit q in place."""
    v = _split1(psi, q, n)
    a0 = v[:, :, 0, :].copy()
    a1 = v[:, :, 1, :]
    if mat.ndim == 3:
        m = mat[:, :, :, None, None]
        v[:, :, 0, :] = m[:, 0, 0] * a0 + m[:, 0, 1] * a1
        v[:, :, 1, :] = m[:, 1, 0] * a0 + m[:, 1, 1] * a1
    else:
        v[:, :, 0, :] = mat[0, 0] * a0 + mat[0, 1] * a1
        v[:, :, 1, :] = mat[1, 0] * a0 + mat[1, 1] * a1


def apply_phase_1q(psi: np.ndarray, phase, q: int, n: int) -> None:
    """Multiply the |1> component of qubit q by ``phase`` (scalar or per-row array)."""
    v = _split1(psi, q, n)
    if np.ndim(phase):
        v[:, :, 1, :] *= np.asarray(phase)[:, None, None]
    else:
        v[:, :, 1, :] *= phase


def apply_gate_inplace(psi: np.ndarray, gate: Gate, n: int) -> None:
    kind, qs = gate.kind, gate.qubits
    if kind in _DIAG_PHASE:
        apply_phase_1q(psi, _DIAG_PHASE[kind], qs[0], n)
    elif kind == "X":
        v = _split1(psi, qs[0], n)
        v[:] = v[:, :, ::-1, :].copy()
    elif kind == "H":
        v = _split1(psi, qs[0], n)
        a0 = v[:, :, 0, :].copy()
        a1 = v[:, :, 1, :]
        v[:, :, 0, :] += a1
        v[:, :, 0, :] *= _INV_SQRT2
        a1 -= a0
        a1 *= -_INV_SQRT2
    elif kind == "RZ":
        v = _split1(psi, qs[0], n)
        v[:, :, 0, :] *= np.exp(-0.5j * gate.angle)
        v[:, :, 1, :] *= np.exp(0.5j * gate.angle)
    elif kind in _ROT:
        apply_matrix_1q(psi, _ROT[kind](gate.angle), qs[0], n)
    elif kind == "CNOT":
        c, t = qs
        v, ac, at = _split2(psi, c, t, n)
        s0 = _slice2(v, ac, at, 1, 0)
        s1 = _slice2(v, ac, at, 1, 1)
        tmp = s0.copy()
        s0[...] = s1
        s1[...] = tmp
    elif kind == "SWAP":
        a, b = qs
        v, aa, ab = _split2(psi, a, b, n)
        s01 = _slice2(v, aa, ab, 0, 1)
        s10 = _slice2(v, aa, ab, 1, 0)
        tmp = s01.copy()
        s01[...] = s10
        s10[...] = tmp
    elif kind == "CRZ":
        c, t = qs
        v, ac, at = _split2(psi, c, t, n)
        _slice2(v, ac, at, 1, 0)[...] *= np.exp(-0.5j * gate.angle)
        _slice2(v, ac, at, 1, 1)[...] *= np.exp(0.5j * gate.angle)
    elif kind == "ACRX":
        c, t = qs
        v, ac, at = _split2(psi, c, t, n)
        s0 = _slice2(v, ac, at, 0, 0)
        s1 = _slice2(v, ac, at, 0, 1)
        cs, sn = math.cos(gate.angle / 2), math.sin(gate.angle / 2)
        a0 = s0.copy()
        s0 *= cs
        s0 += -1j * sn * s1
        s1 *= cs
        s1 += -1j * sn * a0
    else:  # pragma: no cover - Gate validates kinds
        raise CircuitError(f"no kernel for {kind}")


def run_gates_inplace(psi: np.ndarray, gates: Sequence[Gate], n: int) -> None:
    for g in gates:
        apply_gate_inplace(psi, g, n)


def probs_one(psi: np.ndarray, q: int, n: int) -> np.ndarray:
    """Per-row probability that qubit q reads 1."""
    v = _split1(psi, q, n)[:, :, 1, :]
    return np.einsum("bij,bij->b", v.real, v.real) + np.einsum("bij,bij->b", v.imag, v.imag)


def collapse_inplace(psi: np.ndarray, q: int, n: int, bits: np.ndarray) -> np.ndarray:
    """Project qubit q of every row onto ``bits`` and renormalise; returns branch probabilities."""
    bits = np.asarray(bits, dtype=np.int64)
    v = _split1(psi, q, n)
    p1 = probs_one(psi, q, n)
    p = np.where(bits == 1, p1, 1.0 - p1)
    if np.any(p <= 1e-15):
        raise FloatingPointError("collapse onto a zero-probability branch")
    rows = np.arange(psi.shape[0])
    v[rows, :, 1 - bits, :] = 0.0
    psi /= np.sqrt(p)[:, None]
    return p


def sample_rows(psi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one computational-basis index per row."""
    probs = np.abs(psi) ** 2
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(psi.shape[0])
    return np.minimum((cdf < u[:, None]).sum(axis=1), psi.shape[1] - 1)


def index_bits(indices: np.ndarray, qubits: Sequence[int]) -> np.ndarray:
    """Extract the given qubits' bits from basis indices; shape (len(indices), len(qubits))."""
    indices = np.asarray(indices, dtype=np.int64)
    return np.stack([(indices >> q) & 1 for q in qubits], axis=-1).astype(np.uint8)


def bitstring(bits: Iterable[int]) -> str:
    return "".join(str(int(b)) for b in bits)


# ---------------------------------------------------------------------------
# public single-state API

@dataclass
class StateVector:
    n_qubits: int
    amps: np.ndarray

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=complex).reshape(-1)
        if self.amps.size != 1 << self.n_qubits:
            raise ValueError(
                f"{self.n_qubits} qubits need {1 << self.n_qubits} amplitudes, got {self.amps.size}"
            )

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amps.copy())

    @property
    def norm(self) -> float:
        return float(np.vdot(self.amps, self.amps).real)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amps) ** 2

    def fidelity(self, other: "StateVector") -> float:
        """|<self|other>|^2, insensitive to global phase."""
        return float(abs(np.vdot(self.amps, other.amps)) ** 2)


def _check_qubit_count(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= MAX_QUBITS:
        raise ValueError(f"qubit count must be an integer in [1, {MAX_QUBITS}], got {n!r}")


def new_state(n_qubits: int) -> StateVector:
    _check_qubit_count(n_qubits)
    amps = np.zeros(1 << n_qubits, dtype=complex)
    amps[0] = 1.0
    return StateVector(n_qubits, amps)


def basis_state(n_qubits: int, bits: Sequence[int]) -> StateVector:
    """|b_0 b_1 ...> with bits given qubit-0-first."""
    _check_qubit_count(n_qubits)
    idx = sum(int(b) << q for q, b in enumerate(bits))
    amps = np.zeros(1 << n_qubits, dtype=complex)
    amps[idx] = 1.0
    return StateVector(n_qubits, amps)


def _check_index(state: StateVector, qubit: int) -> None:
    if not 0 <= qubit < state.n_qubits:
        raise IndexError(f"qubit {qubit} out of range for {state.n_qubits} qubits")


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    if max(gate.qubits) >= state.n_qubits:
        raise IndexError(f"gate {gate.kind}{list(gate.qubits)} exceeds {state.n_qubits} qubits")
    psi = state.amps.copy()[None, :]
    apply_gate_inplace(psi, gate, state.n_qubits)
    return StateVector(state.n_qubits, psi[0])


def apply_circuit(state: StateVector, circuit: Circuit) -> StateVector:
    if circuit.n_qubits != state.n_qubits:
        raise ValueError(
            f"circuit has {circuit.n_qubits} qubits, state has {state.n_qubits}"
        )
    psi = state.amps.copy()[None, :]
    run_gates_inplace(psi, circuit.gates, state.n_qubits)
    return StateVector(state.n_qubits, psi[0])


def prob_one(state: StateVector, qubit: int) -> float:
    _check_index(state, qubit)
    return float(probs_one(state.amps[None, :], qubit, state.n_qubits)[0])


def expectation_z(state: StateVector, qubit: int) -> float:
    return 1.0 - 2.0 * prob_one(state, qubit)


def measure_qubit(state: StateVector, qubit: int, rng: np.random.Generator) -> tuple[int, StateVector]:
    _check_index(state, qubit)
    psi = state.amps.copy()[None, :]
    p1 = probs_one(psi, qubit, state.n_qubits)[0]
    bit = int(rng.random() < p1)
    collapse_inplace(psi, qubit, state.n_qubits, np.array([bit]))
    return bit, StateVector(state.n_qubits, psi[0])


def sample_counts(state: StateVector, shots: int, rng: np.random.Generator) -> dict[str, int]:
    """Measure all qubits ``shots`` times; keys are qubit-0-first bitstrings."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    probs = state.probabilities()
    probs = probs / probs.sum()
    counts = rng.multinomial(shots, probs)
    n = state.n_qubits
    return {
        bitstring((i >> q) & 1 for q in range(n)): int(c)
        for i, c in enumerate(counts)
        if c
    }


def circuit_unitary(circuit: Circuit) -> np.ndarray:
    """Dense unitary of a circuit (column j = image of basis state j)."""
    dim = 1 << circuit.n_qubits
    psi = np.eye(dim, dtype=complex)
    run_gates_inplace(psi, circuit.gates, circuit.n_qubits)
    return psi.T.copy()


def phase_distance(u: np.ndarray, v: np.ndarray) -> float:
    """sqrt(1 - |tr(U^dag V)|/d): zero iff U and V agree up to a global phase.

    Evaluated as ||U - e^{i phi} V||_F / sqrt(2d) with the aligning phase,
    which is the same number for unitaries but avoids the cancellation in
    1 - |overlap| (that would floor the result near 1e-8).
    """
    d = u.shape[0]
    ov = np.trace(u.conj().T @ v)
    phase = ov.conjugate() / abs(ov) if abs(ov) > 0 else 1.0
    return float(np.linalg.norm(u - phase * v) / math.sqrt(2 * d))


def random_state(n_qubits: int, rng: np.random.Generator) -> StateVector:
    amps = rng.normal(size=1 << n_qubits) + 1j * rng.normal(size=1 << n_qubits)
    return StateVector(n_qubits, amps / np.linalg.norm(amps))


def make_rng(seed: int | np.random.SeedSequence | None) -> np.random.Generator:
    """PCG64 generator; child streams come from ``Generator.spawn``."""
    return np.random.Generator(np.random.PCG64(seed))
