"""Perfectly-secure quantum homomorphic encryption on top of :mod:`simcore`.

The client encrypts with a quantum one-time pad (random X/Z per qubit); the
server runs a Clifford+T circuit directly on the ciphertext and emits one
key-update step per non-Pauli gate.  T gates go through a teleportation
gadget whose Bell-measurement outcomes become part of the key.

The simulator measures each Bell register as soon as its gadget finishes and
reuses a single two-qubit ancilla.  By deferred measurement this has the same
statistics as keeping M registers around until the end.

Only :class:`ClientKeyTracker` ever holds key bits.  The evaluator sees the
key exclusively through ``tracker.x_bit(i)`` inside the gadget, which plays
the client's S^a correction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import simcore as sc
from .simcore import Circuit, Gate, StateVector

CLIFFORD_STEPS = ("H", "S", "CNOT")


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# keys and key-update programs

@dataclass
class PauliKey:
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.uint8).reshape(-1)
        self.z = np.asarray(self.z, dtype=np.uint8).reshape(-1)
        if self.x.shape != self.z.shape:
            raise ValueError("x and z must have equal length")
        if np.any(self.x > 1) or np.any(self.z > 1):
            raise ValueError("key entries must be bits")

    @property
    def n(self) -> int:
        return self.x.size

    def copy(self) -> "PauliKey":
        return PauliKey(self.x.copy(), self.z.copy())

    def __eq__(self, other):
        return (
            isinstance(other, PauliKey)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.z, other.z)
        )

    def to_dict(self) -> dict:
        return {"x": sc.bitstring(self.x), "z": sc.bitstring(self.z)}

    @classmethod
    def from_strings(cls, x: str, z: str) -> "PauliKey":
        return cls([int(c) for c in x], [int(c) for c in z])


@dataclass(frozen=True)
class KeyUpdateStep:
    op: str
    qubits: tuple[int, ...]
    bell: int | None = None

    def __post_init__(self):
        arity = 2 if self.op == "CNOT" else 1
        if self.op not in ("H", "S", "CNOT", "T"):
            raise ValueError(f"no key-update function for {self.op!r}")
        if len(self.qubits) != arity:
            raise ValueError(f"{self.op} step takes {arity} qubit(s)")
        if (self.op == "T") != (self.bell is not None):
            raise ValueError("exactly the T steps carry a Bell-register ordinal")

    def to_dict(self) -> dict:
        if self.op == "CNOT":
            return {"op": "CNOT", "c": self.qubits[0], "t": self.qubits[1]}
        d = {"op": self.op, "q": self.qubits[0]}
        if self.op == "T":
            d["bell"] = self.bell
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KeyUpdateStep":
        if d["op"] == "CNOT":
            return cls("CNOT", (int(d["c"]), int(d["t"])))
        bell = d.get("bell")
        return cls(d["op"], (int(d["q"]),), None if bell is None else int(bell))


@dataclass
class KeyUpdateProgram:
    n: int
    steps: list[KeyUpdateStep] = field(default_factory=list)

    def __post_init__(self):
        m = 0
        for pos, s in enumerate(self.steps):
            if max(s.qubits) >= self.n:
                raise ValueError(f"step {pos} addresses qubit outside register of {self.n}")
            if s.op == "T":
                m += 1
                if s.bell != m:
                    raise ValueError(f"step {pos}: Bell ordinals must run 1..M in order")

    @property
    def t_count(self) -> int:
        return sum(1 for s in self.steps if s.op == "T")

    def to_dict(self) -> dict:
        return {"n": self.n, "steps": [s.to_dict() for s in self.steps]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "KeyUpdateProgram":
        return cls(int(d["n"]), [KeyUpdateStep.from_dict(s) for s in d["steps"]])

    @classmethod
    def from_json(cls, text: str) -> "KeyUpdateProgram":
        return cls.from_dict(json.loads(text))


@dataclass
class BellOutcomes:
    pairs: np.ndarray  # (M, 2) rows of (r_a, r_b)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.uint8).reshape(-1, 2)

    def __len__(self):
        return len(self.pairs)


def emit_program(circuit: Circuit) -> KeyUpdateProgram:
    """Key-update program of a Clifford+T circuit; X and Z contribute nothing."""
    _require_clifford_t(circuit)
    steps, m = [], 0
    for g in circuit.gates:
        if g.kind in ("X", "Z"):
            continue
        if g.kind == "T":
            m += 1
            steps.append(KeyUpdateStep("T", g.qubits, m))
        else:
            steps.append(KeyUpdateStep(g.kind, g.qubits))
    return KeyUpdateProgram(circuit.n_qubits, steps)


def _require_clifford_t(circuit: Circuit) -> None:
    for pos, g in enumerate(circuit.gates):
        if g.kind not in sc.CLIFFORD_T_KINDS:
            raise ProtocolError(f"gate {pos} ({g.kind}) is not in the Clifford+T set")


# ---------------------------------------------------------------------------
# key algebra; the *_rows helpers update (batch, n) bit arrays in place

def _update_rows(x: np.ndarray, z: np.ndarray, step: KeyUpdateStep, ra=None, rb=None) -> None:
    if step.op == "H":
        i = step.qubits[0]
        tmp = x[:, i].copy()
        x[:, i] = z[:, i]
        z[:, i] = tmp
    elif step.op == "S":
        i = step.qubits[0]
        z[:, i] ^= x[:, i]
    elif step.op == "CNOT":
        i, j = step.qubits
        z[:, i] ^= z[:, j]
        x[:, j] ^= x[:, i]
    else:
        i = step.qubits[0]
        z[:, i] ^= x[:, i] ^ rb
        x[:, i] ^= ra


def key_update_clifford(key: PauliKey, step: KeyUpdateStep) -> PauliKey:
    if step.op not in CLIFFORD_STEPS:
        raise ValueError(f"{step.op} is not a Clifford key update")
    if max(step.qubits) >= key.n:
        raise IndexError(f"step qubits {step.qubits} outside key of length {key.n}")
    x, z = key.x[None, :].copy(), key.z[None, :].copy()
    _update_rows(x, z, step)
    return PauliKey(x[0], z[0])


def key_update_t(key: PauliKey, i: int, r_a: int, r_b: int) -> PauliKey:
    if not 0 <= i < key.n:
        raise IndexError(f"qubit {i} outside key of length {key.n}")
    x, z = key.x.copy(), key.z.copy()
    z[i] ^= x[i] ^ (r_b & 1)
    x[i] ^= r_a & 1
    return PauliKey(x, z)


def replay_key(program: KeyUpdateProgram, initial: PauliKey, bell: BellOutcomes) -> PauliKey:
    if len(bell) != program.t_count:
        raise ValueError(f"{len(bell)} Bell outcomes for {program.t_count} T steps")
    if initial.n != program.n:
        raise ValueError(f"key of length {initial.n} for a {program.n}-qubit program")
    x, z = initial.x[None, :].copy(), initial.z[None, :].copy()
    for step in program.steps:
        if step.op == "T":
            ra, rb = bell.pairs[step.bell - 1]
            _update_rows(x, z, step, ra, rb)
        else:
            _update_rows(x, z, step)
    return PauliKey(x[0], z[0])


def keygen(n: int, rng: np.random.Generator) -> PauliKey:
    if n < 1:
        raise ValueError("key length must be >= 1")
    bits = rng.integers(0, 2, size=2 * n, dtype=np.uint8)
    return PauliKey(bits[:n], bits[n:])


def keygen_rows(n: int, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise ValueError("key length must be >= 1")
    bits = rng.integers(0, 2, size=(count, 2 * n), dtype=np.uint8)
    return bits[:, :n].copy(), bits[:, n:].copy()


def decrypt_bits(bits, final_key: PauliKey):
    """XOR readout bits with the final x key; z plays no role in Z-basis readout."""
    as_str = isinstance(bits, str)
    arr = np.array([int(c) for c in bits] if as_str else bits, dtype=np.uint8)
    if arr.shape != final_key.x.shape:
        raise ValueError(f"{arr.size} bits for a key of length {final_key.n}")
    out = arr ^ final_key.x
    return sc.bitstring(out) if as_str else out


# ---------------------------------------------------------------------------
# QOTP

def qotp_rows(psi: np.ndarray, x: np.ndarray, z: np.ndarray, n: int) -> None:
    """Apply X^x Z^z (Z first) to every qubit of every row, in place."""
    for q in range(n):
        zq = z[:, q]
        if zq.any():
            sc.apply_phase_1q(psi, np.where(zq == 1, -1.0, 1.0), q, n)
        rows = np.flatnonzero(x[:, q])
        if rows.size:
            v = sc._split1(psi, q, n)
            v[rows] = v[rows][:, :, ::-1, :]


def qotp_apply(state: StateVector, key: PauliKey) -> StateVector:
    if key.n != state.n_qubits:
        raise ValueError(f"key of length {key.n} for {state.n_qubits} qubits")
    psi = state.amps.copy()[None, :]
    qotp_rows(psi, key.x[None, :], key.z[None, :], state.n_qubits)
    return StateVector(state.n_qubits, psi[0])


# ---------------------------------------------------------------------------
# client side of the evaluation

class ClientKeyTracker:
    """Client-owned running key for a batch of independent protocol runs.

    The server forwards every key-update step as it emits it; T steps arrive
    together with the client's own Bell outcomes.
    """

    def __init__(self, x: np.ndarray, z: np.ndarray):
        self.x = np.array(x, dtype=np.uint8, ndmin=2)
        self.z = np.array(z, dtype=np.uint8, ndmin=2)
        self.initial_x = self.x.copy()
        self.initial_z = self.z.copy()
        self._bell: list[np.ndarray] = []  # blocks of shape (batch, m, 2)

    def x_bit(self, i: int) -> np.ndarray:
        return self.x[:, i].copy()

    def observe(self, step: KeyUpdateStep, ra=None, rb=None) -> None:
        if step.op == "T":
            self._bell.append(np.stack([ra, rb], axis=-1).astype(np.uint8)[:, None, :])
        _update_rows(self.x, self.z, step, ra, rb)

    def observe_bell(self, bell: np.ndarray) -> None:
        """Record a (batch, M, 2) block of outcomes whose updates were already applied."""
        self._bell.append(bell.astype(np.uint8))

    def bell_array(self) -> np.ndarray:
        """(batch, M, 2) array of (r_a, r_b)."""
        if not self._bell:
            return np.zeros((self.x.shape[0], 0, 2), dtype=np.uint8)
        return np.concatenate(self._bell, axis=1)


# ---------------------------------------------------------------------------
# T gadget

def _bell_pair() -> np.ndarray:
    """Ancilla |00> -> (|00>+|11>)/sqrt(2) via H, CNOT; local qubit 0 = A1."""
    anc = np.zeros((1, 4), dtype=complex)
    anc[0, 0] = 1.0
    sc.run_gates_inplace(anc, [Gate("H", (0,)), Gate("CNOT", (0, 1))], 2)
    return anc[0]


def _client_bell_unitaries() -> np.ndarray:
    """H(A1) CNOT(A1->A2) S^a(A1) as 4x4 matrices, indexed by a."""
    mats = []
    for a in (0, 1):
        c = Circuit(2, ([Gate("S", (0,))] if a else []) + [Gate("CNOT", (0, 1)), Gate("H", (0,))])
        mats.append(sc.circuit_unitary(c))
    return np.stack(mats)


_BELL = _bell_pair()
_CLIENT_V = _client_bell_unitaries()


def _branch_operators() -> np.ndarray:
    """ops[a, r] maps data-qubit amplitudes to wire-i amplitudes for outcome r.

    After SWAP(i, A1) the data sits on A1 and wire i holds the Bell half that
    was on A1.  With r = rb + 2*ra (A1 bit low), the unnormalised post-
    measurement wire-i state is sum_d ops[a, r][u, d] * psi_d.
    """
    ops = np.zeros((2, 4, 2, 2), dtype=complex)
    for a in (0, 1):
        for r in range(4):
            for u in (0, 1):
                for d in (0, 1):
                    ops[a, r, u, d] = sum(
                        _CLIENT_V[a][r, d + 2 * w] * _BELL[u + 2 * w] for w in (0, 1)
                    )
    return ops


_BRANCH_OPS = _branch_operators()


def gadget_branches(psi: np.ndarray, i: int, n: int, a: np.ndarray) -> np.ndarray:
    """Unnormalised post-measurement states for the 4 outcomes; shape (4, batch, 2**n).

    Expects T already applied on wire i.  Used to cross-check the fast path.
    """
    out = []
    for r in range(4):
        branch = psi.copy()
        sc.apply_matrix_1q(branch, _BRANCH_OPS[a, r], i, n)
        out.append(branch)
    return np.stack(out)


def _gadget_unitaries() -> np.ndarray:
    """U[a, r] = 2 ops[a, r] T: the whole gadget on wire i for outcome r.

    Each outcome of the Bell measurement has probability exactly 1/4 whatever
    the data state (the data is measured jointly with half of a fresh Bell
    pair), so 2 ops[a, r] is unitary.  This is checked here at import.
    """
    t = sc.FIXED_MATRICES["T"]
    u = 2 * np.einsum("arud,de->arue", _BRANCH_OPS, t)
    eye = np.eye(2)
    for a in (0, 1):
        for r in range(4):
            if not np.allclose(u[a, r].conj().T @ u[a, r], eye, atol=1e-12):
                raise AssertionError("gadget branch is not unitary")  # pragma: no cover
    return u


_GADGET_U = _gadget_unitaries()


def draw_outcomes(t_count: int, rows: int, rng) -> np.ndarray:
    """(M, rows) uniform gadget outcomes r = r_b + 2 r_a."""
    return rng.integers(0, 4, size=(t_count, rows))


def t_gadget_rows(psi: np.ndarray, i: int, n: int, tracker: ClientKeyTracker, rng, r=None) -> tuple[np.ndarray, np.ndarray]:
    """Homomorphic T on wire i for every row, in place; returns (r_a, r_b).

    The outcome r = r_b + 2 r_a is uniform, so it is drawn first (or passed
    in) and the matching branch unitary is applied.
    """
    a = tracker.x_bit(i).astype(np.int64)
    if r is None:
        r = rng.integers(0, 4, size=psi.shape[0])
    sc.apply_matrix_1q(psi, _GADGET_U[a, r], i, n)
    return (r >> 1).astype(np.uint8), (r & 1).astype(np.uint8)


@dataclass
class BellRegister:
    """Reusable two-qubit ancilla workspace for the explicit gadget."""

    state: StateVector = field(default_factory=lambda: sc.new_state(2))

    @property
    def is_reset(self) -> bool:
        return abs(self.state.amps[0]) > 1 - 1e-12

    def reset(self) -> None:
        self.state = sc.new_state(2)


def t_gadget(state: StateVector, i: int, a: int, ancilla: BellRegister, rng) -> tuple[StateVector, int, int]:
    """Gate-by-gate gadget on an explicit (n+2)-qubit register.

    Ancilla qubits are n (A1) and n+1 (A2).  Returns the n-qubit state on the
    measured branch and (r_a, r_b).
    """
    if not ancilla.is_reset:
        raise ProtocolError("Bell register must be reset to |00> before reuse")
    n = state.n_qubits
    if not 0 <= i < n:
        raise IndexError(f"qubit {i} out of range")
    a1, a2 = n, n + 1
    full = StateVector(n + 2, np.kron(ancilla.state.amps, state.amps))
    gates = [
        Gate("T", (i,)),
        Gate("H", (a1,)),
        Gate("CNOT", (a1, a2)),
        Gate("SWAP", (i, a1)),
    ]
    if a:
        gates.append(Gate("S", (a1,)))
    gates += [Gate("CNOT", (a1, a2)), Gate("H", (a1,))]
    full = sc.apply_circuit(full, Circuit(n + 2, gates))
    rb, full = sc.measure_qubit(full, a1, rng)
    ra, full = sc.measure_qubit(full, a2, rng)
    branch = (rb | (ra << 1)) << n
    out = full.amps[branch : branch + (1 << n)].copy()
    ancilla.reset()
    return StateVector(n, out), ra, rb


# ---------------------------------------------------------------------------
# server

FUSE_MAX_QUBITS = 4


def clifford_key_map(steps: Sequence[KeyUpdateStep], n: int) -> np.ndarray:
    """(2n, 2n) binary matrix K with (x | z) -> (x | z) K mod 2 for the steps."""
    x = np.concatenate([np.eye(n, dtype=np.uint8), np.zeros((n, n), dtype=np.uint8)])
    z = np.concatenate([np.zeros((n, n), dtype=np.uint8), np.eye(n, dtype=np.uint8)])
    for step in steps:
        _update_rows(x, z, step)
    return np.concatenate([x, z], axis=1).astype(np.int64)


@dataclass
class CompiledCircuit:
    """A Clifford+T circuit cut at its T gates, as flat arrays.

    Segment s is either a Clifford run (kinds[s] = 0) whose transposed dense
    unitary and key map are ``mats[qubits[s]]`` and ``kmaps[qubits[s]]``, or a
    T gate (kinds[s] = 1) on wire ``qubits[s]``.  Only sensible for small n.
    """

    n: int
    circuit: Circuit
    kinds: np.ndarray
    qubits: np.ndarray
    mats: np.ndarray
    kmaps: np.ndarray
    t_count: int
    _program: KeyUpdateProgram | None = None

    @property
    def program(self) -> KeyUpdateProgram:
        if self._program is None:
            self._program = emit_program(self.circuit)
        return self._program


@lru_cache(maxsize=4096)
def _gate_block(kind: str, qubits: tuple[int, ...], n: int) -> tuple[np.ndarray, np.ndarray]:
    """(U^T, key map) of one Clifford gate on n qubits."""
    m = np.eye(1 << n, dtype=complex)
    sc.apply_gate_inplace(m, Gate(kind, qubits), n)
    steps = [KeyUpdateStep(kind, qubits)] if kind in CLIFFORD_STEPS else []
    return m, clifford_key_map(steps, n)


@lru_cache(maxsize=65536)
def _run_block(run: tuple[tuple[str, tuple[int, ...]], ...], n: int) -> tuple[np.ndarray, np.ndarray]:
    m, k = _gate_block(*run[0], n)
    for kind, qubits in run[1:]:
        gm, gk = _gate_block(kind, qubits, n)
        m = m @ gm
        k = (k @ gk) & 1
    return m, k


def compile_circuit(circuit: Circuit) -> CompiledCircuit:
    _require_clifford_t(circuit)
    n = circuit.n_qubits
    if n > FUSE_MAX_QUBITS:
        raise ValueError(f"fusing needs n <= {FUSE_MAX_QUBITS}")
    dim = 1 << n
    kinds, qubits, mats, kmaps = [], [], [], []
    run: list[tuple[str, tuple[int, ...]]] = []

    def flush():
        if run:
            m, k = _run_block(tuple(run), n)
            kinds.append(0)
            qubits.append(len(mats))  # block index for Clifford segments
            mats.append(m)
            kmaps.append(k)
            run.clear()

    for g in circuit.gates:
        if g.kind == "T":
            flush()
            kinds.append(1)
            qubits.append(g.qubits[0])
        else:
            run.append((g.kind, g.qubits))
    flush()
    kinds_a = np.array(kinds, dtype=np.int64)
    return CompiledCircuit(
        n,
        circuit,
        kinds_a,
        np.array(qubits, dtype=np.int64),
        np.array(mats, dtype=complex).reshape(len(mats), dim, dim),
        np.array(kmaps, dtype=np.int64).reshape(len(mats), 2 * n, 2 * n),
        int(kinds_a.sum()),
    )


def server_evaluate_rows(circuit, psi: np.ndarray, tracker: ClientKeyTracker, rng, fused: bool | None = None,
                         want_program: bool = True) -> KeyUpdateProgram | None:
    """Evaluate a Clifford+T circuit on encrypted rows in place; returns the program.

    ``circuit`` is a Circuit or a CompiledCircuit.  Gadget outcomes are drawn
    up front, one (M, rows) block, so the fused and step-wise paths consume
    the generator identically and give the same result.  ``fused`` defaults
    to True for n <= FUSE_MAX_QUBITS.  With ``want_program=False`` a
    compiled circuit skips building the step list and None is returned.
    """
    from . import _kernels

    if isinstance(circuit, Circuit):
        _require_clifford_t(circuit)
        if fused is None:
            fused = circuit.n_qubits <= FUSE_MAX_QUBITS
        if fused:
            circuit = compile_circuit(circuit)
    if isinstance(circuit, CompiledCircuit):
        r = draw_outcomes(circuit.t_count, psi.shape[0], rng)
        bell = np.zeros((psi.shape[0], circuit.t_count, 2), dtype=np.int64)
        x = tracker.x.astype(np.int64)
        z = tracker.z.astype(np.int64)
        _kernels.run_fused(psi, x, z, circuit.kinds, circuit.qubits, circuit.mats, circuit.kmaps, r, _GADGET_U, bell)
        tracker.x[:] = x
        tracker.z[:] = z
        tracker.observe_bell(bell)
        return circuit.program if want_program else None
    n = circuit.n_qubits
    r = draw_outcomes(sum(1 for g in circuit.gates if g.kind == "T"), psi.shape[0], rng)
    steps, m = [], 0
    for g in circuit.gates:
        if g.kind == "T":
            step = KeyUpdateStep("T", g.qubits, m + 1)
            ra, rb = t_gadget_rows(psi, g.qubits[0], n, tracker, rng, r[m])
            tracker.observe(step, ra, rb)
            steps.append(step)
            m += 1
            continue
        sc.apply_gate_inplace(psi, g, n)
        if g.kind in CLIFFORD_STEPS:
            step = KeyUpdateStep(g.kind, g.qubits)
            tracker.observe(step)
            steps.append(step)
    return KeyUpdateProgram(n, steps)


def server_evaluate(circuit: Circuit, enc_state: StateVector, key_oracle: ClientKeyTracker, rng):
    """Single-state evaluation; returns (enc_final, program, bell)."""
    if circuit.n_qubits != enc_state.n_qubits:
        raise ValueError("circuit and state sizes differ")
    psi = enc_state.amps.copy()[None, :]
    program = server_evaluate_rows(circuit, psi, key_oracle, rng)
    bell = BellOutcomes(key_oracle.bell_array()[0])
    return StateVector(circuit.n_qubits, psi[0]), program, bell


def random_clifford_t(n: int, t_gates: int, rng, clifford_gates: int | None = None) -> Circuit:
    """Random circuit over {X, Z, H, S, CNOT} with exactly ``t_gates`` T gates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if t_gates < 0:
        raise ValueError("t_gates must be >= 0")
    if clifford_gates is None:
        clifford_gates = 2 * t_gates + 2 * n
    kinds = ["X", "Z", "H", "S"] + (["CNOT"] if n > 1 else [])
    slots = ["T"] * t_gates + [kinds[int(k)] for k in rng.integers(0, len(kinds), clifford_gates)]
    gates = []
    for kind in (slots[int(i)] for i in rng.permutation(len(slots))):
        if kind == "CNOT":
            c, t = rng.choice(n, size=2, replace=False)
            gates.append(Gate("CNOT", (int(c), int(t))))
        else:
            gates.append(Gate(kind, (int(rng.integers(n)),)))
    return Circuit(n, gates)


@dataclass
class SelfCheck:
    initial_key: PauliKey
    final_key: PauliKey
    program: KeyUpdateProgram
    bell: BellOutcomes
    enc_final: StateVector
    fidelity: float

    @property
    def passed(self) -> bool:
        return self.fidelity >= 1 - 1e-10


def self_check(circuit: Circuit, plain_init: StateVector, rng) -> SelfCheck:
    """One encrypted run, then decrypt with the replayed key and compare to plaintext."""
    key = keygen(circuit.n_qubits, rng)
    tracker = ClientKeyTracker(key.x, key.z)
    enc_final, program, bell = server_evaluate(circuit, qotp_apply(plain_init, key), tracker, rng)
    final = replay_key(program, key, bell)
    dec = qotp_apply(enc_final, final)
    return SelfCheck(key, final, program, bell, enc_final, dec.fidelity(sc.apply_circuit(plain_init, circuit)))


# ---------------------------------------------------------------------------
# full protocol

@dataclass
class ProtocolTranscript:
    """Arrays are indexed by key run k (one homomorphic evaluation) or by shot s."""

    program: KeyUpdateProgram
    readout: tuple[int, ...]
    initial_x: np.ndarray  # (K, n)
    initial_z: np.ndarray
    bell: np.ndarray  # (K, M, 2) of (r_a, r_b)
    final_x: np.ndarray
    final_z: np.ndarray
    key_index: np.ndarray  # (S,) key run used by each shot
    encrypted_bits: np.ndarray  # (S, len(readout))
    decrypted_bits: np.ndarray

    def initial_key(self, k: int = 0) -> PauliKey:
        return PauliKey(self.initial_x[k], self.initial_z[k])

    def final_key(self, k: int = 0) -> PauliKey:
        return PauliKey(self.final_x[k], self.final_z[k])

    def bell_outcomes(self, k: int = 0) -> BellOutcomes:
        return BellOutcomes(self.bell[k])

    def fraction_ones(self, decrypted: bool = True, column: int = 0) -> float:
        bits = self.decrypted_bits if decrypted else self.encrypted_bits
        return float(bits[:, column].mean())

    def counts(self, decrypted: bool = True) -> dict[str, int]:
        bits = self.decrypted_bits if decrypted else self.encrypted_bits
        out: dict[str, int] = {}
        for row in bits:
            key = sc.bitstring(row)
            out[key] = out.get(key, 0) + 1
        return dict(sorted(out.items()))

    def to_dict(self) -> dict:
        runs = []
        for k in range(self.initial_x.shape[0]):
            runs.append(
                {
                    "initial_key": self.initial_key(k).to_dict(),
                    "bell": self.bell[k].tolist(),
                    "final_key": self.final_key(k).to_dict(),
                }
            )
        return {
            "program": self.program.to_dict(),
            "readout": list(self.readout),
            "runs": runs,
            "shots": [
                {
                    "key": int(k),
                    "encrypted": sc.bitstring(e),
                    "decrypted": sc.bitstring(d),
                }
                for k, e, d in zip(self.key_index, self.encrypted_bits, self.decrypted_bits)
            ],
        }


def _rows_budget(n: int) -> int:
    return max(1, (1 << 20) >> n)


def run_encrypted_rows(circuit: Circuit, plain_rows: np.ndarray, rng, keys=None):
    """Encrypt each row with its own key, evaluate, and return everything.

    Returns (enc_final_rows, program, tracker).  ``keys`` is an optional
    (x, z) pair of (rows, n) arrays; fresh uniform keys are drawn otherwise.
    """
    n = circuit.n_qubits
    psi = np.array(plain_rows, dtype=complex, ndmin=2)
    if keys is None:
        keys = keygen_rows(n, psi.shape[0], rng)
    tracker = ClientKeyTracker(*keys)
    qotp_rows(psi, tracker.x, tracker.z, n)
    program = server_evaluate_rows(circuit, psi, tracker, rng)
    return psi, program, tracker


def run_protocol(
    circuit: Circuit,
    plain_init: StateVector,
    readout: Sequence[int],
    shots: int,
    fresh_key_per_shot: bool = True,
    rng: np.random.Generator | None = None,
    shots_per_key: int | None = None,
) -> ProtocolTranscript:
    """Keygen, encrypt, evaluate, measure, replay keys and decrypt.

    ``fresh_key_per_shot`` gives every shot its own key and evaluation.
    Otherwise ``shots_per_key`` shots (default: all of them) are drawn from
    each encrypted output state.
    """
    if rng is None:
        raise ValueError("run_protocol needs an explicit generator")
    if shots < 1:
        raise ValueError("shots must be >= 1")
    _require_clifford_t(circuit)
    if circuit.n_qubits != plain_init.n_qubits:
        raise ValueError("circuit and state sizes differ")
    readout = tuple(int(q) for q in readout)
    n = circuit.n_qubits
    if fresh_key_per_shot:
        shots_per_key = 1
    elif shots_per_key is None:
        shots_per_key = shots
    n_keys = -(-shots // shots_per_key)

    chunk = _rows_budget(n)
    parts = []
    program = None
    for start in range(0, n_keys, chunk):
        rows = min(chunk, n_keys - start)
        plain = np.broadcast_to(plain_init.amps, (rows, 1 << n))
        psi, program, tracker = run_encrypted_rows(circuit, plain, rng)
        parts.append((psi, tracker))

    init_x, init_z, fin_x, fin_z, bells, enc, key_index = [], [], [], [], [], [], []
    offset = 0
    remaining = shots
    for psi, tracker in parts:
        rows = psi.shape[0]
        take = np.minimum(shots_per_key, remaining - np.arange(rows) * shots_per_key)
        take = np.clip(take, 0, shots_per_key)
        reps = np.repeat(np.arange(rows), take)
        idx = sc.sample_rows(psi[reps], rng)
        enc.append(sc.index_bits(idx, readout))
        key_index.append(reps + offset)
        init_x.append(tracker.initial_x)
        init_z.append(tracker.initial_z)
        fin_x.append(tracker.x)
        fin_z.append(tracker.z)
        bells.append(tracker.bell_array())
        offset += rows
        remaining -= int(take.sum())

    enc_bits = np.concatenate(enc)
    key_index = np.concatenate(key_index)
    final_x = np.concatenate(fin_x)
    dec_bits = enc_bits ^ final_x[key_index][:, list(readout)]
    return ProtocolTranscript(
        program=program,
        readout=readout,
        initial_x=np.concatenate(init_x),
        initial_z=np.concatenate(init_z),
        bell=np.concatenate(bells),
        final_x=final_x,
        final_z=np.concatenate(fin_z),
        key_index=key_index,
        encrypted_bits=enc_bits,
        decrypted_bits=dec_bits,
    )
