"""Quantum convolutional neural network: encodings, ansatz, loss and gradients.

Layer structure for n qubits (n a power of two):

* the active qubits of a layer are e_0 < e_1 < ... < e_{m-1};
* convolution: one SO(4) subunit per cyclic pair (e_i, e_{i+1 mod m}), or a
  single subunit on (e_0, e_1) when m = 2, all sharing 6 parameters;
* pooling: CRZ then anti-controlled RX on (e_0, e_1), (e_2, e_3), ... with
  control = first qubit, sharing 2 parameters.  The control is dropped and
  the target stays active.

The readout is the last survivor (qubit n - 1) and ``f = (1 - <Z>) / 2``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import simcore as sc
from .simcore import Circuit, Gate, StateVector

CONV_PARAMS = 6
POOL_PARAMS = 2
PARAMS_PER_LAYER = CONV_PARAMS + POOL_PARAMS
CLIP_DELTA = 1e-7

# four-term shift rule for rotations with a (1 + |1><1|)/2-type spectrum
_C_PLUS = (math.sqrt(2) + 1) / (4 * math.sqrt(2))
_C_MINUS = (math.sqrt(2) - 1) / (4 * math.sqrt(2))
_SHIFTS_SIMPLE = ((0.5, math.pi / 2), (-0.5, -math.pi / 2))
_SHIFTS_CONTROLLED = (
    (_C_PLUS, math.pi / 2),
    (-_C_PLUS, -math.pi / 2),
    (-_C_MINUS, 3 * math.pi / 2),
    (_C_MINUS, -3 * math.pi / 2),
)


@dataclass(frozen=True)
class LayerSpec:
    active: tuple[int, ...]
    conv_pairs: tuple[tuple[int, int], ...]
    pool_pairs: tuple[tuple[int, int], ...]
    conv_param_base: int
    pool_param_base: int


@dataclass(frozen=True)
class AnsatzSpec:
    n_qubits: int
    layers: tuple[LayerSpec, ...]
    readout_qubit: int

    @property
    def n_params(self) -> int:
        return PARAMS_PER_LAYER * len(self.layers)

    @property
    def discarded(self) -> tuple[int, ...]:
        return tuple(q for q in range(self.n_qubits) if q != self.readout_qubit)


def _check_power_of_two(n: int) -> None:
    if not isinstance(n, (int, np.integer)) or n < 2 or n & (n - 1):
        raise ValueError(f"n must be a power of two >= 2, got {n}")


def build_ansatz(n: int) -> AnsatzSpec:
    _check_power_of_two(n)
    active = tuple(range(n))
    layers = []
    while len(active) > 1:
        m = len(active)
        if m == 2:
            conv = ((active[0], active[1]),)
        else:
            conv = tuple((active[i], active[(i + 1) % m]) for i in range(m))
        pool = tuple((active[i], active[i + 1]) for i in range(0, m, 2))
        base = PARAMS_PER_LAYER * len(layers)
        layers.append(LayerSpec(active, conv, pool, base, base + CONV_PARAMS))
        active = tuple(t for _, t in pool)
    return AnsatzSpec(n, tuple(layers), active[0])


# ---------------------------------------------------------------------------
# binding

@dataclass(frozen=True)
class Occurrence:
    """One rotation gate fed by parameter ``param`` at position ``index``."""

    index: int
    param: int
    controlled: bool


def _template(spec: AnsatzSpec) -> tuple[list[tuple[str, tuple[int, ...], int | None]], list[Occurrence]]:
    gates: list[tuple[str, tuple[int, ...], int | None]] = []
    for layer in spec.layers:
        p = layer.conv_param_base
        for a, b in layer.conv_pairs:
            gates += [
                ("RY", (a,), p), ("RY", (b,), p + 1),
                ("CNOT", (a, b), None),
                ("RY", (a,), p + 2), ("RY", (b,), p + 3),
                ("CNOT", (a, b), None),
                ("RY", (a,), p + 4), ("RY", (b,), p + 5),
            ]
        p = layer.pool_param_base
        for c, t in layer.pool_pairs:
            gates += [("CRZ", (c, t), p), ("ACRX", (c, t), p + 1)]
    occ = [
        Occurrence(i, p, kind in ("CRZ", "ACRX"))
        for i, (kind, _, p) in enumerate(gates)
        if p is not None
    ]
    return gates, occ


def occurrences(spec: AnsatzSpec) -> list[Occurrence]:
    return _template(spec)[1]


def _check_theta(spec: AnsatzSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"theta must have length {spec.n_params}, got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return theta


def bind(spec: AnsatzSpec, theta, shifts: dict[int, float] | None = None) -> Circuit:
    """Concrete circuit; ``shifts`` maps a gate position to an angle offset."""
    theta = _check_theta(spec, theta)
    gates, _ = _template(spec)
    out = []
    for i, (kind, qubits, p) in enumerate(gates):
        if p is None:
            out.append(Gate(kind, qubits))
        else:
            angle = float(theta[p])
            if shifts and i in shifts:
                angle += shifts[i]
            out.append(Gate(kind, qubits, angle))
    return Circuit(spec.n_qubits, out)


# ---------------------------------------------------------------------------
# encodings

def encode_qubit(x) -> Circuit:
    x = np.asarray(x, dtype=float).ravel()
    if len(x) == 0:
        raise ValueError("empty feature vector")
    if np.any(~np.isfinite(x)) or np.any(x < -1e-12) or np.any(x > math.pi + 1e-12):
        raise ValueError("qubit encoding needs features in [0, pi]")
    return Circuit(len(x), [Gate("RY", (i,), float(v)) for i, v in enumerate(x)])


def qubit_state(x) -> StateVector:
    """Product state prod_i (cos(x_i/2)|0> + sin(x_i/2)|1>), built directly."""
    circ = encode_qubit(x)
    amps = np.ones(1, dtype=complex)
    for g in reversed(circ.gates):
        amps = np.kron(amps, [math.cos(g.angle / 2), math.sin(g.angle / 2)])
    return StateVector(circ.n_qubits, amps.astype(complex))


def encode_amplitude(x, n: int) -> StateVector:
    x = np.asarray(x, dtype=float).ravel()
    dim = 1 << n
    if len(x) > dim:
        raise ValueError(f"{len(x)} features do not fit in {n} qubits")
    norm = np.linalg.norm(x)
    if not norm > 0:
        raise ValueError("amplitude encoding needs a nonzero vector")
    amps = np.zeros(dim, dtype=complex)
    amps[: len(x)] = x / norm
    return StateVector(n, amps)


def encode(x, n: int, encoding: str) -> StateVector:
    if encoding == "qubit":
        if len(np.ravel(x)) != n:
            raise ValueError(f"qubit encoding needs {n} features")
        return qubit_state(x)
    if encoding == "amplitude":
        return encode_amplitude(x, n)
    raise ValueError(f"unknown encoding {encoding!r}")


def encode_rows(X, n: int, encoding: str) -> np.ndarray:
    return np.stack([encode(x, n, encoding).amps for x in np.asarray(X, dtype=float)])


# ---------------------------------------------------------------------------
# forward evaluation

def _rows(state) -> np.ndarray:
    if isinstance(state, StateVector):
        return state.amps[None, :].copy()
    return np.array(state, dtype=complex, ndmin=2)


def circuit_probs(circuit: Circuit, states, readout: int) -> np.ndarray:
    """Exact probability of reading 1 on ``readout`` for each input row."""
    psi = _rows(states)
    sc.run_gates_inplace(psi, circuit.gates, circuit.n_qubits)
    return sc.probs_one(psi, readout, circuit.n_qubits)


def forward(state_in, spec: AnsatzSpec, theta, mode: str = "exact", shots: int = 1024, rng=None):
    """f = (1 - <Z_readout>) / 2, exact or estimated from ``shots`` samples.

    ``state_in`` is a StateVector or a (B, 2^n) array; arrays give arrays.
    """
    return forward_circuit(bind(spec, theta), state_in, spec.readout_qubit, mode, shots, rng)


def cross_entropy(f, y):
    f = np.clip(np.asarray(f, dtype=float), CLIP_DELTA, 1 - CLIP_DELTA)
    y = np.asarray(y, dtype=float)
    out = -(y * np.log(f) + (1 - y) * np.log1p(-f))
    return float(out) if out.ndim == 0 else out


def loss_factor(f, y):
    """dl/df of the clipped cross-entropy: (f - y) / (f (1 - f))."""
    f = np.clip(np.asarray(f, dtype=float), CLIP_DELTA, 1 - CLIP_DELTA)
    return (f - np.asarray(y, dtype=float)) / (f * (1 - f))


def predict(f):
    """1 iff f > 0.5; the tie goes to 0."""
    return (np.asarray(f) > 0.5).astype(np.int64) if np.ndim(f) else int(f > 0.5)


# ---------------------------------------------------------------------------
# gradients

@dataclass(frozen=True)
class ShiftTerm:
    """f(theta with gate ``index`` shifted by ``shift``) weighted by ``coeff`` into d/dtheta_param."""

    param: int
    index: int
    shift: float
    coeff: float


def shift_schedule(spec: AnsatzSpec) -> list[ShiftTerm]:
    terms = []
    for o in occurrences(spec):
        rule = _SHIFTS_CONTROLLED if o.controlled else _SHIFTS_SIMPLE
        terms.extend(ShiftTerm(o.param, o.index, s, c) for c, s in rule)
    return terms


def assemble_gradient(spec: AnsatzSpec, schedule: list[ShiftTerm], values) -> np.ndarray:
    """Sum shifted evaluations into a gradient, in fixed schedule order."""
    values = np.asarray(values, dtype=float)
    grad = np.zeros((spec.n_params,) + values.shape[1:])
    for term, v in zip(schedule, values):
        grad[term.param] += term.coeff * v
    return grad


def grad_parameter_shift(state_in, spec: AnsatzSpec, theta, mode: str = "exact", shots: int = 1024, rng=None):
    """df/dtheta by shifting one gate occurrence at a time."""
    theta = _check_theta(spec, theta)
    schedule = shift_schedule(spec)
    values = [
        forward_circuit(bind(spec, theta, {t.index: t.shift}), state_in, spec.readout_qubit, mode, shots, rng)
        for t in schedule
    ]
    return assemble_gradient(spec, schedule, values)


def forward_circuit(circuit: Circuit, state_in, readout: int, mode: str = "exact", shots: int = 1024, rng=None):
    p = circuit_probs(circuit, state_in, readout)
    if mode == "shots":
        if rng is None:
            raise ValueError("shots mode needs a generator")
        p = rng.binomial(shots, np.clip(p, 0.0, 1.0)) / shots
    elif mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    p = np.clip(p, 0.0, 1.0)
    return float(p[0]) if isinstance(state_in, StateVector) else p


_Y = np.array([[0, -1j], [1j, 0]])


def _generator(psi: np.ndarray, gate: Gate, n: int) -> np.ndarray:
    """G psi for a rotation exp(-i theta G / 2)."""
    out = psi.copy()
    kind, qs = gate.kind, gate.qubits
    if kind == "RY":
        sc.apply_matrix_1q(out, _Y, qs[0], n)
    elif kind == "CRZ":
        v, ac, at = sc._split2(out, qs[0], qs[1], n)
        sc._slice2(v, ac, at, 0, 0)[...] = 0
        sc._slice2(v, ac, at, 0, 1)[...] = 0
        sc._slice2(v, ac, at, 1, 1)[...] *= -1
    elif kind == "ACRX":
        v, ac, at = sc._split2(out, qs[0], qs[1], n)
        sc._slice2(v, ac, at, 1, 0)[...] = 0
        sc._slice2(v, ac, at, 1, 1)[...] = 0
        s0 = sc._slice2(v, ac, at, 0, 0)
        s1 = sc._slice2(v, ac, at, 0, 1)
        tmp = s0.copy()
        s0[...] = s1
        s1[...] = tmp
    else:
        raise ValueError(f"no generator for {kind}")
    return out


def grad_adjoint(states, spec: AnsatzSpec, theta) -> tuple[np.ndarray, np.ndarray]:
    """Exact (f, df/dtheta) for a batch of input rows by reverse-mode sweep.

    Returns f with shape (B,) and the gradient with shape (n_params, B).
    Agrees with the exact parameter-shift gradient to rounding error.
    """
    theta = _check_theta(spec, theta)
    circ = bind(spec, theta)
    n, r = spec.n_qubits, spec.readout_qubit
    psi = _rows(states)
    sc.run_gates_inplace(psi, circ.gates, n)
    f = sc.probs_one(psi, r, n)
    lam = psi.copy()
    sc._split1(lam, r, n)[:, :, 0, :] = 0  # projector onto |1> at the readout
    grad = np.zeros((spec.n_params, psi.shape[0]))
    params = {o.index: o.param for o in occurrences(spec)}
    for i in range(len(circ.gates) - 1, -1, -1):
        g = circ.gates[i]
        inv = g.dagger()
        sc.apply_gate_inplace(psi, inv, n)
        if i in params:
            mu = _generator(psi, g, n)
            sc.apply_gate_inplace(mu, g, n)
            # df = 2 Re <lam| dU psi>, dU = -i/2 G U
            grad[params[i]] += np.real(np.einsum("bi,bi->b", lam.conj(), -1j * mu))
        sc.apply_gate_inplace(lam, inv, n)
    return f, grad


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def zeros(cls, size: int, alpha: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        return cls(np.zeros(size), np.zeros(size), 0, alpha, beta1, beta2, eps_adam)


def adam_step(state: AdamState, grad, theta) -> tuple[AdamState, np.ndarray]:
    grad = np.asarray(grad, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if grad.shape != state.m.shape or theta.shape != state.m.shape:
        raise ValueError("gradient, theta and moments must share a shape")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_theta = theta - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    return AdamState(m, v, t, state.alpha, state.beta1, state.beta2, state.eps_adam), new_theta


# ---------------------------------------------------------------------------
# model files and plain training

@dataclass
class QcnnModel:
    n_qubits: int
    encoding: str
    theta: np.ndarray
    readout: int = -1

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.encoding not in ("qubit", "amplitude"):
            raise ValueError(f"unknown encoding {self.encoding!r}")
        spec = build_ansatz(self.n_qubits)
        _check_theta(spec, self.theta)
        if self.readout == -1:
            self.readout = spec.readout_qubit
        if self.readout != spec.readout_qubit:
            raise ValueError(f"readout must be {spec.readout_qubit} for n={self.n_qubits}")

    @property
    def spec(self) -> AnsatzSpec:
        return build_ansatz(self.n_qubits)

    def circuit(self) -> Circuit:
        return bind(self.spec, self.theta)

    def encode(self, x) -> StateVector:
        return encode(x, self.n_qubits, self.encoding)

    def probs(self, X) -> np.ndarray:
        return circuit_probs(self.circuit(), encode_rows(X, self.n_qubits, self.encoding), self.readout)

    def to_dict(self) -> dict:
        return {
            "n_qubits": self.n_qubits,
            "encoding": self.encoding,
            "theta": [float(t) for t in self.theta],
            "readout": self.readout,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "QcnnModel":
        missing = {"n_qubits", "encoding", "theta"} - set(d)
        if missing:
            raise ValueError(f"model is missing {sorted(missing)}")
        return cls(int(d["n_qubits"]), d["encoding"], np.array(d["theta"], dtype=float), int(d.get("readout", -1)))

    @classmethod
    def from_json(cls, text: str) -> "QcnnModel":
        return cls.from_dict(json.loads(text))


def init_theta(spec: AnsatzSpec, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, 2 * math.pi, spec.n_params)


@dataclass
class PlainFit:
    theta: np.ndarray
    losses: list[float] = field(default_factory=list)


def train_plain(
    spec: AnsatzSpec,
    states: np.ndarray,
    labels,
    rng: np.random.Generator,
    iterations: int = 200,
    batch: int = 32,
    alpha: float = 0.05,
    theta0=None,
) -> PlainFit:
    """Minibatch Adam on the exact cross-entropy, without encryption."""
    labels = np.asarray(labels, dtype=float)
    theta = init_theta(spec, rng) if theta0 is None else _check_theta(spec, theta0).copy()
    adam = AdamState.zeros(spec.n_params, alpha)
    fit = PlainFit(theta)
    for _ in range(iterations):
        idx = rng.choice(len(labels), size=min(batch, len(labels)), replace=False)
        f, df = grad_adjoint(states[idx], spec, theta)
        y = labels[idx]
        fit.losses.append(float(np.mean(cross_entropy(f, y))))
        grad = df @ loss_factor(f, y) / len(idx)
        adam, theta = adam_step(adam, grad, theta)
    fit.theta = theta
    return fit


def accuracy(probs, labels) -> float:
    return float(np.mean(predict(np.asarray(probs)) == np.asarray(labels)))
