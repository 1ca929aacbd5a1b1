"""Reverse delegated training over QHE.

The network owner (server) holds theta.  Each data provider (client) holds
its own samples.  For every scheduled evaluation the client encodes and
encrypts one sample, the server evaluates the transpiled circuit on the
ciphertext and measures the readout, and the client decrypts the bits.
Clients return only their partial loss, partial gradient and sample count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import qcnn, qhe, synth
from .data import Dataset
from .qcnn import AnsatzSpec

CLIENT_TO_SERVER = "client->server"
SERVER_TO_CLIENT = "server->client"
_ALLOWED_UPLINK = {"partial_loss", "partial_gradient", "sample_size", "encrypted_loss"}


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class ClientDataset:
    id: str
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or len(f) == 0:
            raise ValueError(f"client {self.id!r} has no samples")
        if len(f) != len(y):
            raise ValueError(f"client {self.id!r}: features and labels differ in length")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_dataset(cls, cid: str, ds: Dataset) -> "ClientDataset":
        return cls(cid, ds.features, ds.labels)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 300
    batch_per_client: int = 1
    shots: int = 1024
    alpha: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epsilon_budget: float = 0.1
    seed: int = 0
    encoding: str = "qubit"
    mode: str = "qhe"  # "qhe" or "exact" (bypasses encryption and sampling)
    shots_per_key: int = 1  # 1 means a fresh key for every shot
    max_search_depth: int = synth.SynthConfig().max_search_depth

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("batch_per_client", "shots", "shots_per_key"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.epsilon_budget <= 1:
            raise ValueError("epsilon_budget must be in (0, 1]")
        if self.mode not in ("qhe", "exact"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.encoding not in ("qubit", "amplitude"):
            raise ValueError(f"unknown encoding {self.encoding!r}")

    @classmethod
    def from_mapping(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class RoundMessage:
    direction: str
    kind: str
    sender: str
    payload: dict

    def to_dict(self) -> dict:
        return {"direction": self.direction, "kind": self.kind, "sender": self.sender, "payload": self.payload}


@dataclass
class IterationRecord:
    iteration: int
    loss_decrypted: float
    loss_encrypted: float
    grad_norm: float
    theta: np.ndarray
    contributions: dict = field(default_factory=dict)


@dataclass
class TrainingLog:
    records: list[IterationRecord] = field(default_factory=list)
    messages: list[RoundMessage] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def decrypted_losses(self) -> np.ndarray:
        return np.array([r.loss_decrypted for r in self.records])

    @property
    def encrypted_losses(self) -> np.ndarray:
        return np.array([r.loss_encrypted for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = len(self.records[0].theta) if self.records else 0
        w.writerow(["iteration", "loss_decrypted", "loss_encrypted", "grad_norm"] + [f"theta_{i}" for i in range(k)])
        for r in self.records:
            w.writerow([r.iteration, repr(r.loss_decrypted), repr(r.loss_encrypted), repr(r.grad_norm)]
                       + [repr(float(t)) for t in r.theta])
        return buf.getvalue()

    def trace_json(self) -> str:
        return json.dumps([m.to_dict() for m in self.messages], indent=1)


# ---------------------------------------------------------------------------
# aggregation

def aggregate(partials) -> tuple[float, np.ndarray]:
    """(sum L_k / sum |X_k|, sum grad_k / sum |X_k|), summed in client-id order.

    ``partials`` is a sequence of (L_k, grad_k, size_k) or (id, L_k, grad_k, size_k).
    """
    rows = [p if len(p) == 4 else ("", *p) for p in partials]
    if not rows:
        raise ValueError("nothing to aggregate")
    rows.sort(key=lambda r: r[0])
    dims = {np.shape(r[2]) for r in rows}
    if len(dims) != 1:
        raise ValueError(f"inconsistent gradient shapes {sorted(dims)}")
    total = sum(int(r[3]) for r in rows)
    if total <= 0:
        raise ValueError("total sample size must be positive")
    loss = 0.0
    grad = np.zeros(dims.pop())
    for _, l_k, g_k, _ in rows:
        loss += float(l_k)
        grad = grad + np.asarray(g_k, dtype=float)
    return loss / total, grad / total


# ---------------------------------------------------------------------------
# server side

class Server:
    """Owns theta, hands out transpiled circuits and runs evaluations."""

    def __init__(self, spec: AnsatzSpec, config: TrainConfig):
        self.spec = spec
        self.config = config
        self.schedule = [None] + qcnn.shift_schedule(spec)  # None = base evaluation
        self._theta: np.ndarray | None = None
        self._cache: dict[int, object] = {}
        self._compiled: dict[int, qhe.CompiledCircuit] = {}
        self.synth_config = synth.SynthConfig(max_search_depth=config.max_search_depth)

    def set_theta(self, theta) -> None:
        self._theta = np.asarray(theta, dtype=float).copy()
        self._cache.clear()
        self._compiled.clear()

    def circuit(self, k: int):
        """Bound circuit for schedule entry k (transpiled in qhe mode)."""
        if k not in self._cache:
            term = self.schedule[k]
            shifts = None if term is None else {term.index: term.shift}
            circ = qcnn.bind(self.spec, self._theta, shifts)
            if self.config.mode == "qhe":
                circ, _ = synth.transpile(circ, self.config.epsilon_budget, self.synth_config)
            self._cache[k] = circ
        return self._cache[k]

    def evaluate_encrypted(self, k: int, enc_rows: np.ndarray, tracker: qhe.ClientKeyTracker, shots_per_row, rng):
        """Homomorphic evaluation, then ``shots_per_row[j]`` readouts of row j.

        Returns (row index per shot, encrypted readout bit per shot).
        """
        circ = self.circuit(k)
        if circ.n_qubits <= qhe.FUSE_MAX_QUBITS:
            if k not in self._compiled:
                self._compiled[k] = qhe.compile_circuit(circ)
            circ = self._compiled[k]
        qhe.server_evaluate_rows(circ, enc_rows, tracker, rng, want_program=False)
        reps = np.repeat(np.arange(len(enc_rows)), shots_per_row)
        idx = qhe.sc.sample_rows(enc_rows[reps], rng)
        return reps, qhe.sc.index_bits(idx, [self.spec.readout_qubit])[:, 0]


# ---------------------------------------------------------------------------
# client side

def _encrypted_f(server: Server, k: int, state: np.ndarray, shots: int, shots_per_key: int, rng) -> tuple[float, float]:
    """Decrypted and raw fraction of 1-readouts over ``shots`` shots."""
    n = server.spec.n_qubits
    r = server.spec.readout_qubit
    n_keys = -(-shots // shots_per_key)
    dec = enc = 0
    chunk = max(1, qhe._rows_budget(n) // shots_per_key)
    done = 0
    for start in range(0, n_keys, chunk):
        rows = min(chunk, n_keys - start)
        x, z = qhe.keygen_rows(n, rows, rng)
        tracker = qhe.ClientKeyTracker(x, z)
        psi = np.repeat(state[None, :], rows, axis=0)
        qhe.qotp_rows(psi, tracker.x, tracker.z, n)
        # every key serves shots_per_key shots from the same encrypted output
        take = np.clip(shots - done - np.arange(rows) * shots_per_key, 0, shots_per_key)
        reps, bits = server.evaluate_encrypted(k, psi, tracker, take, rng)
        enc += int(bits.sum())
        dec += int((bits ^ tracker.x[reps, r]).sum())
        done += int(take.sum())
    return dec / shots, enc / shots


def evaluate_schedule(server: Server, state: np.ndarray, config: TrainConfig, rng, decrypt: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """f for every schedule entry; returns (f_used, f_encrypted)."""
    m = len(server.schedule)
    if config.mode == "exact":
        f = np.array([qcnn.circuit_probs(server.circuit(k), state, server.spec.readout_qubit)[0] for k in range(m)])
        f = np.clip(f, 0.0, 1.0)
        return f, f
    dec = np.empty(m)
    enc = np.empty(m)
    for k in range(m):
        dec[k], enc[k] = _encrypted_f(server, k, state, config.shots, config.shots_per_key, rng)
    return (dec if decrypt else enc), enc


def client_round(client: ClientDataset, batch_idx, server: Server, config: TrainConfig, rng, decrypt: bool = True):
    """(L_k, grad_k, encrypted L_k) summed over the client's batch.

    Per sample: l = CE(f, y) and dl/dtheta = (f - y) / (f (1 - f)) df/dtheta,
    with the same clipping as the loss.
    """
    spec = server.spec
    loss = 0.0
    enc_loss = 0.0
    grad = np.zeros(spec.n_params)
    for i in np.atleast_1d(batch_idx):
        x, y = client.features[i], int(client.labels[i])
        state = qcnn.encode(x, spec.n_qubits, config.encoding).amps
        f, f_enc = evaluate_schedule(server, state, config, rng, decrypt)
        dfdt = qcnn.assemble_gradient(spec, server.schedule[1:], f[1:])
        loss += qcnn.cross_entropy(f[0], y)
        enc_loss += qcnn.cross_entropy(f_enc[0], y)
        grad += qcnn.loss_factor(f[0], y) * dfdt
    return loss, grad, enc_loss


def _stream(seed: int, cid: str, tag: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(cid.encode()), tag))
    return np.random.Generator(np.random.PCG64(ss))


class _BatchDrawer:
    """Round-robin over a per-client shuffled order, reshuffled every pass."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size, self.rng = size, rng
        self.order = rng.permutation(size)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        for _ in range(k):
            if self.pos == self.size:
                self.order = self.rng.permutation(self.size)
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return np.array(out)


def initial_theta(spec: AnsatzSpec, seed: int) -> np.ndarray:
    return qcnn.init_theta(spec, np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,)))))


def run_reverse_training(spec: AnsatzSpec, clients, config: TrainConfig = TrainConfig(), theta0=None):
    """Train theta on the providers' encrypted samples; returns (theta, log)."""
    clients = sorted(clients, key=lambda c: c.id)
    if not clients:
        raise ValueError("need at least one client")
    if len({c.id for c in clients}) != len(clients):
        raise ValueError("client ids must be unique")
    dims = {c.features.shape[1] for c in clients}
    if len(dims) != 1:
        raise ValueError("clients disagree on feature dimension")
    theta = initial_theta(spec, config.seed) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    adam = qcnn.AdamState.zeros(spec.n_params, config.alpha, config.beta1, config.beta2, config.eps_adam)
    server = Server(spec, config)
    drawers = {c.id: _BatchDrawer(len(c), _stream(config.seed, c.id, 1 << 30)) for c in clients}
    log = TrainingLog()
    for it in range(config.iterations):
        server.set_theta(theta)
        log.messages.append(RoundMessage(SERVER_TO_CLIENT, "evaluation_request", "server", {
            "iteration": it,
            "evaluations": len(server.schedule),
            "shifts": [None if t is None else [t.index, t.shift] for t in server.schedule],
        }))
        partials, enc_partials, contrib = [], [], {}
        for c in clients:
            idx = drawers[c.id].take(config.batch_per_client)
            try:
                l_k, g_k, e_k = client_round(c, idx, server, config, _stream(config.seed, c.id, it))
            except Exception as exc:
                raise TrainingError(f"client {c.id!r} failed: {exc}", it) from exc
            size = len(idx)
            partials.append((c.id, l_k, g_k, size))
            enc_partials.append((c.id, e_k, np.zeros(1), size))
            contrib[c.id] = {"loss": float(l_k), "encrypted_loss": float(e_k), "size": size}
            log.messages.extend([
                RoundMessage(CLIENT_TO_SERVER, "partial_loss", c.id, {"value": float(l_k)}),
                RoundMessage(CLIENT_TO_SERVER, "partial_gradient", c.id, {"values": [float(v) for v in g_k]}),
                RoundMessage(CLIENT_TO_SERVER, "sample_size", c.id, {"value": size}),
                RoundMessage(CLIENT_TO_SERVER, "encrypted_loss", c.id, {"value": float(e_k)}),
            ])
        loss, grad = aggregate(partials)
        enc_loss, _ = aggregate(enc_partials)
        log.records.append(IterationRecord(it, loss, enc_loss, float(np.linalg.norm(grad)), theta.copy(), contrib))
        adam, theta = qcnn.adam_step(adam, grad, theta)
    return theta, log


def check_privacy_boundary(messages, n_params: int) -> None:
    """Raise if any uplink message could carry features, labels, states or keys.

    Uplink messages may only be scalar losses, sizes, or a gradient of
    exactly ``n_params`` numbers.
    """
    for pos, m in enumerate(messages):
        if m.direction != CLIENT_TO_SERVER:
            continue
        if m.kind not in _ALLOWED_UPLINK:
            raise ValueError(f"message {pos}: kind {m.kind!r} not allowed from a client")
        if m.kind == "partial_gradient":
            vals = m.payload.get("values")
            if set(m.payload) != {"values"} or not isinstance(vals, list) or len(vals) != n_params:
                raise ValueError(f"message {pos}: gradient payload must hold {n_params} numbers")
            if not all(isinstance(v, float) and math.isfinite(v) for v in vals):
                raise ValueError(f"message {pos}: gradient entries must be finite floats")
        else:
            if set(m.payload) != {"value"} or not isinstance(m.payload["value"], (int, float)):
                raise ValueError(f"message {pos}: {m.kind} must carry one scalar")


def evaluate_accuracy(spec: AnsatzSpec, theta, features, labels, encoding: str = "qubit") -> float:
    states = qcnn.encode_rows(features, spec.n_qubits, encoding)
    return qcnn.accuracy(qcnn.circuit_probs(qcnn.bind(spec, theta), states, spec.readout_qubit), labels)
