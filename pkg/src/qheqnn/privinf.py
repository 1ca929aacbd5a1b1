"""Private inference on a server-held QCNN and the Pauli-stripping audit.

In private inference the client encodes and encrypts its sample, and the
server runs its own transpiled model on the ciphertext.  Only the client can
decrypt the readout.

The audit asks what a client learns about the model from the key-update
program.  The program lists every H, S, CNOT and T with its wire but hides
the X and Z gates.  Rebuilding the circuit without them gives a network that
should classify close to chance.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import qcnn, qhe, synth
from .data import Dataset, normalize_minmax, pad_amplitudes, pca_fit, pca_transform
from .qcnn import QcnnModel
from .simcore import Circuit, Gate


@dataclass
class InferenceResult:
    encrypted_prob: float
    decrypted_prob: float
    predicted_label: int
    true_label: int | None = None
    exact_prob: float | None = None

    def to_dict(self) -> dict:
        return {
            "encrypted_prob": self.encrypted_prob,
            "decrypted_prob": self.decrypted_prob,
            "predicted_label": self.predicted_label,
            "true_label": self.true_label,
            "exact_prob": self.exact_prob,
        }


def transpile_model(model: QcnnModel, budget: float = 0.1, config: synth.SynthConfig = synth.SynthConfig()):
    """Clifford+T circuit of the model and its report."""
    return synth.transpile(model.circuit(), budget, config)


def private_infer(features, model: QcnnModel, shots: int, rng, circuit: Circuit | None = None,
                  true_label: int | None = None, fresh_key_per_shot: bool = True,
                  budget: float = 0.1) -> InferenceResult:
    """Encrypted evaluation of ``model`` on one sample.

    ``circuit`` is the server's Clifford+T circuit; it is transpiled from the
    model with ``budget`` when omitted.
    """
    if circuit is None:
        circuit, _ = transpile_model(model, budget)
    if not circuit.clifford_t_only:
        raise qhe.ProtocolError("the server circuit must be Clifford+T")
    state = model.encode(features)
    tr = qhe.run_protocol(circuit, state, [model.readout], shots, fresh_key_per_shot, rng)
    dec = tr.fraction_ones(decrypted=True)
    return InferenceResult(
        encrypted_prob=tr.fraction_ones(decrypted=False),
        decrypted_prob=dec,
        predicted_label=int(qcnn.predict(dec)),
        true_label=true_label,
        exact_prob=float(qcnn.circuit_probs(circuit, state, model.readout)[0]),
    )


def sample_state_image(features, n: int, shots: int, encrypted: bool, rng) -> np.ndarray:
    """Histogram over the 2^n basis outcomes of the amplitude-encoded sample.

    With ``encrypted`` every shot gets its own one-time-pad key, as a server
    would see it.
    """
    state = qcnn.encode_amplitude(features, n)
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if not encrypted:
        return rng.multinomial(shots, state.probabilities() / state.probabilities().sum())
    tr = qhe.run_protocol(Circuit(n, []), state, range(n), shots, True, rng)
    idx = (tr.encrypted_bits.astype(np.int64) << np.arange(n)).sum(axis=1)
    return np.bincount(idx, minlength=1 << n)


def reconstruct_client_view(program: qhe.KeyUpdateProgram) -> Circuit:
    """The circuit a client can rebuild from the key-update steps it received."""
    gates = []
    for pos, step in enumerate(program.steps):
        if step.op not in ("H", "S", "CNOT", "T"):
            raise ValueError(f"step {pos}: unknown op {step.op!r}")
        gates.append(Gate(step.op, step.qubits))
    return Circuit(program.n, gates)


# ---------------------------------------------------------------------------
# audit

@dataclass
class PrivacyRecord:
    index: int
    server_acc: float
    non_pauli_acc: float
    plain_acc: float = math.nan
    t_count: int = 0
    pauli_count: int = 0
    selected: bool = False
    error: str | None = None

    @property
    def distance(self) -> float:
        return abs(self.non_pauli_acc - 0.5)

    @property
    def drop(self) -> float:
        return self.server_acc - self.non_pauli_acc


@dataclass(frozen=True)
class AuditConfig:
    n_qubits: int = 8
    iterations: int = 200
    batch: int = 32
    alpha: float = 0.05
    budget: float = 0.1
    seed: int = 0
    retrain_select: bool = False
    max_search_depth: int = synth.SynthConfig().max_search_depth


def prepare_features(ds: Dataset, n: int, encoding: str, pca_source: Dataset | None = None) -> np.ndarray:
    """Model inputs for ``encoding``: zero-padded pixels, or PCA-n onto [0, pi].

    For qubit encoding the PCA and min-max are fitted on ``pca_source``
    (default: ``ds`` itself) and applied to ``ds``.
    """
    if encoding == "amplitude":
        return pad_amplitudes(ds.features, n)
    if encoding == "qubit":
        src = ds if pca_source is None else pca_source
        model = pca_fit(src.features, n)
        both = normalize_minmax(np.vstack([pca_transform(model, src.features), pca_transform(model, ds.features)]))
        return both[len(src.features):]
    raise ValueError(f"unknown encoding {encoding!r}")


def audit_instance(index: int, encoding: str, train_X, train_y, test_X, test_y, config: AuditConfig) -> PrivacyRecord:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(index,))))
    spec = qcnn.build_ansatz(config.n_qubits)
    states = qcnn.encode_rows(train_X, spec.n_qubits, encoding)
    fit = qcnn.train_plain(spec, states, train_y, rng, config.iterations, config.batch, config.alpha)
    model = QcnnModel(spec.n_qubits, encoding, fit.theta)
    test_states = qcnn.encode_rows(test_X, spec.n_qubits, encoding)
    plain_acc = qcnn.accuracy(qcnn.circuit_probs(model.circuit(), test_states, model.readout), test_y)
    ct, report = transpile_model(model, config.budget, synth.SynthConfig(max_search_depth=config.max_search_depth))
    server_acc = qcnn.accuracy(qcnn.circuit_probs(ct, test_states, model.readout), test_y)
    stripped = synth.strip_paulis(ct)
    non_pauli = qcnn.accuracy(qcnn.circuit_probs(stripped, test_states, model.readout), test_y)
    return PrivacyRecord(index, server_acc, non_pauli, plain_acc, report.t_count, ct.count("X", "Z"))


def privacy_audit(n_instances: int, encoding: str, train: Dataset, test: Dataset,
                  config: AuditConfig = AuditConfig(), progress=None) -> list[PrivacyRecord]:
    """Train ``n_instances`` fresh models and compare full vs Pauli-stripped accuracy."""
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    train_X = prepare_features(train, config.n_qubits, encoding)
    test_X = prepare_features(test, config.n_qubits, encoding, pca_source=train)
    records = []
    for i in range(n_instances):
        try:
            rec = audit_instance(i, encoding, train_X, train.labels, test_X, test.labels, config)
        except Exception as exc:  # recorded, the audit goes on
            rec = PrivacyRecord(i, math.nan, math.nan, error=f"{type(exc).__name__}: {exc}")
        records.append(rec)
        if progress is not None:
            progress(rec)
    if config.retrain_select:
        ok = [r for r in records if r.error is None]
        if ok:
            max(ok, key=lambda r: abs(r.drop)).selected = True
    return records


def audit_table_csv(records, with_selected: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["index", "server_acc", "non_pauli_acc", "abs_distance"]
    w.writerow(head + (["selected"] if with_selected else []))
    for r in records:
        row = [r.index, repr(r.server_acc), repr(r.non_pauli_acc), repr(r.distance)]
        w.writerow(row + ([int(r.selected)] if with_selected else []))
    return buf.getvalue()
