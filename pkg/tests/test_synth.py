import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qheqnn import privinf, qcnn, qhe, synth
from qheqnn import simcore as sc
from qheqnn.simcore import Circuit, Gate
from qheqnn.synth import SynthConfig, SynthesisError

from conftest import aligned_diff, controlled, oracle_unitary, phase_dist, rx, rz


def word_unitary(gates):
    return oracle_unitary(Circuit(1, [Gate(k, (0,)) for k in gates]))


def test_config_validation():
    for bad in (0.0, -1e-3, 0.6):
        with pytest.raises(ValueError):
            SynthConfig(epsilon=bad)
    with pytest.raises(ValueError):
        SynthConfig(max_search_depth=41)
    with pytest.raises(ValueError):
        SynthConfig(backend="ross")


def test_dyadic_examples():
    t = synth.synthesize_rz(math.pi / 4)
    assert t.gates == ("T",) and t.distance < 1e-15
    z = synth.synthesize_rz(math.pi)
    assert z.gates == ("Z",) and z.distance < 1e-15


def test_dyadic_exact_for_all_k():
    for k in range(8):
        for shift in (0.0, 2 * math.pi, -2 * math.pi):
            theta = k * math.pi / 4 + shift
            w = synth.synthesize_rz(theta, SynthConfig(backend="exact_dyadic"))
            assert aligned_diff(word_unitary(w.gates), rz(theta)) < 1e-12
            assert w.distance < 1e-12


def test_exact_dyadic_backend_rejects_other_angles():
    with pytest.raises(SynthesisError):
        synth.synthesize_rz(0.3, SynthConfig(backend="exact_dyadic"))


def test_word_at_0_7():
    w = synth.synthesize_rz(0.7, SynthConfig(epsilon=1e-2))
    assert w.distance <= 1e-2
    # verify independently by multiplying out the word
    assert phase_dist(word_unitary(w.gates), rz(0.7)) <= 1e-2 + 1e-12
    assert set(w.gates) <= {"X", "Z", "H", "S", "T"}
    assert w.t_count == w.gates.count("T")


def test_random_angles_at_1e_2(rng):
    for theta in rng.uniform(-2 * math.pi, 2 * math.pi, 15):
        w = synth.synthesize_rz(float(theta), SynthConfig(epsilon=1e-2))
        assert phase_dist(word_unitary(w.gates), rz(theta)) <= 1e-2 + 1e-12


def test_1e_3_either_verifies_or_raises(rng):
    for theta in rng.uniform(0, 2 * math.pi, 4):
        try:
            w = synth.synthesize_rz(float(theta), SynthConfig(epsilon=1e-3))
        except SynthesisError as exc:
            assert exc.best_distance is None or exc.best_distance > 0
        else:
            assert phase_dist(word_unitary(w.gates), rz(theta)) <= 1e-3 + 1e-12


def test_exhaustion_reports_best_distance():
    with pytest.raises(SynthesisError, match="T-count") as info:
        synth.synthesize_rz(0.123456, SynthConfig(epsilon=1e-4, max_search_depth=4))
    assert info.value.best_distance > 1e-4


def test_halving_epsilon_never_shortens_the_word():
    for theta in (0.1, 0.7, 1.9, 2.5, -0.4):
        prev_t, prev_len = -1, -1
        for eps in (0.08, 0.04, 0.02, 0.01):
            w = synth.synthesize_rz(theta, SynthConfig(epsilon=eps))
            assert w.t_count >= prev_t
            assert len(w) >= prev_len
            prev_t, prev_len = w.t_count, len(w)


def test_synthesis_is_deterministic():
    a = synth.synthesize_rz(1.234, SynthConfig(epsilon=5e-3))
    synth.clear_cache()
    b = synth.synthesize_rz(1.234, SynthConfig(epsilon=5e-3))
    assert a == b


def test_non_finite_theta():
    with pytest.raises(ValueError):
        synth.synthesize_rz(float("inf"))


def test_rewrite_examples(rng):
    th = 0.37
    rx_c = synth.rewrite_rotations(Circuit(1, [Gate("RX", (0,), th)]))
    assert [(g.kind, g.angle) for g in rx_c.gates] == [("H", None), ("RZ", th), ("H", None)]
    ry_c = synth.rewrite_rotations(Circuit(1, [Gate("RY", (0,), th)]))
    # the operator product S H RZ H S Z, listed in the order the gates act
    assert [g.kind for g in ry_c.gates] == ["Z", "S", "H", "RZ", "H", "S"]
    for _ in range(10):
        c = Circuit(3, [
            Gate("RX", (0,), rng.normal()), Gate("RY", (1,), rng.normal()), Gate("CRZ", (0, 2), rng.normal()),
            Gate("ACRX", (2, 1), rng.normal()), Gate("Sdg", (1,)), Gate("Tdg", (0,)), Gate("SWAP", (1, 2)),
        ])
        out = synth.rewrite_rotations(c)
        assert {g.kind for g in out.gates} <= {"RZ", "X", "Z", "H", "S", "T", "CNOT"}
        s = sc.random_state(3, rng)
        assert sc.apply_circuit(s, c).fidelity(sc.apply_circuit(s, out)) >= 1 - 1e-10


def test_decompose_controlled(rng):
    gates = synth.decompose_controlled(0, 1, 0.0, 0.0)
    assert aligned_diff(oracle_unitary(Circuit(2, gates)), np.eye(4)) < 1e-12
    for _ in range(10):
        t1, t2 = rng.uniform(-math.pi, math.pi, 2)
        for c, t in ((0, 1), (1, 0)):
            gates = synth.decompose_controlled(c, t, t1, t2)
            assert sum(g.kind == "RZ" for g in gates) == 4
            want = controlled(rx(t2), c, t, 2, on=0) @ controlled(rz(t1), c, t, 2)
            assert aligned_diff(oracle_unitary(Circuit(2, gates)), want) <= 1e-10
    with pytest.raises(ValueError):
        synth.decompose_controlled(1, 1, 0.1, 0.2)


def test_predicted_rz_count():
    assert synth.predicted_rz_count(2, 6, 4) == 10
    assert synth.predicted_rz_count(8, 6, 4) == 106
    assert synth.predicted_rz_count(4, 15, 15) == 120
    with pytest.raises(ValueError):
        synth.predicted_rz_count(6, 6, 4)


def test_transpile_clifford_only_unchanged(rng):
    c = qhe.random_clifford_t(3, 0, rng, 15)
    out, report = synth.transpile(c, 0.1)
    assert out == c and report.t_count == 0 and report.r_z_count == 0


def test_transpile_ansatz_counts(rng):
    for n, expected in ((2, 10), (4, 42), (8, 106)):
        spec = qcnn.build_ansatz(n)
        circuit = qcnn.bind(spec, qcnn.init_theta(spec, rng))
        rewritten = synth.rewrite_rotations(circuit)
        assert rewritten.count("RZ") == expected == synth.predicted_rz_count(n, 6, 4)
    spec = qcnn.build_ansatz(2)
    out, report = synth.transpile(qcnn.bind(spec, qcnn.init_theta(spec, rng)), None, SynthConfig(epsilon=1e-2))
    assert out.clifford_t_only
    assert report.r_z_count == 10
    assert report.t_count == sum(report.per_rotation_t) + report.native_t_count == out.count("T")


def test_transpile_budget_split_and_distance(rng):
    for _ in range(3):
        c = Circuit(3, [Gate("RY", (0,), rng.normal()), Gate("CNOT", (0, 1)), Gate("RX", (2,), rng.normal()),
                        Gate("CRZ", (1, 2), rng.normal()), Gate("RZ", (1,), math.pi / 2)])
        out, report = synth.transpile(c, 0.05)
        # RY, RX, two halves of CRZ, and one exact RZ(pi/2)
        assert report.r_z_count == 5 and report.approximate_count == 4
        assert report.per_gate_epsilon == pytest.approx(0.05 / 4)
        assert max(report.per_rotation_distance) <= report.per_gate_epsilon
        d = phase_dist(oracle_unitary(out), oracle_unitary(c))
        assert d <= 0.05 + 1e-12
        assert d <= sum(report.per_rotation_distance) + 1e-9


def test_strip_paulis_examples(rng):
    c = Circuit(1, [Gate("X", (0,)), Gate("H", (0,)), Gate("Z", (0,)), Gate("T", (0,))])
    assert [g.kind for g in synth.strip_paulis(c).gates] == ["H", "T"]
    free = Circuit(2, [Gate("H", (0,)), Gate("CNOT", (0, 1)), Gate("S", (1,))])
    assert synth.strip_paulis(free) == free
    for _ in range(20):
        c = qhe.random_clifford_t(3, 5, rng)
        assert privinf.reconstruct_client_view(qhe.emit_program(c)) == synth.strip_paulis(c)


@settings(max_examples=20, deadline=None)
@given(st.floats(-10, 10, allow_nan=False))
def test_synthesis_soundness_property(theta):
    w = synth.synthesize_rz(theta, SynthConfig(epsilon=2e-2))
    assert synth.word_distance(w.gates, theta) <= 2e-2
    assert phase_dist(word_unitary(w.gates), rz(theta)) <= 2e-2 + 1e-12
