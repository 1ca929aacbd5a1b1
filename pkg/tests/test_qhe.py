import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qheqnn import qhe
from qheqnn import simcore as sc
from qheqnn.qhe import BellOutcomes, KeyUpdateProgram, KeyUpdateStep, PauliKey
from qheqnn.simcore import Circuit, Gate

from conftest import S, T, X, Z, embed, oracle_gate, phase_dist


def pauli(key: PauliKey) -> np.ndarray:
    """X^x Z^z on every qubit, Z applied first."""
    ops = {q: np.linalg.matrix_power(X, int(key.x[q])) @ np.linalg.matrix_power(Z, int(key.z[q])) for q in range(key.n)}
    return embed(ops, key.n)


def key(x, z):
    return PauliKey.from_strings(x, z)


# --- keys -------------------------------------------------------------------

def test_keygen():
    a = qhe.keygen(2, np.random.default_rng(3))
    b = qhe.keygen(2, np.random.default_rng(3))
    assert a == b and a.n == 2
    x, z = qhe.keygen_rows(8, 100_000 // 8, np.random.default_rng(4))
    freq = np.concatenate([x, z]).mean(axis=0)
    assert np.all(np.abs(freq - 0.5) <= 0.01)
    with pytest.raises(ValueError):
        qhe.keygen(0, np.random.default_rng(0))


def test_qotp_examples(rng):
    out = qhe.qotp_apply(sc.new_state(1), key("1", "0"))
    assert np.allclose(out.amps, [0, 1])
    psi = sc.random_state(3, rng)
    assert np.array_equal(qhe.qotp_apply(psi, key("000", "000")).amps, psi.amps)
    for _ in range(10):
        k = qhe.keygen(3, rng)
        twice = qhe.qotp_apply(qhe.qotp_apply(psi, k), k)
        assert twice.fidelity(psi) == pytest.approx(1, abs=1e-12)
        assert np.allclose(qhe.qotp_apply(psi, k).amps, pauli(k) @ psi.amps)
    with pytest.raises(ValueError):
        qhe.qotp_apply(psi, key("1", "1"))


def test_qotp_totally_mixes(rng):
    for n in (1, 2):
        psi = sc.random_state(n, rng)
        rho = np.zeros((1 << n, 1 << n), dtype=complex)
        for bits in itertools.product((0, 1), repeat=2 * n):
            v = qhe.qotp_apply(psi, PauliKey(bits[:n], bits[n:])).amps
            rho += np.outer(v, v.conj())
        rho /= 4**n
        assert np.max(np.abs(rho - np.eye(1 << n) / (1 << n))) <= 1e-12


def test_key_update_table_examples():
    h = qhe.key_update_clifford(key("1", "0"), KeyUpdateStep("H", (0,)))
    assert (h.x[0], h.z[0]) == (0, 1)
    s = qhe.key_update_clifford(key("1", "1"), KeyUpdateStep("S", (0,)))
    assert (s.x[0], s.z[0]) == (1, 0)
    # control i=0 with (1,0), target j=1 with (0,1)
    c = qhe.key_update_clifford(key("10", "01"), KeyUpdateStep("CNOT", (0, 1)))
    assert c == key("11", "11")
    with pytest.raises(ValueError):
        qhe.key_update_clifford(key("1", "0"), KeyUpdateStep("T", (0,), 1))


def test_key_update_t_examples():
    k = qhe.key_update_t(key("1", "0"), 0, 1, 0)
    assert (k.x[0], k.z[0]) == (0, 1)
    k = qhe.key_update_t(key("0", "0"), 0, 0, 0)
    assert (k.x[0], k.z[0]) == (0, 0)
    k = qhe.key_update_t(key("1", "1"), 0, 0, 1)
    assert (k.x[0], k.z[0]) == (1, 1)
    with pytest.raises(IndexError):
        qhe.key_update_t(key("1", "1"), 1, 0, 0)


def test_table_commutation_rules(rng):
    """G P(k) = P(f(k)) G up to phase, for every key on the touched qubits."""
    cases = [("H", (0,)), ("S", (0,)), ("CNOT", (0, 1)), ("CNOT", (1, 0))]
    for kind, qubits in cases:
        g = oracle_gate(kind, qubits, 2)
        for bits in itertools.product((0, 1), repeat=4):
            k = PauliKey(bits[:2], bits[2:])
            new = qhe.key_update_clifford(k, KeyUpdateStep(kind, qubits))
            for _ in range(3):
                psi = sc.random_state(2, rng).amps
                lhs = g @ pauli(k) @ psi
                rhs = pauli(new) @ g @ psi
                assert abs(abs(np.vdot(lhs, rhs)) - 1) <= 1e-10, (kind, bits)


def test_t_rule_leaves_an_s_correction(rng):
    """T X^a Z^b = X^a Z^(a xor b) S^a T up to phase."""
    for a, b in itertools.product((0, 1), repeat=2):
        lhs = T @ np.linalg.matrix_power(X, a) @ np.linalg.matrix_power(Z, b)
        rhs = np.linalg.matrix_power(X, a) @ np.linalg.matrix_power(Z, a ^ b) @ np.linalg.matrix_power(S, a) @ T
        assert phase_dist(lhs, rhs) < 1e-7


# --- T gadget -----------------------------------------------------------------

def _gadget_roundtrip(a, b, rng):
    plus = sc.StateVector(1, np.array([1, 1]) / math.sqrt(2))
    k = PauliKey([a], [b])
    enc = qhe.qotp_apply(plus, k)
    out, ra, rb = qhe.t_gadget(enc, 0, a, qhe.BellRegister(), rng)
    final = qhe.key_update_t(k, 0, ra, rb)
    dec = qhe.qotp_apply(out, final)
    return dec.fidelity(sc.StateVector(1, T @ plus.amps))


def test_t_gadget_decrypts_to_t_plus(rng):
    for a, b in itertools.product((0, 1), repeat=2):
        for _ in range(10):
            assert _gadget_roundtrip(a, b, rng) >= 1 - 1e-10


def test_t_gadget_outcomes_uniform():
    rng = np.random.default_rng(99)
    psi = sc.random_state(2, rng)
    reg = qhe.BellRegister()
    outs = np.array([qhe.t_gadget(psi, 1, 1, reg, rng)[1:] for _ in range(4000)])
    assert np.all(np.abs(outs.mean(axis=0) - 0.5) <= 0.03)


def test_t_gadget_requires_reset_ancilla(rng):
    reg = qhe.BellRegister(sc.basis_state(2, [1, 0]))
    with pytest.raises(qhe.ProtocolError):
        qhe.t_gadget(sc.new_state(1), 0, 0, reg, rng)


def test_gadget_branches_have_equal_weight(rng):
    for a in (0, 1):
        psi = np.stack([sc.random_state(3, rng).amps for _ in range(6)])
        sc.apply_gate_inplace(psi, Gate("T", (1,)), 3)
        branches = qhe.gadget_branches(psi, 1, 3, np.full(6, a))
        weights = np.sum(np.abs(branches) ** 2, axis=2)
        assert np.allclose(weights, 0.25, atol=1e-14)


def test_fast_gadget_matches_explicit_branch(rng):
    """The state the explicit gadget leaves equals the fast path's for the same outcome."""
    for _ in range(30):
        psi = sc.random_state(3, rng)
        a = int(rng.integers(2))
        out, ra, rb = qhe.t_gadget(psi, 2, a, qhe.BellRegister(), rng)
        rows = psi.amps[None, :].copy()
        tracker = qhe.ClientKeyTracker(np.array([[0, 0, a]]), np.zeros((1, 3)))
        got = qhe.t_gadget_rows(rows, 2, 3, tracker, rng, r=np.array([rb + 2 * ra]))
        assert (int(got[0][0]), int(got[1][0])) == (ra, rb)
        assert abs(np.vdot(out.amps, rows[0])) ** 2 == pytest.approx(1, abs=1e-12)


def test_gadget_swap_matches_three_cnots(rng):
    """The explicit gadget with SWAP equals the version built from three CNOTs."""
    n = 3
    for a in (0, 1):
        psi = sc.random_state(1, rng)
        full = sc.StateVector(n, np.kron(sc.new_state(2).amps, psi.amps))
        pre = [Gate("T", (0,)), Gate("H", (1,)), Gate("CNOT", (1, 2))]
        post = ([Gate("S", (1,))] if a else []) + [Gate("CNOT", (1, 2)), Gate("H", (1,))]
        swap = sc.apply_circuit(full, Circuit(n, pre + [Gate("SWAP", (0, 1))] + post))
        cnots = [Gate("CNOT", (0, 1)), Gate("CNOT", (1, 0)), Gate("CNOT", (0, 1))]
        ref = sc.apply_circuit(full, Circuit(n, pre + cnots + post))
        assert np.allclose(swap.amps, ref.amps, atol=1e-14)


# --- server evaluation ------------------------------------------------------------

def _evaluate(circuit, rng, fused=None, plain=None):
    n = circuit.n_qubits
    plain = sc.random_state(n, rng) if plain is None else plain
    k = qhe.keygen(n, rng)
    tracker = qhe.ClientKeyTracker(k.x, k.z)
    psi = qhe.qotp_apply(plain, k).amps[None, :].copy()
    program = qhe.server_evaluate_rows(circuit, psi, tracker, rng, fused=fused)
    bell = BellOutcomes(tracker.bell_array()[0])
    final = qhe.replay_key(program, k, bell)
    dec = qhe.qotp_apply(sc.StateVector(n, psi[0]), final)
    return dec.fidelity(sc.apply_circuit(plain, circuit)), program, bell, final, tracker


def test_server_evaluate_examples(rng):
    cliff = qhe.random_clifford_t(3, 0, rng, 20)
    _, program, bell, _, _ = _evaluate(cliff, rng)
    assert len(bell) == 0 and program.t_count == 0
    three = qhe.random_clifford_t(2, 3, rng)
    _, program, bell, _, _ = _evaluate(three, rng)
    assert program.t_count == 3 and len(bell) == 3
    for fused in (False, True):
        c = qhe.random_clifford_t(3, 8, rng)
        fid, *_ = _evaluate(c, rng, fused=fused)
        assert fid >= 1 - 1e-10


def test_server_evaluate_single_state_api(rng):
    c = qhe.random_clifford_t(3, 5, rng)
    check = qhe.self_check(c, sc.random_state(3, rng), rng)
    assert check.passed and len(check.bell) == 5
    with pytest.raises(qhe.ProtocolError):
        qhe.server_evaluate(Circuit(1, [Gate("RZ", (0,), 0.2)]), sc.new_state(1),
                            qhe.ClientKeyTracker([0], [0]), rng)


def test_homomorphic_correctness_random(rng):
    for trial in range(60):
        n = int(rng.integers(1, 5))
        c = qhe.random_clifford_t(n, int(rng.integers(0, 13)), rng)
        fid, *_ = _evaluate(c, rng, fused=bool(trial % 2))
        assert fid >= 1 - 1e-10


def _encrypted_run(c, plain, seed, fused):
    r = np.random.default_rng(seed)
    tracker = qhe.ClientKeyTracker(*qhe.keygen_rows(c.n_qubits, len(plain), r))
    psi = plain.astype(complex)
    qhe.qotp_rows(psi, tracker.x, tracker.z, c.n_qubits)
    program = qhe.server_evaluate_rows(c, psi, tracker, r, fused=fused)
    return psi, program, tracker


def test_fused_and_stepwise_agree_exactly():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        c = qhe.random_clifford_t(3, 6, rng)
        plain = np.stack([sc.random_state(3, rng).amps for _ in range(4)])
        p0, g0, t0 = _encrypted_run(c, plain, 1000 + seed, fused=False)
        p1, g1, t1 = _encrypted_run(c, plain, 1000 + seed, fused=True)
        assert g0 == g1
        assert np.array_equal(t0.x, t1.x) and np.array_equal(t0.z, t1.z)
        assert np.array_equal(t0.bell_array(), t1.bell_array())
        assert np.allclose(p0, p1, atol=1e-13)


def test_server_reads_keys_only_through_the_oracle(rng):
    class Counting(qhe.ClientKeyTracker):
        calls = 0

        def x_bit(self, i):
            Counting.calls += 1
            return super().x_bit(i)

    c = qhe.random_clifford_t(3, 7, rng)
    k = qhe.keygen(3, rng)
    tr = Counting(k.x, k.z)
    psi = qhe.qotp_apply(sc.new_state(3), k).amps[None, :].copy()
    qhe.server_evaluate_rows(c, psi, tr, rng, fused=False)
    assert Counting.calls == 7


def test_pauli_transparency(rng):
    c = qhe.random_clifford_t(3, 4, rng, 10)
    gates = list(c.gates)
    for _ in range(6):
        pos = int(rng.integers(len(gates) + 1))
        gates.insert(pos, Gate(["X", "Z"][int(rng.integers(2))], (int(rng.integers(3)),)))
    padded = Circuit(3, gates)
    assert qhe.emit_program(padded) == qhe.emit_program(c)
    _, p1, b1, _, _ = _evaluate(padded, rng)
    assert p1 == qhe.emit_program(c) and len(b1) == 4


# --- replay / decrypt / transcript ------------------------------------------------

def test_replay_examples(rng):
    k = key("10", "01")
    assert qhe.replay_key(KeyUpdateProgram(2, []), k, BellOutcomes(np.zeros((0, 2)))) == k
    h = qhe.replay_key(KeyUpdateProgram(1, [KeyUpdateStep("H", (0,))]), key("1", "0"), BellOutcomes([]))
    assert h == key("0", "1")
    with pytest.raises(ValueError):
        qhe.replay_key(KeyUpdateProgram(1, [KeyUpdateStep("T", (0,), 1)]), key("1", "0"), BellOutcomes([]))


def test_replay_is_a_fold(rng):
    c = qhe.random_clifford_t(3, 6, rng)
    program = qhe.emit_program(c)
    bell = BellOutcomes(rng.integers(0, 2, (6, 2)))
    k0 = qhe.keygen(3, rng)
    full = qhe.replay_key(program, k0, bell)
    for cut in range(len(program.steps) + 1):
        head, tail = program.steps[:cut], program.steps[cut:]
        m = sum(1 for s in head if s.op == "T")
        mid = qhe.replay_key(KeyUpdateProgram(3, head), k0, BellOutcomes(bell.pairs[:m]))
        renum, j = [], 0
        for s in tail:
            if s.op == "T":
                j += 1
                s = KeyUpdateStep("T", s.qubits, j)
            renum.append(s)
        assert qhe.replay_key(KeyUpdateProgram(3, renum), mid, BellOutcomes(bell.pairs[m:])) == full


def test_replay_matches_stepwise_key_updates(rng):
    c = qhe.random_clifford_t(3, 5, rng)
    program = qhe.emit_program(c)
    bell = BellOutcomes(rng.integers(0, 2, (5, 2)))
    k = qhe.keygen(3, rng)
    manual = k
    for s in program.steps:
        if s.op == "T":
            ra, rb = bell.pairs[s.bell - 1]
            manual = qhe.key_update_t(manual, s.qubits[0], int(ra), int(rb))
        else:
            manual = qhe.key_update_clifford(manual, s)
    assert qhe.replay_key(program, k, bell) == manual


def test_decrypt_bits():
    assert qhe.decrypt_bits("01", key("11", "00")) == "10"
    assert qhe.decrypt_bits("0110", key("0000", "1111")) == "0110"
    k = key("101", "000")
    assert qhe.decrypt_bits(qhe.decrypt_bits("011", k), k) == "011"
    with pytest.raises(ValueError):
        qhe.decrypt_bits("01", key("1", "0"))


def test_run_protocol_identity_on_one(rng):
    tr = qhe.run_protocol(Circuit(1, []), sc.basis_state(1, [1]), [0], 2000, True, rng)
    assert np.all(tr.decrypted_bits == 1)
    assert abs(tr.fraction_ones(decrypted=False) - 0.5) <= 0.05
    assert tr.initial_x.shape == (2000, 1)


def test_run_protocol_bell_and_t(rng):
    bell_c = Circuit(2, [Gate("H", (0,)), Gate("CNOT", (0, 1))])
    tr = qhe.run_protocol(bell_c, sc.new_state(2), [0, 1], 500, True, rng)
    assert set(tr.counts()) <= {"00", "11"}
    tr = qhe.run_protocol(Circuit(1, [Gate("H", (0,)), Gate("T", (0,))]), sc.new_state(1), [0], 50, True, rng)
    assert tr.bell.shape == (50, 1, 2)
    for k in range(50):
        assert qhe.replay_key(tr.program, tr.initial_key(k), tr.bell_outcomes(k)) == tr.final_key(k)
    with pytest.raises(qhe.ProtocolError):
        qhe.run_protocol(Circuit(1, [Gate("Tdg", (0,))]), sc.new_state(1), [0], 5, True, rng)


def test_run_protocol_shots_per_key(rng):
    c = qhe.random_clifford_t(2, 3, rng)
    tr = qhe.run_protocol(c, sc.new_state(2), [0, 1], 100, False, rng, shots_per_key=8)
    assert tr.initial_x.shape[0] == 13 and len(tr.key_index) == 100
    assert np.bincount(tr.key_index).max() == 8


def test_decrypted_distribution_is_key_independent():
    rng = np.random.default_rng(5)
    c = qhe.random_clifford_t(3, 6, rng)
    plain = sc.random_state(3, rng)
    shots = 10_000
    dists = []
    for bits in ("101", "011"):
        k = key(bits, bits[::-1])
        rows = np.broadcast_to(plain.amps, (shots, 8))
        keys = (np.tile(k.x, (shots, 1)), np.tile(k.z, (shots, 1)))
        psi, _, tracker = qhe.run_encrypted_rows(c, rows, rng, keys=keys)
        idx = sc.sample_rows(psi, rng)
        dec = sc.index_bits(idx, range(3)) ^ tracker.x
        code = (dec.astype(int) << np.arange(3)).sum(axis=1)
        dists.append(np.bincount(code, minlength=8) / shots)
    assert 0.5 * np.abs(dists[0] - dists[1]).sum() <= 0.05


def test_program_json_format_and_round_trip(rng):
    program = KeyUpdateProgram(3, [KeyUpdateStep("H", (0,)), KeyUpdateStep("S", (1,)),
                                   KeyUpdateStep("CNOT", (0, 1)), KeyUpdateStep("T", (2,), 1)])
    assert program.to_dict() == {"n": 3, "steps": [{"op": "H", "q": 0}, {"op": "S", "q": 1},
                                                   {"op": "CNOT", "c": 0, "t": 1}, {"op": "T", "q": 2, "bell": 1}]}
    assert KeyUpdateProgram.from_json(program.to_json()) == program
    big = qhe.emit_program(qhe.random_clifford_t(4, 9, rng))
    assert KeyUpdateProgram.from_json(big.to_json()) == big


def test_program_validation():
    with pytest.raises(ValueError):
        KeyUpdateProgram(1, [KeyUpdateStep("T", (0,), 2)])
    with pytest.raises(ValueError):
        KeyUpdateProgram(1, [KeyUpdateStep("H", (1,))])
    with pytest.raises(ValueError):
        KeyUpdateStep("X", (0,))
    with pytest.raises(ValueError):
        KeyUpdateStep("T", (0,))


def test_random_clifford_t_counts(rng):
    for t in (0, 1, 7):
        c = qhe.random_clifford_t(3, t, rng)
        assert c.count("T") == t and c.clifford_t_only


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 12), st.integers(0, 2**31 - 1))
def test_homomorphic_correctness_property(n, t, seed):
    rng = np.random.default_rng(seed)
    fid, program, bell, _, _ = _evaluate(qhe.random_clifford_t(n, t, rng), rng)
    assert fid >= 1 - 1e-10 and len(bell) == program.t_count == t
