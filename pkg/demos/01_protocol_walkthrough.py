"""Encrypt a state, evaluate a Clifford+T circuit on it, then decrypt.

Prints the key-update program the server sends back and shows that only the
final key turns the server's output into the plaintext result.
"""
import numpy as np

from qheqnn import qhe
from qheqnn import simcore as sc
from qheqnn.simcore import Circuit, Gate

rng = np.random.default_rng(7)
circuit = Circuit(2, [Gate("H", (0,)), Gate("T", (0,)), Gate("CNOT", (0, 1)), Gate("X", (1,)),
                      Gate("T", (1,)), Gate("S", (0,))])
plain = sc.new_state(2)

check = qhe.self_check(circuit, plain, rng)
print("initial key  x =", check.initial_key.x, " z =", check.initial_key.z)
print("program:")
for step in check.program.steps:
    print("   ", step.to_dict())
print("bell outcomes (r_a, r_b):", [tuple(int(v) for v in p) for p in check.bell.pairs])
print("final key    x =", check.final_key.x, " z =", check.final_key.z)
print("fidelity of decrypted result with plaintext run: %.15f" % check.fidelity)

tr = qhe.run_protocol(circuit, plain, [0, 1], 4000, True, rng)
expected = sc.apply_circuit(plain, circuit).probabilities()
print("\noutcome  plaintext  decrypted  encrypted")
enc, dec = tr.counts(decrypted=False), tr.counts(decrypted=True)
for i, p in enumerate(expected):
    key = sc.bitstring([(i >> q) & 1 for q in range(2)])
    print(f"  {key}     {p:.3f}      {dec.get(key, 0) / 4000:.3f}      {enc.get(key, 0) / 4000:.3f}")
