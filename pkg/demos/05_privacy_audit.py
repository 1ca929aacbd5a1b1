"""What the key-update program reveals about the server's model.

Trains a few 8-qubit models, strips the X and Z gates (the part hidden from
the client) and compares test accuracies.
"""
import sys

from qheqnn import data, privinf

n = int(sys.argv[1]) if len(sys.argv) > 1 else 3
train, test = data.split(data.load_digits01(), 0.8, 0)
print("index  server  non-Pauli  |non-Pauli - 0.5|")
privinf.privacy_audit(
    n, "amplitude", train, test,
    progress=lambda r: print(f"{r.index:5d}  {r.server_acc:.3f}   {r.non_pauli_acc:.3f}      {r.distance:.3f}"),
)
