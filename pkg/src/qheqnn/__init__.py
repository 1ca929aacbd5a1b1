"""Quantum homomorphic encryption for quantum convolutional neural networks.

Modules: simcore (statevector simulator), qhe (one-time pad, key updates and
T gadget), synth (Clifford+T synthesis), qcnn (ansatz, encodings, gradients),
fedtrain (training on encrypted client data), privinf (private inference and
the Pauli-stripping audit), data (loaders and preprocessing), cli.
"""
__version__ = "0.1.0"
