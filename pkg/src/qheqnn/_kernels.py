"""Compiled inner loop for fused small-circuit evaluation.

Runs a CompiledCircuit over many independent protocol runs at once.  Each
row carries its own state, key and pre-drawn gadget outcomes.  The loop does
exactly what the step-wise path in :mod:`qhe` does: Clifford blocks act on
the state and on the key as a GF(2) map; T gadgets apply the branch unitary
picked by the current x bit and the outcome, then update the key.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


@njit(cache=True)
def run_fused(psi, x, z, kinds, qubits, mats, kmaps, r, gadget_u, bell):
    rows, dim = psi.shape
    n = x.shape[1]
    tmp = np.empty(dim, dtype=np.complex128)
    xz = np.empty(2 * n, dtype=np.int64)
    for b in range(rows):
        m = 0
        for s in range(kinds.shape[0]):
            if kinds[s] == 1:
                q = qubits[s]
                rr = r[m, b]
                u = gadget_u[x[b, q], rr]
                step = 1 << q
                for base in range(dim):
                    if base & step:
                        continue
                    a0 = psi[b, base]
                    a1 = psi[b, base | step]
                    psi[b, base] = u[0, 0] * a0 + u[0, 1] * a1
                    psi[b, base | step] = u[1, 0] * a0 + u[1, 1] * a1
                ra = rr >> 1
                rb = rr & 1
                z[b, q] ^= x[b, q] ^ rb
                x[b, q] ^= ra
                bell[b, m, 0] = ra
                bell[b, m, 1] = rb
                m += 1
            else:
                mat = mats[qubits[s]]
                for j in range(dim):
                    acc = 0j
                    for k in range(dim):
                        acc += psi[b, k] * mat[k, j]
                    tmp[j] = acc
                for j in range(dim):
                    psi[b, j] = tmp[j]
                km = kmaps[qubits[s]]
                for j in range(n):
                    xz[j] = x[b, j]
                    xz[n + j] = z[b, j]
                for j in range(2 * n):
                    acc_i = 0
                    for k in range(2 * n):
                        acc_i += xz[k] * km[k, j]
                    if j < n:
                        x[b, j] = acc_i & 1
                    else:
                        z[b, j - n] = acc_i & 1
