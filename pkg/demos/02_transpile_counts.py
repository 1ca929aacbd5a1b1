"""RZ and T counts of the QCNN ansatz after Clifford+T transpilation."""
import math

import numpy as np

from qheqnn import qcnn, synth

rng = np.random.default_rng(0)
print(" n  params  RZ  16n-22  T-count  per-gate eps")
for n in (2, 4, 8):
    spec = qcnn.build_ansatz(n)
    circuit = qcnn.bind(spec, rng.uniform(0, 2 * math.pi, spec.n_params))
    ct, rep = synth.transpile(circuit, 0.1)
    print(f"{n:2d}  {spec.n_params:6d}  {rep.r_z_count:3d}  {16 * n - 22:6d}  {rep.t_count:7d}  {rep.per_gate_epsilon:.2e}")

print("\nsingle rotations: mean T-count against 4 log2(1/eps)")
angles = rng.uniform(-math.pi, math.pi, 20)
for eps in (1e-1, 3e-2, 1e-2):
    ts = [synth.synthesize_rz(float(t), synth.SynthConfig(epsilon=eps)).t_count for t in angles]
    print(f"  eps {eps:.0e}: mean {np.mean(ts):5.1f}, max {max(ts):3d}, 4 log2(1/eps) = {4 * math.log2(1 / eps):5.1f}")
