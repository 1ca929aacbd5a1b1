"""Private inference with an 8-qubit amplitude-encoded QCNN.

Shows the measured image of an encrypted and an unencrypted digit, then runs
the trained model on encrypted samples.
"""
import numpy as np

from qheqnn import cli, privinf, qcnn

rng = np.random.default_rng(3)
cfg = dict(cli.TRAIN_DEFAULTS, **cli.load_toml(cli.bundled_config("train_plain8.toml")))
train, test = cli._train_data(cfg)

digit = test.features[0][:64]
plain = privinf.sample_state_image(digit, 6, 100_000, False, rng)
enc = privinf.sample_state_image(digit, 6, 100_000, True, rng)
print("plain image correlation with pixels^2: %.3f" % np.corrcoef(plain, digit**2)[0, 1])
print("encrypted image counts: min %d, max %d (uniform would be %d)" % (enc.min(), enc.max(), 100_000 // 64))

spec = qcnn.build_ansatz(8)
fit = qcnn.train_plain(spec, qcnn.encode_rows(train.features, 8, "amplitude"), train.labels, rng,
                       cfg["iterations"], cfg["batch"], cfg["alpha"])
model = qcnn.QcnnModel(8, "amplitude", fit.theta)
print("\nplain test accuracy: %.3f" % qcnn.accuracy(model.probs(test.features), test.labels))
circuit, rep = privinf.transpile_model(model, 0.1)
print(f"transpiled: {rep.r_z_count} RZ, T-count {rep.t_count}")
for i in rng.choice(len(test), 3, replace=False):
    r = privinf.private_infer(test.features[i], model, 1024, rng, circuit=circuit, true_label=int(test.labels[i]))
    print(f"  label {r.true_label}: exact {r.exact_prob:.3f}  decrypted {r.decrypted_prob:.3f}  encrypted {r.encrypted_prob:.3f}")
