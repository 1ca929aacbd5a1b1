"""Train a 2-qubit QCNN on encrypted digits held by two data providers.

Provider A holds only zeros and provider B only ones.  The server never sees
a sample or label; it only receives partial losses and gradients.  Uses the
CI-fast setting (8 shots per key); pass --full for a fresh key per shot.
"""
import sys
import time

from qheqnn import cli, fedtrain, qcnn

name = "train.toml" if "--full" in sys.argv else "train_fast.toml"
cfg = dict(cli.TRAIN_DEFAULTS, **cli.load_toml(cli.bundled_config(name)))
train, test = cli._train_data(cfg)
tc = fedtrain.TrainConfig.from_mapping({k: cfg[k] for k in fedtrain.TrainConfig().to_dict()})
clients = [fedtrain.ClientDataset.from_dataset(cid, train.subset(train.labels == y)) for cid, y in (("A", 0), ("B", 1))]
spec = qcnn.build_ansatz(2)

start = time.perf_counter()
theta, log = fedtrain.run_reverse_training(spec, clients, tc)
fedtrain.check_privacy_boundary(log.messages, spec.n_params)
print(f"{tc.iterations} iterations in {time.perf_counter() - start:.0f} s")
dec, enc = log.decrypted_losses, log.encrypted_losses
for lo in range(0, len(dec), 50):
    print(f"  it {lo:3d}-{lo + 49:3d}: decrypted loss {dec[lo:lo + 50].mean():.3f}  encrypted loss {enc[lo:lo + 50].mean():.3f}")
print("test accuracy:", fedtrain.evaluate_accuracy(spec, theta, test.features, test.labels))
