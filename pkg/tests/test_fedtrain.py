import math

import numpy as np
import pytest

from qheqnn import data, fedtrain, qcnn
from qheqnn.fedtrain import ClientDataset, RoundMessage, TrainConfig


def blob_clients(n=20, seed=0):
    ds = data.synth_blobs(n, seed=seed)
    return [ClientDataset("A", ds.features[ds.labels == 0], ds.labels[ds.labels == 0]),
            ClientDataset("B", ds.features[ds.labels == 1], ds.labels[ds.labels == 1])]


def server(config, theta):
    s = fedtrain.Server(qcnn.build_ansatz(2), config)
    s.set_theta(theta)
    return s


# aggregation

def test_aggregate_examples():
    g = np.array([0.3, -1.0])
    loss, grad = fedtrain.aggregate([(2.0, g, 4)])
    assert loss == 0.5 and np.array_equal(grad, g / 4)
    _, grad = fedtrain.aggregate([(1.0, g, 2), (1.0, -g, 2)])
    assert np.array_equal(grad, [0.0, 0.0])
    loss, _ = fedtrain.aggregate([(1.0, np.zeros(2), 1), (0.4, np.zeros(2), 1)])
    assert loss == pytest.approx(0.7, abs=1e-15)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        fedtrain.aggregate([])
    with pytest.raises(ValueError):
        fedtrain.aggregate([(1.0, np.zeros(2), 1), (1.0, np.zeros(3), 1)])


def test_aggregate_sums_in_id_order():
    parts = [("b", 0.1, np.array([1e16]), 1), ("a", 0.2, np.array([1.0]), 1), ("c", 0.3, np.array([-1e16]), 1)]
    ref = fedtrain.aggregate(sorted(parts))
    assert fedtrain.aggregate(parts)[1] == ref[1]
    assert fedtrain.aggregate(parts[::-1])[1] == ref[1]


# client rounds

def test_client_round_exact_matches_direct(rng):
    cfg = TrainConfig(mode="exact")
    spec = qcnn.build_ansatz(2)
    theta = rng.uniform(0, 2 * math.pi, 8)
    client = ClientDataset("A", [[0.4, 2.2]], [1])
    loss, grad, _ = fedtrain.client_round(client, [0], server(cfg, theta), cfg, rng)
    state = qcnn.qubit_state([0.4, 2.2])
    f = qcnn.forward(state, spec, theta)
    ref = (f - 1) / (f * (1 - f)) * qcnn.grad_parameter_shift(state, spec, theta)
    assert loss == pytest.approx(-math.log(f), abs=1e-12)
    assert np.max(np.abs(grad - ref)) <= 1e-10


def test_client_round_clipped_when_f_equals_y():
    cfg = TrainConfig(mode="exact")
    theta = np.zeros(8)
    theta[5] = math.pi  # readout ends in |1> for input |00>
    client = ClientDataset("A", [[0.0, 0.0]], [1])
    loss, grad, _ = fedtrain.client_round(client, [0], server(cfg, theta), cfg, np.random.default_rng(0))
    assert loss == pytest.approx(1e-7, rel=1e-3)
    assert np.all(np.isfinite(grad))


def test_client_round_qhe_close_to_exact(rng):
    theta = rng.uniform(0, 2 * math.pi, 8)
    client = ClientDataset("A", [[1.0, 2.0]], [0])
    exact_cfg = TrainConfig(mode="exact")
    qhe_cfg = TrainConfig(shots=4096, shots_per_key=16)
    l_exact, g_exact, _ = fedtrain.client_round(client, [0], server(exact_cfg, theta), exact_cfg, rng)
    l_qhe, g_qhe, _ = fedtrain.client_round(client, [0], server(qhe_cfg, theta), qhe_cfg, rng)
    assert abs(l_qhe - l_exact) < 0.1
    assert np.max(np.abs(g_qhe - g_exact)) < 0.25


def test_encrypted_gradient_is_centered():
    cfg = TrainConfig(shots=64, shots_per_key=8)
    rng = np.random.default_rng(7)
    theta = rng.uniform(0, 2 * math.pi, 8)
    srv = server(cfg, theta)
    client = ClientDataset("A", [[0.5, 2.5]], [1])
    grads = np.array([fedtrain.client_round(client, [0], srv, cfg, rng, decrypt=False)[1] for _ in range(50)])
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / math.sqrt(len(grads))
    assert np.all(np.abs(mean) <= 3 * se)


def test_partition_linearity(rng):
    cfg = TrainConfig(mode="exact")
    theta = rng.uniform(0, 2 * math.pi, 8)
    ds = data.synth_blobs(4, seed=2)
    whole = ClientDataset("A", ds.features, ds.labels)
    srv = server(cfg, theta)
    l, g, _ = fedtrain.client_round(whole, np.arange(8), srv, cfg, rng)
    single = fedtrain.aggregate([(l, g, 8)])
    parts = []
    for cid, idx in (("p", np.arange(3)), ("q", np.arange(3, 8))):
        c = ClientDataset(cid, ds.features[idx], ds.labels[idx])
        lk, gk, _ = fedtrain.client_round(c, np.arange(len(idx)), srv, cfg, rng)
        parts.append((cid, lk, gk, len(idx)))
    split = fedtrain.aggregate(parts)
    assert split[0] == pytest.approx(single[0], abs=1e-12)
    assert np.allclose(split[1], single[1], atol=1e-12)


# full runs

def test_zero_iterations_returns_initial():
    theta0 = np.linspace(0, 1, 8)
    theta, log = fedtrain.run_reverse_training(qcnn.build_ansatz(2), blob_clients(), TrainConfig(iterations=0), theta0)
    assert np.array_equal(theta, theta0) and len(log) == 0


def test_run_deterministic_and_order_free():
    spec = qcnn.build_ansatz(2)
    cfg = TrainConfig(iterations=3, shots=64, shots_per_key=8, seed=5)
    clients = blob_clients()
    t1, log1 = fedtrain.run_reverse_training(spec, clients, cfg)
    t2, log2 = fedtrain.run_reverse_training(spec, clients[::-1], cfg)
    assert np.array_equal(t1, t2)
    assert log1.to_csv() == log2.to_csv()
    assert log1.trace_json() == log2.trace_json()


def test_log_layout():
    spec = qcnn.build_ansatz(2)
    _, log = fedtrain.run_reverse_training(spec, blob_clients(), TrainConfig(iterations=2, mode="exact"))
    lines = log.to_csv().splitlines()
    assert lines[0].split(",") == ["iteration", "loss_decrypted", "loss_encrypted", "grad_norm"] + [
        f"theta_{i}" for i in range(8)]
    assert len(lines) == 3
    assert set(log.records[0].contributions) == {"A", "B"}


def test_exact_training_learns_blobs():
    spec = qcnn.build_ansatz(2)
    clients = blob_clients(40)
    theta, log = fedtrain.run_reverse_training(spec, clients, TrainConfig(iterations=150, mode="exact", alpha=0.05))
    test = data.synth_blobs(50, seed=9)
    assert fedtrain.evaluate_accuracy(spec, theta, test.features, test.labels) >= 0.9
    losses = log.decrypted_losses
    assert losses[-20:].mean() < losses[:20].mean()


def test_client_failure_names_iteration():
    bad = ClientDataset("A", [[0.1, 0.2, 0.3]], [0])
    with pytest.raises(ValueError):
        fedtrain.run_reverse_training(qcnn.build_ansatz(2), [bad, blob_clients()[1]], TrainConfig(iterations=1))
    wrong = ClientDataset("A", [[0.1, 0.2, 0.3]], [0])
    with pytest.raises(fedtrain.TrainingError) as info:
        fedtrain.run_reverse_training(qcnn.build_ansatz(2), [wrong], TrainConfig(iterations=1, mode="exact"))
    assert info.value.iteration == 0


# privacy boundary and config

def test_trace_respects_privacy_boundary():
    _, log = fedtrain.run_reverse_training(qcnn.build_ansatz(2), blob_clients(), TrainConfig(iterations=2, mode="exact"))
    fedtrain.check_privacy_boundary(log.messages, 8)
    uplink = [m for m in log.messages if m.direction == fedtrain.CLIENT_TO_SERVER]
    assert {m.kind for m in uplink} == {"partial_loss", "partial_gradient", "sample_size", "encrypted_loss"}


@pytest.mark.parametrize("msg", [
    RoundMessage(fedtrain.CLIENT_TO_SERVER, "features", "A", {"value": [0.1, 0.2]}),
    RoundMessage(fedtrain.CLIENT_TO_SERVER, "partial_gradient", "A", {"values": [0.1] * 8, "label": 1}),
    RoundMessage(fedtrain.CLIENT_TO_SERVER, "partial_gradient", "A", {"values": [0.1] * 4}),
    RoundMessage(fedtrain.CLIENT_TO_SERVER, "partial_loss", "A", {"value": 0.3, "key": [0, 1]}),
    RoundMessage(fedtrain.CLIENT_TO_SERVER, "sample_size", "A", {"value": [1, 0]}),
])
def test_privacy_boundary_rejects(msg):
    with pytest.raises(ValueError):
        fedtrain.check_privacy_boundary([msg], 8)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=0)
    with pytest.raises(ValueError):
        TrainConfig(shots=0)
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"iterations": 3, "learning_rate": 0.1})
    cfg = TrainConfig.from_mapping({"iterations": 3})
    assert cfg.iterations == 3 and cfg.alpha == 0.01 and cfg.shots == 1024 and cfg.batch_per_client == 1
