"""Command-line front end.

Every command is deterministic under its seed and writes a run manifest
(seed, resolved config, config hash, package versions) beside its output.

Exit codes: 0 success, 1 usage error, 2 contract violation (bad values,
failed self-check, synthesis or training failure), 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
from dataclasses import asdict, fields
from importlib import metadata, resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import data, fedtrain, privinf, qcnn, qhe, synth
from . import simcore as sc

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ContractError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers

def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.stem + ".manifest.json")


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None


def _write_manifest(command: str, seed, config: dict, out: Path, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "config_hash": _config_hash(config),
        "versions": _versions(),
        "outputs": outputs,
    }
    _write(_manifest_path(out), _dump(manifest))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def bundled_config(name: str = "train.toml") -> Path:
    return Path(str(resources.files("qheqnn") / "configs" / name))


def _merge(defaults: dict, file_values: dict, flags: dict) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _load_features(path) -> data.Dataset:
    try:
        return data.load_csv(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except data.DataError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------------------
# demo

def cmd_demo(args) -> int:
    if args.qubits < 1 or args.qubits > 10:
        raise UsageError("--qubits must be in 1..10")
    if args.t_gates < 0:
        raise UsageError("--t-gates must be >= 0")
    if args.shots < 1:
        raise UsageError("--shots must be >= 1")
    n = args.qubits
    rng = sc.make_rng(args.seed)
    circuit = qhe.random_clifford_t(n, args.t_gates, rng)
    plain = sc.new_state(n)
    check = qhe.self_check(circuit, plain, rng)
    idx = sc.sample_rows(np.broadcast_to(check.enc_final.amps, (args.shots, 1 << n)), rng)
    enc_bits = sc.index_bits(idx, range(n))
    dec_bits = enc_bits ^ check.final_key.x[None, :]
    transcript = {
        "qubits": n,
        "t_gates": args.t_gates,
        "seed": args.seed,
        "circuit": circuit.to_dict(),
        "initial_key": check.initial_key.to_dict(),
        "program": check.program.to_dict(),
        "bell": [[int(a), int(b)] for a, b in check.bell.pairs],
        "final_key": check.final_key.to_dict(),
        "shots": args.shots,
        "encrypted_counts": _counts(enc_bits),
        "decrypted_counts": _counts(dec_bits),
        "plaintext_probabilities": {
            sc.bitstring(sc.index_bits(np.array([i]), range(n))[0]): float(p)
            for i, p in enumerate(sc.apply_circuit(plain, circuit).probabilities())
            if p > 1e-12
        },
        "self_check": {"fidelity": check.fidelity, "passed": check.passed},
    }
    text = _dump(transcript)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        _write(out, text)
        cfg = {"qubits": n, "t_gates": args.t_gates, "shots": args.shots}
        _write_manifest("demo", args.seed, cfg, out, [out.name])
    return EXIT_OK if check.passed else EXIT_CONTRACT


def _counts(bits) -> dict:
    out: dict[str, int] = {}
    for row in bits:
        key = sc.bitstring(row)
        out[key] = out.get(key, 0) + 1
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# synth / transpile

def cmd_synth(args) -> int:
    if not math.isfinite(args.theta):
        raise UsageError("--theta must be finite")
    config = synth.SynthConfig(epsilon=args.epsilon, max_search_depth=args.max_depth)
    word = synth.synthesize_rz(args.theta, config)
    text = _dump(word.to_dict())
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        _write(out, text)
        cfg = {"theta": args.theta, "epsilon": args.epsilon, "max_depth": args.max_depth}
        _write_manifest("synth", None, cfg, out, [out.name])
    return EXIT_OK


def _circuit_from_json(obj: dict) -> sc.Circuit:
    if "theta" in obj:
        return qcnn.QcnnModel.from_dict(obj).circuit()
    return sc.Circuit.from_dict(obj)


def cmd_transpile(args) -> int:
    if (args.input is None) == (args.ansatz is None):
        raise UsageError("give exactly one of --in or --ansatz")
    if args.input is not None:
        circuit = _circuit_from_json(_read_json(args.input))
        source = {"in": str(args.input)}
    else:
        spec = qcnn.build_ansatz(args.ansatz)
        circuit = qcnn.bind(spec, qcnn.init_theta(spec, sc.make_rng(args.seed)))
        source = {"ansatz": args.ansatz}
    config = synth.SynthConfig(epsilon=args.epsilon, max_search_depth=args.max_depth)
    ct, report = synth.transpile(circuit, args.budget, config)
    out = Path(args.out)
    _write(out, ct.to_json() + "\n")
    outputs = [out.name]
    summary = report.to_dict()
    if args.report:
        rep = Path(args.report)
        _write(rep, _dump(summary))
        outputs.append(rep.name)
    cfg = dict(source, budget=args.budget, epsilon=args.epsilon, max_depth=args.max_depth)
    _write_manifest("transpile", args.seed, cfg, out, outputs)
    sys.stdout.write(_dump({k: summary[k] for k in ("r_z_count", "t_count", "per_gate_epsilon", "total_budget")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = dict(
    fedtrain.TrainConfig().to_dict(),
    trainer="federated",
    dataset="digits",
    n_qubits=2,
    split_ratio=0.8,
    batch=32,
)


def _train_data(cfg: dict) -> tuple[data.Dataset, data.Dataset]:
    source = cfg["dataset"]
    if source == "digits":
        ds = data.load_digits01()
    elif source == "blobs":
        ds = data.synth_blobs(60, seed=cfg["seed"])
    else:
        ds = _load_features(source)
    if cfg["encoding"] == "qubit" and ds.features.shape[1] != cfg["n_qubits"]:
        ds = data.pca2d_pipeline(ds, cfg["n_qubits"])
    elif cfg["encoding"] == "amplitude":
        ds = ds.with_features(data.pad_amplitudes(ds.features, cfg["n_qubits"]))
    return data.split(ds, cfg["split_ratio"], cfg["seed"])


def cmd_train(args) -> int:
    file_values = load_toml(args.config) if args.config else {}
    flags = {
        "iterations": args.iterations,
        "seed": args.seed,
        "shots_per_key": args.shots_per_key,
        "dataset": args.dataset,
        "trainer": args.trainer,
        "n_qubits": args.qubits,
        "encoding": args.encoding,
    }
    cfg = _merge(TRAIN_DEFAULTS, file_values, flags)
    if cfg["trainer"] not in ("federated", "plain"):
        raise ContractError(f"unknown trainer {cfg['trainer']!r}")
    train, test = _train_data(cfg)
    spec = qcnn.build_ansatz(cfg["n_qubits"])
    out = Path(args.out)
    base = out.parent

    if cfg["trainer"] == "federated":
        tc = fedtrain.TrainConfig.from_mapping({f.name: cfg[f.name] for f in fields(fedtrain.TrainConfig)})
        clients = [
            fedtrain.ClientDataset.from_dataset(cid, train.subset(train.labels == label))
            for cid, label in (("A", 0), ("B", 1))
        ]
        theta, log = fedtrain.run_reverse_training(spec, clients, tc)
        fedtrain.check_privacy_boundary(log.messages, spec.n_params)
        losses = log.decrypted_losses
        _write(out, log.to_csv())
        outputs = [out.name]
        if args.trace:
            _write(Path(args.trace), log.trace_json() + "\n")
            outputs.append(Path(args.trace).name)
        extra = {"encrypted_loss_mean": float(log.encrypted_losses.mean()) if len(log) else None}
    else:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg["seed"])))
        states = qcnn.encode_rows(train.features, spec.n_qubits, cfg["encoding"])
        fit = qcnn.train_plain(spec, states, train.labels, rng, cfg["iterations"], cfg["batch"], cfg["alpha"])
        theta, losses = fit.theta, np.array(fit.losses)
        _write(out, "iteration,loss\n" + "".join(f"{i},{l!r}\n" for i, l in enumerate(fit.losses)))
        outputs = [out.name]
        extra = {}

    model = qcnn.QcnnModel(spec.n_qubits, cfg["encoding"], theta)
    acc = qcnn.accuracy(model.probs(test.features), test.labels)
    k = min(20, len(losses))
    summary = {
        "test_accuracy": acc,
        "iterations": len(losses),
        "first20_loss": float(losses[:k].mean()) if k else None,
        "last20_loss": float(losses[-k:].mean()) if k else None,
        **extra,
    }
    _write(base / "model.json", model.to_json() + "\n")
    _write(base / "summary.json", _dump(summary))
    _write(base / "test.csv", _dataset_csv(test))
    outputs += ["model.json", "summary.json", "test.csv"]
    _write_manifest("train", cfg["seed"], cfg, out, outputs)
    sys.stdout.write(_dump(summary))
    return EXIT_OK


def _dataset_csv(ds: data.Dataset) -> str:
    head = "label," + ",".join(f"f{i}" for i in range(ds.features.shape[1]))
    rows = [f"{int(y)}," + ",".join(repr(float(v)) for v in x) for x, y in zip(ds.features, ds.labels)]
    return head + "\n" + "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# infer / audit

def cmd_infer(args) -> int:
    if args.samples < 1 or args.shots < 1:
        raise UsageError("--samples and --shots must be >= 1")
    try:
        model = qcnn.QcnnModel.from_dict(_read_json(args.model))
    except (KeyError, TypeError) as exc:
        raise InputError(f"{args.model}: malformed model: {exc}") from None
    ds = _load_features(args.data)
    if model.encoding == "amplitude" and ds.features.shape[1] < (1 << model.n_qubits):
        ds = ds.with_features(data.pad_amplitudes(ds.features, model.n_qubits))
    rng = sc.make_rng(args.seed)
    order = np.sort(rng.permutation(len(ds))[: args.samples])
    ct, report = privinf.transpile_model(model, args.budget, synth.SynthConfig(max_search_depth=args.max_depth))
    results = [
        privinf.private_infer(ds.features[i], model, args.shots, rng, circuit=ct, true_label=int(ds.labels[i]))
        for i in order
    ]
    doc = {
        "samples": [dict(r.to_dict(), row=int(i)) for i, r in zip(order, results)],
        "decrypted_accuracy": float(np.mean([r.predicted_label == r.true_label for r in results])),
        "encrypted_accuracy": float(np.mean([qcnn.predict(r.encrypted_prob) == r.true_label for r in results])),
        "transpile": {"r_z_count": report.r_z_count, "t_count": report.t_count,
                      "per_gate_epsilon": report.per_gate_epsilon, "total_budget": report.total_budget},
    }
    out = Path(args.out)
    _write(out, _dump(doc))
    cfg = {"model": str(args.model), "data": str(args.data), "samples": args.samples, "shots": args.shots,
           "budget": args.budget, "max_depth": args.max_depth}
    _write_manifest("infer", args.seed, cfg, out, [out.name])
    sys.stdout.write(_dump({k: doc[k] for k in ("decrypted_accuracy", "encrypted_accuracy")}))
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    ds = data.load_digits01() if args.data is None else _load_features(args.data)
    train, test = data.split(ds, 0.8, args.seed)
    config = privinf.AuditConfig(
        n_qubits=args.qubits, iterations=args.iterations, budget=args.budget, seed=args.seed,
        retrain_select=args.retrain_select, max_search_depth=args.max_depth,
    )
    records = privinf.privacy_audit(args.instances, args.encoding, train, test, config)
    out = Path(args.out)
    _write(out, privinf.audit_table_csv(records, with_selected=args.retrain_select))
    cfg = {"instances": args.instances, "encoding": args.encoding, "data": args.data, **asdict(config)}
    _write_manifest("audit", args.seed, cfg, out, [out.name])
    failed = [r for r in records if r.error is not None]
    for r in failed:
        sys.stderr.write(f"instance {r.index}: {r.error}\n")
    return EXIT_CONTRACT if len(failed) == len(records) else EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qheqnn", description="Quantum homomorphic encryption for QCNNs on a statevector simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {_versions()['artifact']}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("demo", help="encrypt, evaluate and decrypt a random Clifford+T circuit")
    d.add_argument("--qubits", type=int, default=2, help="register size (1..10)")
    d.add_argument("--t-gates", type=int, default=3, help="number of T gates in the random circuit")
    d.add_argument("--shots", type=int, default=256, help="measurement shots of the encrypted output")
    d.add_argument("--seed", type=int, default=0, help="master seed")
    d.add_argument("--out", help="also write the JSON transcript here")
    d.set_defaults(func=cmd_demo)

    s = sub.add_parser("synth", help="approximate RZ(theta) by a Clifford+T word")
    s.add_argument("--theta", type=float, required=True, help="rotation angle in radians")
    s.add_argument("--epsilon", type=float, default=1e-2, help="phase-invariant distance bound")
    s.add_argument("--max-depth", type=int, default=synth.SynthConfig().max_search_depth,
                   help="largest T-count the search may reach")
    s.add_argument("--out", help="also write the JSON result here")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("transpile", help="rewrite a circuit or model into Clifford+T")
    t.add_argument("--in", dest="input", help="circuit JSON or model JSON")
    t.add_argument("--ansatz", type=int, help="transpile the n-qubit ansatz with seeded random parameters")
    t.add_argument("--budget", type=float, default=None, help="total error budget split over approximated RZ")
    t.add_argument("--epsilon", type=float, default=1e-2, help="per-rotation bound when no budget is given")
    t.add_argument("--max-depth", type=int, default=synth.SynthConfig().max_search_depth, help="search T-count limit")
    t.add_argument("--seed", type=int, default=0, help="seed for --ansatz parameters")
    t.add_argument("--out", required=True, help="output circuit JSON")
    t.add_argument("--report", help="output report JSON")
    t.set_defaults(func=cmd_transpile)

    tr = sub.add_parser("train", help="reverse delegated training, or plain training with --trainer plain")
    tr.add_argument("--config", help="TOML run config; flags override its values")
    tr.add_argument("--out", required=True, help="log CSV; model.json, summary.json and test.csv go beside it")
    tr.add_argument("--trace", help="write the JSON transcript of round messages here")
    tr.add_argument("--iterations", type=int, help="optimizer iterations")
    tr.add_argument("--seed", type=int, help="master seed")
    tr.add_argument("--shots-per-key", type=int, help="shots drawn per encrypted evaluation (1 = fresh key per shot)")
    tr.add_argument("--dataset", help="'digits', 'blobs' or a CSV path")
    tr.add_argument("--trainer", choices=("federated", "plain"), help="training procedure")
    tr.add_argument("--qubits", type=int, help="register size of the QCNN")
    tr.add_argument("--encoding", choices=("qubit", "amplitude"), help="input encoding")
    tr.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="private inference of a trained model on encrypted samples")
    i.add_argument("--model", required=True, help="model JSON from train")
    i.add_argument("--data", required=True, help="CSV with label,f0,... rows")
    i.add_argument("--samples", type=int, default=5, help="number of rows to evaluate")
    i.add_argument("--shots", type=int, default=1024, help="shots per sample, one fresh key each")
    i.add_argument("--budget", type=float, default=0.1, help="transpilation error budget")
    i.add_argument("--max-depth", type=int, default=synth.SynthConfig().max_search_depth, help="search T-count limit")
    i.add_argument("--seed", type=int, default=0, help="master seed")
    i.add_argument("--out", required=True, help="output JSON")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("audit", help="Pauli-stripping privacy audit over freshly trained models")
    a.add_argument("--instances", type=int, default=10, help="number of independently trained models")
    a.add_argument("--encoding", choices=("qubit", "amplitude"), default="amplitude", help="input encoding")
    a.add_argument("--qubits", type=int, default=8, help="register size of the QCNN")
    a.add_argument("--iterations", type=int, default=200, help="plain training iterations per instance")
    a.add_argument("--budget", type=float, default=0.1, help="transpilation error budget")
    a.add_argument("--max-depth", type=int, default=synth.SynthConfig().max_search_depth, help="search T-count limit")
    a.add_argument("--data", help="CSV dataset (default: bundled digits 0/1)")
    a.add_argument("--retrain-select", action="store_true", help="mark the instance with the largest accuracy drop")
    a.add_argument("--seed", type=int, default=0, help="master seed")
    a.add_argument("--out", required=True, help="output CSV table")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except InputError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO
    except (ContractError, ValueError, RuntimeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
