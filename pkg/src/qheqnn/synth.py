"""Clifford+T transpilation.

Rotations are first rewritten to RZ plus Clifford gates, then every RZ is
replaced by a word over {X, Z, H, S, T}:

* angles that are multiples of pi/4 get an exact word (T = RZ(pi/4) up to
  phase);
* every other angle is folded to a residue in (0, pi/8] and the residue is
  found by meet-in-the-middle search over words with a bounded T-count.

Distances are measured with the phase-invariant metric
``d(U, V) = sqrt(1 - |tr(U^dag V)| / 2)``.  For single-qubit gates this is
exactly ``min_phi ||U - e^{i phi} V|| / sqrt(2)``, so an operator-norm bound
``eps`` corresponds to ``d <= eps / sqrt(2)``.  Budgets here are always
stated in ``d``.

The search splits a candidate as ``N @ A``.  A runs over a table of every
distinct single-qubit Clifford+T unitary (mod global phase) up to T-count
``max_search_depth // 2`` (capped at 13 to bound memory), held in a KD-tree
over unit quaternions.  N runs over Matsumoto-Amano normal forms without
their trailing Clifford, which the table side absorbs; these are cheap to
enumerate, so the remaining depth goes there.  Levels are scanned by
increasing T-count, so the first hit has minimal T-count.  The table is
built once per process and cached on disk (``QHEQNN_CACHE_DIR``, empty
string disables).
"""
from __future__ import annotations

import math
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from . import simcore as sc
from .simcore import Circuit, Gate

PI4 = math.pi / 4
_DYADIC_WORDS = {
    0: (),
    1: ("T",),
    2: ("S",),
    3: ("S", "T"),
    4: ("Z",),
    5: ("Z", "T"),
    6: ("Z", "S"),
    7: ("Z", "S", "T"),
}


class SynthesisError(RuntimeError):
    def __init__(self, message: str, best_distance: float | None = None):
        super().__init__(message)
        self.best_distance = best_distance


@dataclass(frozen=True)
class SynthConfig:
    epsilon: float = 1e-2
    backend: str = "search"
    max_search_depth: int = 34

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.5:
            raise ValueError(f"epsilon must be in (0, 0.5], got {self.epsilon}")
        if self.backend not in ("search", "exact_dyadic"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if not 0 <= self.max_search_depth <= 40:
            raise ValueError("max_search_depth must be in [0, 40]")


@dataclass(frozen=True)
class RzWord:
    """A Clifford+T word (circuit order) approximating RZ(theta)."""

    theta: float
    gates: tuple[str, ...]
    distance: float

    @property
    def t_count(self) -> int:
        return self.gates.count("T")

    def __len__(self):
        return len(self.gates)

    def to_dict(self) -> dict:
        return {
            "theta": self.theta,
            "word": "".join(self.gates),
            "length": len(self.gates),
            "t_count": self.t_count,
            "distance": self.distance,
        }


@dataclass
class TranspileReport:
    r_z_count: int
    t_count: int
    per_gate_epsilon: float
    total_budget: float | None
    per_rotation_t: list[int] = field(default_factory=list)
    per_rotation_distance: list[float] = field(default_factory=list)
    approximate_count: int = 0
    native_t_count: int = 0

    def to_dict(self) -> dict:
        return {
            "r_z_count": self.r_z_count,
            "t_count": self.t_count,
            "per_gate_epsilon": self.per_gate_epsilon,
            "total_budget": self.total_budget,
            "approximate_count": self.approximate_count,
            "native_t_count": self.native_t_count,
            "per_rotation_t": self.per_rotation_t,
            "per_rotation_distance": self.per_rotation_distance,
        }


# ---------------------------------------------------------------------------
# SU(2) as pairs (a, b) with U = [[a, -conj(b)], [b, conj(a)]]

def _su2(u: np.ndarray) -> tuple[complex, complex]:
    u = u / np.sqrt(np.linalg.det(u))
    return complex(u[0, 0]), complex(u[1, 0])


def _mul(a1, b1, a2, b2):
    return a1 * a2 - np.conj(b1) * b2, b1 * a2 + np.conj(a1) * b2


def _quat(a, b) -> np.ndarray:
    q = np.stack([np.real(a), np.imag(a), np.real(b), np.imag(b)], axis=-1)
    return np.atleast_2d(q)


def _canonical(q: np.ndarray) -> np.ndarray:
    """Fix the +/- ambiguity: first component with |c| > 1e-9 is positive."""
    big = np.abs(q) > 1e-9
    first = np.argmax(big, axis=1)
    sign = np.sign(q[np.arange(len(q)), first])
    sign[sign == 0] = 1.0
    return q * sign[:, None]


def _hash_keys(q: np.ndarray) -> np.ndarray:
    return np.round(_canonical(q) * 1e6).astype(np.int64)


def word_matrix(gates) -> np.ndarray:
    u = np.eye(2, dtype=complex)
    for g in gates:
        u = sc.FIXED_MATRICES[g] @ u
    return u


def word_distance(gates, theta: float) -> float:
    return sc.phase_distance(word_matrix(gates), sc.rz_matrix(theta))


# ---------------------------------------------------------------------------
# word simplification

_PAIR_RULES = {"HH": (), "XX": (), "ZZ": (), "SS": ("Z",), "TT": ("S",)}


def simplify_word(gates) -> tuple[str, ...]:
    """Exact peephole rewrites (up to phase) until nothing changes."""
    out: list[str] = []
    for g in gates:
        out.append(g)
        while len(out) >= 2 and (out[-2] + out[-1]) in _PAIR_RULES:
            repl = _PAIR_RULES[out[-2] + out[-1]]
            del out[-2:]
            out.extend(repl)
    return tuple(out)


# ---------------------------------------------------------------------------
# Clifford group and search tables

def _clifford_group():
    """24 single-qubit Cliffords mod phase with shortest words over {X, Z, H, S}."""
    gens = ("H", "S", "X", "Z")
    seen = {}
    words, mats = [], []
    queue = deque([()])
    while queue:
        w = queue.popleft()
        a, b = _su2(word_matrix(w))
        key = tuple(_hash_keys(_quat(a, b))[0])
        if key in seen:
            continue
        seen[key] = len(words)
        words.append(w)
        mats.append((a, b))
        for g in gens:
            queue.append(w + (g,))
    return words, mats


class _Tables:
    """Levels of distinct Clifford+T unitaries by minimal T-count."""

    def __init__(self):
        words, mats = _clifford_group()
        self.clifford_words = words
        n = len(words)
        self.a = np.array([m[0] for m in mats])
        self.b = np.array([m[1] for m in mats])
        self.tcount = np.zeros(n, dtype=np.int64)
        self.parent = np.full(n, -1, dtype=np.int64)
        self.tail = np.arange(n, dtype=np.int64)  # clifford index appended after the T
        self.keys = _hash_keys(_quat(self.a, self.b))
        self.level_bounds = [(0, n)]
        self._reps = self._coset_reps()
        self._trees: dict[int, tuple[cKDTree, int]] = {}
        self._words: dict[int, tuple[str, ...]] = {}

    def _coset_reps(self) -> list[int]:
        """Representatives of Clifford / <S>, shortest word first."""
        groups: dict[tuple, int] = {}
        for idx in sorted(range(len(self.clifford_words)), key=lambda i: len(self.clifford_words[i])):
            a, b = self.a[idx], self.b[idx]
            cls = []
            for k in range(4):
                da, db = _su2(word_matrix(("S",) * k))
                ca, cb = _mul(a, b, da, db)
                cls.append(tuple(_hash_keys(_quat(ca, cb))[0]))
            key = min(cls)
            groups.setdefault(key, idx)
        return sorted(groups.values())

    @property
    def depth(self) -> int:
        return len(self.level_bounds) - 1

    def grow(self, depth: int) -> None:
        ta, tb = _su2(sc.FIXED_MATRICES["T"])
        while self.depth < depth:
            lo, hi = self.level_bounds[-1]
            wa, wb = _mul(ta, tb, self.a[lo:hi], self.b[lo:hi])
            cand_a, cand_b, cand_parent, cand_tail = [], [], [], []
            for r in self._reps:
                ca, cb = _mul(self.a[r], self.b[r], wa, wb)
                cand_a.append(ca)
                cand_b.append(cb)
                cand_parent.append(np.arange(lo, hi))
                cand_tail.append(np.full(hi - lo, r))
            ca = np.concatenate(cand_a)
            cb = np.concatenate(cand_b)
            ckeys = _hash_keys(_quat(ca, cb))
            allkeys = np.concatenate([self.keys, ckeys])
            _, first = np.unique(allkeys, axis=0, return_index=True)
            new = np.sort(first[first >= len(self.keys)] - len(self.keys))
            start = len(self.a)
            self.a = np.concatenate([self.a, ca[new]])
            self.b = np.concatenate([self.b, cb[new]])
            self.keys = np.concatenate([self.keys, ckeys[new]])
            self.parent = np.concatenate([self.parent, np.concatenate(cand_parent)[new]])
            self.tail = np.concatenate([self.tail, np.concatenate(cand_tail)[new]])
            self.tcount = np.concatenate([self.tcount, np.full(len(new), self.depth + 1)])
            self.level_bounds.append((start, len(self.a)))

    def tree(self, depth: int) -> tuple[cKDTree, int]:
        if depth not in self._trees:
            self.grow(depth)
            end = self.level_bounds[depth][1]
            q = _quat(self.a[:end], self.b[:end])
            self._trees[depth] = (cKDTree(np.concatenate([q, -q])), end)
        return self._trees[depth]

    def word(self, idx: int) -> tuple[str, ...]:
        idx = int(idx)
        if idx in self._words:
            return self._words[idx]
        parts = []
        while self.parent[idx] >= 0:
            parts.append(("T",) + self.clifford_words[self.tail[idx]])
            idx = int(self.parent[idx])
        w = self.clifford_words[idx]
        for p in reversed(parts):
            w = w + p
        return w


TREE_DEPTH_CAP = 13


def _cache_dir() -> str | None:
    d = os.environ.get("QHEQNN_CACHE_DIR")
    if d == "":
        return None
    return d or os.path.join(os.path.expanduser("~"), ".cache", "qheqnn")


def _load_tables(tab: _Tables, depth: int) -> bool:
    d = _cache_dir()
    path = d and os.path.join(d, f"clifford_t_table_{depth}.npz")
    if not path or not os.path.exists(path):
        return False
    try:
        z = np.load(path)
        bounds = [tuple(map(int, r)) for r in z["bounds"]]
        a, b = z["a"], z["b"]
    except (OSError, KeyError, ValueError):
        return False
    if len(bounds) != depth + 1 or bounds[0][1] != len(tab.clifford_words):
        return False
    tab.a, tab.b = a, b
    tab.tcount, tab.parent, tab.tail = z["tcount"], z["parent"], z["tail"]
    tab.level_bounds = bounds
    tab.keys = _hash_keys(_quat(a, b))
    return True


def _save_tables(tab: _Tables) -> None:
    d = _cache_dir()
    if not d:
        return
    try:
        os.makedirs(d, exist_ok=True)
        path = os.path.join(d, f"clifford_t_table_{tab.depth}.npz")
        tmp = path + f".{os.getpid()}.tmp.npz"
        np.savez(tmp, a=tab.a, b=tab.b, tcount=tab.tcount, parent=tab.parent,
                 tail=tab.tail, bounds=np.array(tab.level_bounds))
        os.replace(tmp, path)
    except OSError:
        pass


_TABLES: _Tables | None = None
_TABLE_LOCK = threading.Lock()


def _tables(depth: int) -> _Tables:
    global _TABLES
    with _TABLE_LOCK:
        if _TABLES is None:
            _TABLES = _Tables()
        if _TABLES.depth < depth:
            if not _load_tables(_TABLES, depth):
                _TABLES.grow(depth)
                _save_tables(_TABLES)
        _TABLES.tree(depth)
        return _TABLES


_SYLLABLES = (("T", "H"), ("T", "H", "S"))  # operators H.T and S.H.T, circuit order


class _NormalForms:
    """Clifford+T unitaries modulo a trailing Clifford, one per coset.

    These are the normal forms ``(T | 1) (HT | SHT)^m`` read as operators.
    ``bare[j]`` holds ``(HT | SHT)^j``; the forms with a leading T are
    ``T @ bare[j - 1]``.  Every unitary with minimal T-count j is
    ``N @ C`` for exactly one such N of T-count j and a Clifford C.
    """

    def __init__(self):
        self.bare = [(np.array([1.0 + 0j]), np.array([0.0 + 0j]))]
        self.syl = [_su2(word_matrix(s)) for s in _SYLLABLES]

    def grow(self, depth: int) -> None:
        while len(self.bare) <= depth:
            pa, pb = self.bare[-1]
            parts = [_mul(pa, pb, sa, sb) for sa, sb in self.syl]
            self.bare.append((np.concatenate([p[0] for p in parts]),
                              np.concatenate([p[1] for p in parts])))

    def level(self, j: int):
        """(a, b, ids) of all forms with T-count j; ids encode lead and index."""
        self.grow(j)
        a, b = self.bare[j]
        if j == 0:
            return a, b, np.zeros(1, dtype=np.int64)
        ta, tb = _su2(sc.FIXED_MATRICES["T"])
        la, lb = _mul(ta, tb, *self.bare[j - 1])
        ids = np.concatenate([-1 - np.arange(len(la)), np.arange(len(a))])
        return np.concatenate([la, a]), np.concatenate([lb, b]), ids

    def word(self, j: int, ident: int) -> tuple[str, ...]:
        if ident < 0:
            return self._bare_word(j - 1, -1 - ident) + ("T",)
        return self._bare_word(j, ident)

    def _bare_word(self, j: int, idx: int) -> tuple[str, ...]:
        w: tuple[str, ...] = ()
        while j > 0:
            half = 1 << (j - 1)
            choice, idx = divmod(idx, half)
            w = w + _SYLLABLES[choice]
            j -= 1
        # bare[j] = bare[j-1] @ s: the newest syllable is applied first
        return w


_FORMS = _NormalForms()


def _split(max_depth: int) -> tuple[int, int]:
    tree_depth = min(max_depth // 2, TREE_DEPTH_CAP)
    return tree_depth, max_depth - tree_depth


def _search(theta: float, epsilon: float, max_depth: int) -> tuple[str, ...]:
    """Minimal-T word W with d(W, RZ(theta)) <= epsilon, as W = N @ A.

    A comes from the full table (KD-tree), N from the normal forms.
    """
    tree_depth, form_depth = _split(max_depth)
    tab = _tables(tree_depth)
    tree, size = tab.tree(tree_depth)
    ra, rb = _su2(sc.rz_matrix(theta))
    radius = math.sqrt(2.0) * epsilon
    best_nn = math.inf
    for level in range(form_depth + 1):
        na, nb, ids = _FORMS.level(level)
        # A ~= N^dag R
        xa, xb = _mul(np.conj(na), -nb, ra, rb)
        pts = _quat(xa, xb)
        dist, _ = tree.query(pts, k=1, distance_upper_bound=radius)
        rows = np.flatnonzero(np.isfinite(dist))
        if not len(rows):
            dist, _ = tree.query(pts, k=1)
            best_nn = min(best_nn, float(np.min(dist)) / math.sqrt(2.0))
            continue
        hits = tree.query_ball_point(pts[rows], radius)
        lens = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
        i_n = np.repeat(rows, lens)
        i_a = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]) % size
        total_t = level + tab.tcount[i_a]
        pa, pb = _mul(na[i_n], nb[i_n], tab.a[i_a], tab.b[i_a])
        overlap = np.abs(np.real(np.conj(pa) * ra + np.conj(pb) * rb))
        for t in np.unique(total_t):
            sel = np.flatnonzero(total_t == t)
            sel = sel[np.argsort(-overlap[sel], kind="stable")[:256]]
            scored = []
            for j in sel:
                w = simplify_word(tab.word(i_a[j]) + _FORMS.word(level, int(ids[i_n[j]])))
                d = word_distance(w, theta)
                if d <= epsilon:
                    scored.append((w.count("T"), len(w), d, w))
            if scored:
                scored.sort(key=lambda s: s[:3])
                return scored[0][3]
    raise SynthesisError(
        f"no word within {epsilon:g} of RZ({theta:.6g}) up to T-count {tree_depth + form_depth}",
        best_distance=best_nn,
    )


@lru_cache(maxsize=8192)
def _residue_word(residue_q: int, epsilon: float, max_depth: int) -> tuple[str, ...]:
    return _search(residue_q * 1e-9, epsilon, max_depth)


def _fold(theta: float) -> tuple[int, float]:
    """theta = k*pi/4 + r with r in [-pi/8, pi/8]."""
    t = math.fmod(theta, 2 * math.pi)
    if t < 0:
        t += 2 * math.pi
    k = int(round(t / PI4))
    return k % 8, t - k * PI4


def dyadic_word(theta: float, tol: float = 1e-12) -> tuple[str, ...] | None:
    k, r = _fold(theta)
    if abs(r) <= tol:
        return _DYADIC_WORDS[k]
    return None


def synthesize_rz(theta: float, config: SynthConfig = SynthConfig()) -> RzWord:
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    return _synthesize_cached(float(theta), config)


@lru_cache(maxsize=65536)
def _synthesize_cached(theta: float, config: SynthConfig) -> RzWord:
    exact = dyadic_word(theta)
    if exact is not None:
        return RzWord(theta, exact, word_distance(exact, theta))
    if config.backend == "exact_dyadic":
        raise SynthesisError(f"RZ({theta:.6g}) is not a multiple of pi/4")
    k, r = _fold(theta)
    # quantising the residue moves the target by < 5e-10; keep that as margin
    core = _residue_word(int(round(abs(r) * 1e9)), config.epsilon - 1e-9, config.max_search_depth)
    gates = (("X",) + core + ("X",)) if r < 0 else core
    gates = simplify_word(gates + _DYADIC_WORDS[k])
    d = word_distance(gates, theta)
    if d > config.epsilon:
        raise SynthesisError(f"word misses RZ({theta:.6g}) by {d:.3g}", best_distance=d)
    return RzWord(theta, gates, d)


def clear_cache() -> None:
    _residue_word.cache_clear()
    _synthesize_cached.cache_clear()
    _word_gates.cache_clear()


@lru_cache(maxsize=65536)
def _word_gates(word: tuple[str, ...], qubit: int) -> tuple[Gate, ...]:
    return tuple(Gate(k, (qubit,)) for k in word)


# ---------------------------------------------------------------------------
# rewriting

def decompose_controlled(control: int, target: int, theta_z: float, theta_x: float) -> list[Gate]:
    """Controlled-RZ(theta_z) followed by anti-controlled-RX(theta_x), in four RZ."""
    if control == target:
        raise ValueError("control and target must differ")
    return _crz(control, target, theta_z) + _acrx(control, target, theta_x)


def _crz(c: int, t: int, theta: float) -> list[Gate]:
    return [
        Gate("CNOT", (c, t)),
        Gate("RZ", (t,), -theta / 2),
        Gate("CNOT", (c, t)),
        Gate("RZ", (t,), theta / 2),
    ]


def _acrx(c: int, t: int, theta: float) -> list[Gate]:
    return [Gate("X", (c,)), Gate("H", (t,))] + _crz(c, t, theta) + [Gate("H", (t,)), Gate("X", (c,))]


def _rewrite_gate(g: Gate) -> list[Gate]:
    q = g.qubits
    if g.kind == "RX":
        return [Gate("H", q), Gate("RZ", q, g.angle), Gate("H", q)]
    if g.kind == "RY":
        # RY(t) = S H RZ(t) H S Z as an operator product
        return [Gate("Z", q), Gate("S", q), Gate("H", q), Gate("RZ", q, g.angle), Gate("H", q), Gate("S", q)]
    if g.kind == "CRZ":
        return _crz(q[0], q[1], g.angle)
    if g.kind == "ACRX":
        return _acrx(q[0], q[1], g.angle)
    if g.kind == "Sdg":
        return [Gate("Z", q), Gate("S", q)]
    if g.kind == "Tdg":
        return [Gate("Z", q), Gate("S", q), Gate("T", q)]
    if g.kind == "SWAP":
        a, b = q
        return [Gate("CNOT", (a, b)), Gate("CNOT", (b, a)), Gate("CNOT", (a, b))]
    return [g]


def rewrite_rotations(circuit: Circuit) -> Circuit:
    """Lower every gate to RZ plus {X, Z, H, S, T, CNOT}."""
    out = []
    for g in circuit.gates:
        out.extend(_rewrite_gate(g))
    return Circuit(circuit.n_qubits, out)


def transpile(circuit: Circuit, total_budget: float | None = None, config: SynthConfig = SynthConfig()):
    """Clifford+T circuit plus a :class:`TranspileReport`.

    With a budget, each approximated RZ gets ``total_budget / count``; by the
    triangle inequality the composite is then within the budget of the input.
    Without one, ``config.epsilon`` is used per gate.
    """
    rewritten = rewrite_rotations(circuit)
    rz = [g for g in rewritten.gates if g.kind == "RZ"]
    approx = sum(1 for g in rz if dyadic_word(g.angle) is None)
    if total_budget is not None and approx:
        per_gate = min(0.5, total_budget / approx)
    else:
        per_gate = config.epsilon
    cfg = SynthConfig(per_gate, config.backend, config.max_search_depth)
    out: list[Gate] = []
    report = TranspileReport(len(rz), 0, per_gate, total_budget, approximate_count=approx)
    for g in rewritten.gates:
        if g.kind != "RZ":
            out.append(g)
            if g.kind == "T":
                report.native_t_count += 1
            continue
        word = synthesize_rz(g.angle, cfg)
        report.per_rotation_t.append(word.t_count)
        report.per_rotation_distance.append(word.distance)
        out.extend(_word_gates(word.gates, g.qubits[0]))
    report.t_count = sum(report.per_rotation_t) + report.native_t_count
    return Circuit(circuit.n_qubits, out), report


def predicted_rz_count(n: int, r_c: int, r_p: int) -> int:
    """R_C (2n - 3) + R_P (n - 1) for an n-qubit QCNN."""
    if n < 2 or n & (n - 1):
        raise ValueError(f"n must be a power of two >= 2, got {n}")
    return r_c * (2 * n - 3) + r_p * (n - 1)


def strip_paulis(circuit: Circuit) -> Circuit:
    """Drop every X and Z: what a client can rebuild from the key-update program."""
    return Circuit(circuit.n_qubits, [g for g in circuit.gates if g.kind not in ("X", "Z")])
