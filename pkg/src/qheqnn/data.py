"""Datasets and preprocessing: CSV and IDX loaders, resizing, PCA, splits."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed input; the message names the row, column or byte offset."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a matrix")
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], dict(self.meta))

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.labels, dict(self.meta))


# ---------------------------------------------------------------------------
# loaders

def load_csv(path) -> Dataset:
    """Read ``label,f0,f1,...`` with binary labels."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "label" or len(header) < 2:
        raise DataError(f"{path}: header must start with 'label' followed by feature columns")
    width = len(header)
    feats, labels = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {width}")
        lab = row[0].strip()
        if lab not in ("0", "1"):
            raise DataError(f"{path}: row {r} has label {lab!r}, expected 0 or 1")
        vals = []
        for c, cell in enumerate(row[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r} column {c} is not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {r} column {c} is not finite")
            vals.append(v)
        labels.append(int(lab))
        feats.append(vals)
    if not labels:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels), {"source": str(path)})


def bundled_path(name: str = "digits01.csv") -> Path:
    return Path(str(resources.files("qheqnn") / "datasets" / name))


def load_digits01() -> Dataset:
    """Bundled 8x8 grayscale digits 0 and 1 (values 0..16), 360 rows."""
    ds = load_csv(bundled_path())
    ds.meta.update(source="bundled digits01.csv", shape=(8, 8))
    return ds


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise DataError(f"{path}: truncated at offset {len(blob)} (no magic)")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise DataError(f"{path}: unexpected magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    ndim = got & 0xFF
    end = 4 + 4 * ndim
    if len(blob) < end:
        raise DataError(f"{path}: truncated header at offset {len(blob)}")
    dims = struct.unpack(">" + "I" * ndim, blob[4:end])
    size = int(np.prod(dims))
    if len(blob) < end + size:
        raise DataError(f"{path}: truncated payload at offset {len(blob)}, expected {end + size} bytes")
    data = np.frombuffer(blob, dtype=np.uint8, count=size, offset=end)
    return dims, data.reshape(dims)


def load_idx(images_path, labels_path, keep=(0, 1)) -> Dataset:
    """MNIST-style IDX pair filtered to two classes; pixels scaled to [0, 1].

    The first class in ``keep`` becomes label 0 and the second label 1.
    """
    keep = tuple(int(k) for k in keep)
    if len(keep) != 2:
        raise DataError("keep must name exactly two classes")
    idims, images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    ldims, labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise DataError(f"{idims[0]} images but {ldims[0]} labels")
    mask = np.isin(labels, keep)
    feats = images[mask].reshape(int(mask.sum()), -1).astype(float) / 255.0
    lab = (labels[mask] == keep[1]).astype(np.int64)
    return Dataset(feats, lab, {"source": str(images_path), "shape": tuple(idims[1:]), "classes": keep})


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Reference writer (uint8 payload), used for fixtures."""
    array = np.asarray(array, dtype=np.uint8)
    head = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(head + array.tobytes())


# ---------------------------------------------------------------------------
# images

def resize_bilinear(image, shape=(16, 16)) -> np.ndarray:
    """Bilinear resize with corner pixels aligned; output clamped to [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or min(img.shape) < 2:
        raise DataError(f"image must be 2-D with sides >= 2, got {img.shape}")
    th, tw = shape
    if th < 1 or tw < 1:
        raise DataError(f"bad target shape {shape}")
    h, w = img.shape
    ys = np.linspace(0, h - 1, th)
    xs = np.linspace(0, w - 1, tw)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[y0][:, x0]
    b = img[y0][:, x0 + 1]
    c = img[y0 + 1][:, x0]
    d = img[y0 + 1][:, x0 + 1]
    out = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PCA

def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and column eigenvectors of a symmetric matrix.

    Cyclic Jacobi: sweep all off-diagonal pairs, zeroing each with a plane
    rotation, until the off-diagonal norm is below ``tol`` times the total.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix must be square and symmetric")
    v = np.eye(n)
    scale = np.linalg.norm(a)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * max(scale, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1 + tau * tau))
                c = 1 / math.sqrt(1 + t * t)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    variances: np.ndarray


def pca_fit(features, k: int) -> PcaModel:
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise DataError("PCA needs a matrix with at least 2 rows")
    if not 1 <= k <= X.shape[1]:
        raise DataError(f"k={k} out of range for {X.shape[1]} features")
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    w, v = jacobi_eigh(cov)
    comps = v[:, :k].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    return PcaModel(mean, comps, np.maximum(w[:k], 0.0))


def pca_transform(model: PcaModel, features) -> np.ndarray:
    return (np.asarray(features, dtype=float) - model.mean) @ model.components.T


def normalize_minmax(features, low: float = 0.0, high: float = math.pi) -> np.ndarray:
    """Column-wise affine map onto [low, high]; constant columns go to the midpoint."""
    X = np.asarray(features, dtype=float)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    out = np.empty_like(X)
    flat = span <= 0
    ok = ~flat
    out[:, ok] = low + (X[:, ok] - lo[ok]) / span[ok] * (high - low)
    out[:, ok] = np.clip(out[:, ok], low, high)
    out[:, flat] = (low + high) / 2
    return out


def split(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Label-stratified shuffle split."""
    if len(dataset) < 2:
        raise DataError("need at least 2 samples to split")
    if not 0 < ratio < 1:
        raise DataError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in (0, 1):
        idx = np.flatnonzero(dataset.labels == c)
        if not len(idx):
            raise DataError(f"class {c} is absent")
        idx = rng.permutation(idx)
        cut = int(round(ratio * len(idx)))
        if cut == len(idx) or cut == 0:
            raise DataError(f"ratio {ratio} leaves an empty part for class {c}")
        train.append(idx[:cut])
        test.append(idx[cut:])
    tr = np.sort(np.concatenate(train))
    te = np.sort(np.concatenate(test))
    return dataset.subset(tr), dataset.subset(te)


def synth_blobs(n_per_class: int, centers=((math.pi / 4, math.pi / 4), (3 * math.pi / 4, 3 * math.pi / 4)),
                sigma: float = 0.3, seed: int = 0) -> Dataset:
    """Two Gaussian clusters clamped to [0, pi]^d; label c sits at centers[c]."""
    if not sigma >= 0:
        raise DataError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    feats = np.concatenate([c + sigma * rng.standard_normal((n_per_class, centers.shape[1])) for c in centers])
    labels = np.repeat(np.arange(len(centers)), n_per_class)
    return Dataset(np.clip(feats, 0.0, math.pi), labels, {"source": "synth_blobs", "sigma": sigma})


def pca2d_pipeline(dataset: Dataset, k: int = 2) -> Dataset:
    """PCA to k dims, then per-column min-max onto [0, pi]."""
    model = pca_fit(dataset.features, k)
    return dataset.with_features(normalize_minmax(pca_transform(model, dataset.features)))


def pad_amplitudes(features, n: int) -> np.ndarray:
    """Zero-pad each row to 2^n entries."""
    X = np.asarray(features, dtype=float)
    dim = 1 << n
    if X.shape[1] > dim:
        raise DataError(f"{X.shape[1]} features exceed 2^{n}")
    out = np.zeros((len(X), dim))
    out[:, : X.shape[1]] = X
    return out
