"""Synthetic domain-shift datasets, CSV I/O, per-sample standardisation and
two-stream mini-batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

SOURCE, TARGET = "source", "target"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None  # one-hot, n x K
    domain: str = SOURCE
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D array")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.float64)
            if y.shape[0] != x.shape[0]:
                raise ValueError("labels and features disagree on sample count")
            if y.ndim != 2 or not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
                raise ValueError("labels must be one-hot rows")
            object.__setattr__(self, "labels", y)
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain {self.domain!r}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_classes(self) -> int | None:
        return None if self.labels is None else self.labels.shape[1]

    @property
    def class_index(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"dataset {self.name!r} has no labels")
        return np.argmax(self.labels, axis=1)

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx],
                       labels=None if self.labels is None else self.labels[idx])

    def unlabeled(self) -> "Dataset":
        return replace(self, labels=None)


@dataclass(frozen=True)
class ShiftSpec:
    rotation: float = 0.0  # radians, 2-D only
    translation: tuple = ()
    scale: tuple = ()
    permutation: tuple = ()  # new class index for each old class
    noise_std: float = 0.0

    def __post_init__(self):
        if any(s == 0 for s in self.scale):
            raise ValueError("scales must be nonzero")
        if self.permutation and sorted(self.permutation) != list(range(len(self.permutation))):
            raise ValueError("permutation must be a bijection of 0..K-1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


def _onehot(idx: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[np.asarray(idx, dtype=int)]


def gen_moons(n: int, noise_std: float = 0.1, seed: int = 0, name: str = "moons") -> Dataset:
    """Two interleaved half circles; class 0 on the upper unit half circle.

    Class 1 is the lower half circle centred at (1, 0.5).  With odd ``n`` the
    extra sample goes to class 0.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    x = np.vstack([upper, lower])
    if noise_std > 0:
        x = x + rng.normal(0.0, noise_std, x.shape)
    y = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    order = rng.permutation(n)
    return Dataset(x[order], _onehot(y[order], 2), SOURCE, name)


def simplex_means(k: int, d: int, separation: float) -> np.ndarray:
    """K points with all pairwise distances equal to ``separation`` (needs d >= K-1)."""
    if d < k - 1:
        raise ValueError(f"a {k}-class simplex needs d >= {k - 1}")
    centred = np.eye(k) - 1.0 / k
    # orthonormal coordinates of the centred simplex in k-1 dims
    u, s, _ = np.linalg.svd(centred)
    coords = centred @ u[:, : k - 1]
    coords *= separation / np.sqrt(2.0)
    out = np.zeros((k, d))
    out[:, : k - 1] = coords
    return out


def gen_blobs(n: int, k: int, d: int, separation: float, seed: int = 0, noise_std: float = 1.0,
              name: str = "blobs") -> Dataset:
    """K isotropic Gaussian clusters with means pairwise ``separation`` apart."""
    if k < 2 or n < k or separation <= 0 or noise_std < 0:
        raise ValueError("invalid blob parameters")
    rng = np.random.default_rng(seed)
    means = simplex_means(k, d, separation)
    y = np.arange(n) % k
    rng.shuffle(y)
    x = means[y] + rng.normal(0.0, noise_std, (n, d))
    return Dataset(x, _onehot(y, k), SOURCE, name)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def apply_shift(ds: Dataset, spec: ShiftSpec, seed: int = 0, name: str | None = None) -> Dataset:
    """Scale, rotate about the origin, translate, add noise, permute labels."""
    x = ds.features
    d = x.shape[1]
    if spec.scale:
        if len(spec.scale) != d:
            raise ValueError(f"scale has {len(spec.scale)} entries for {d}-D features")
        x = x * np.asarray(spec.scale, dtype=np.float64)
    if spec.rotation != 0.0:
        if d != 2:
            raise ValueError("rotation is only defined for 2-D features")
        x = x @ rotation_matrix(spec.rotation).T
    if spec.translation:
        if len(spec.translation) != d:
            raise ValueError(f"translation has {len(spec.translation)} entries for {d}-D features")
        x = x + np.asarray(spec.translation, dtype=np.float64)
    if spec.noise_std > 0:
        x = x + np.random.default_rng(seed).normal(0.0, spec.noise_std, x.shape)
    y = ds.labels
    if spec.permutation and y is not None:
        if len(spec.permutation) != y.shape[1]:
            raise ValueError("permutation length must equal the class count")
        y = y[:, np.argsort(spec.permutation)]
    return replace(ds, features=x, labels=y, domain=TARGET,
                   name=name if name is not None else f"{ds.name}-shifted")


def standardize(ds: Dataset) -> Dataset:
    """Per-row zero mean / unit variance; rows with variance < 1e-12 become zeros."""
    x = ds.features
    if x.shape[1] < 2:
        raise ValueError("per-sample standardisation needs at least two features")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    ok = var >= 1e-12
    out = np.where(ok, (x - mu) / np.sqrt(np.where(ok, var, 1.0)), 0.0)
    return replace(ds, features=out)


def batches(src: Dataset, tgt: Dataset, batch_size: int, seed: int = 0) -> Iterator[tuple[Dataset, Dataset]]:
    """Endless stream of (source, target) mini-batches.

    Each domain runs its own shuffled epochs; a batch that would cross an
    epoch boundary is filled from the next permutation, so every yielded
    batch has ``batch_size`` rows and every epoch visits each row once.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("empty dataset")
    rng_s, rng_t = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    def index_stream(n, rng):
        while True:
            yield from rng.permutation(n)

    it_s, it_t = index_stream(len(src), rng_s), index_stream(len(tgt), rng_t)
    while True:
        i_s = np.fromiter((next(it_s) for _ in range(batch_size)), int, batch_size)
        i_t = np.fromiter((next(it_t) for _ in range(batch_size)), int, batch_size)
        yield src.subset(i_s), tgt.subset(i_t)


def save_csv(ds: Dataset, path) -> None:
    """Features then (optionally) the integer class index; 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        labels = None if ds.labels is None else ds.class_index
        for i, row in enumerate(ds.features):
            cells = [format(v, ".17g") for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            w.writerow(cells)


def load_csv(path, has_labels: bool, k: int | None = None, domain: str = SOURCE,
             name: str | None = None) -> Dataset:
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, cells in enumerate(csv.reader(fh), start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            try:
                vals = [float(c) for c in (cells[:-1] if has_labels else cells)]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric cell in {cells!r}") from None
            if has_labels:
                try:
                    lab = int(cells[-1])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: label {cells[-1]!r} is not an integer") from None
                if k is not None and not 0 <= lab < k:
                    raise ValueError(f"{path}:{lineno}: label {lab} outside [0, {k})")
                labels.append(lab)
            if rows and len(vals) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} features, got {len(vals)}")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    y = None
    if has_labels:
        kk = k if k is not None else max(labels) + 1
        y = _onehot(np.array(labels), kk)
    return Dataset(np.array(rows), y, domain, name if name is not None else str(path))
