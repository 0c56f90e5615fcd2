"""Lloyd's k-means with k-means++ seeding, and the versioned cluster-set file format."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import as_rng
from .exceptions import ConfigError, DataError, ShapeError

CLUSTERSET_FORMAT_VERSION = 1
SOURCES = ("text", "image")


@dataclass
class ClusterSet:
    centers: np.ndarray
    source: str = "image"
    n_iter: int = 0
    inertia: float = float("nan")
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ShapeError("centers must be a non-empty (k, d) array")
        if not np.all(np.isfinite(self.centers)):
            raise DataError("centers must be finite")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got {self.source!r}")

    @property
    def k(self):
        return self.centers.shape[0]

    @property
    def d(self):
        return self.centers.shape[1]

    def to_text(self):
        lines = [
            f"clusterset {CLUSTERSET_FORMAT_VERSION}",
            f"d {self.d}",
            f"k {self.k}",
            f"source {self.source}",
            f"iterations {self.n_iter}",
            f"inertia {float(self.inertia)!r}",
        ]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.centers]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        header = {}
        for line in lines[:6]:
            key, _, value = line.partition(" ")
            header[key] = value
        if header.get("clusterset") != str(CLUSTERSET_FORMAT_VERSION):
            raise DataError(f"unsupported cluster-set version {header.get('clusterset')!r}")
        d, k = int(header["d"]), int(header["k"])
        rows = [list(map(float, line.split())) for line in lines[6 : 6 + k]]
        centers = np.asarray(rows, dtype=np.float64)
        if centers.shape != (k, d):
            raise DataError(f"expected {k}x{d} centers, read {centers.shape}")
        return cls(centers, header["source"], int(header["iterations"]), float(header["inertia"]))

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


def _sq_dists(X, centers):
    return ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def inertia(X, centers):
    return float(_sq_dists(X, centers).min(axis=1).sum())


def kmeans_plusplus(X, k, rng):
    """D^2-weighted seeding. Already chosen points have weight 0, so seeds are distinct."""
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            break
        idx = rng.choice(n, p=closest / total)
        centers.append(X[idx])
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def lloyd(X, centers, max_iter=300, tol=0.0):
    """Run Lloyd iterations from ``centers``; returns (centers, n_iter, inertia history).

    ``history[0]`` is the inertia of the seeds; each later entry follows one
    update. An empty cluster is moved onto the point farthest from its center,
    which cannot increase the inertia.
    """
    centers = centers.copy()
    d2 = _sq_dists(X, centers)
    labels = d2.argmin(axis=1)
    history = [float(d2.min(axis=1).sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
        counts = np.bincount(labels, minlength=centers.shape[0])
        for j in np.flatnonzero(counts == 0):
            far = d2[np.arange(X.shape[0]), labels].argmax()
            new[j] = X[far]
            d2[far] = 0.0
        shift = float(((new - centers) ** 2).sum())
        centers = new
        d2 = _sq_dists(X, centers)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2.min(axis=1).sum()))
        if np.array_equal(new_labels, labels) and shift <= tol:
            break
        labels = new_labels
    return centers, n_iter, history


def fit_kmeans(vectors, k, rng=None, n_init=10, max_iter=300, source="image"):
    """Fit ``k`` centers; the best of ``n_init`` seeded runs by final inertia is kept."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected (n, d) vectors, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("vectors must be finite")
    n_distinct = np.unique(X, axis=0).shape[0]
    if not 1 <= k <= n_distinct:
        raise ConfigError(f"k={k} must lie in [1, {n_distinct}] (number of distinct points)")
    rng = as_rng(rng)
    best = None
    for _ in range(max(1, n_init)):
        seeds = kmeans_plusplus(X, k, rng)
        centers, n_iter, history = lloyd(X, seeds, max_iter=max_iter)
        if best is None or history[-1] < best[2][-1]:
            best = (centers, n_iter, history)
    centers, n_iter, history = best
    return ClusterSet(centers, source, n_iter, history[-1], history)


def assign(X, clusters):
    return _sq_dists(np.asarray(X, dtype=np.float64), clusters.centers).argmin(axis=1)
