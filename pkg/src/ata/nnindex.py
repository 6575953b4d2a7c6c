"""Exact 1-nearest-neighbour Euclidean novelty scoring.

Backed by a KD-tree, which prunes but never approximates: every query answers
exactly what an exhaustive scan would. The raw point matrix is what gets
persisted; the tree is rebuilt on load.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .ataf import read_tensor, write_tensor
from .errors import DataError


class NNIndex:
    """Immutable index over the reduced detector-split features."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1:
            raise DataError(f"index needs a non-empty 2-d point set, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise DataError("non-finite point in index")
        self.points = points
        self._tree = cKDTree(points)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def build_index(Z: np.ndarray) -> NNIndex:
    return NNIndex(Z)


def score_knn(index: NNIndex, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (index.dim,):
        raise DataError(f"query has shape {x.shape}, index dimension is {index.dim}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite query")
    dist, _ = index._tree.query(x, k=1)
    return float(dist)


def score_knn_batch(index: NNIndex, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != index.dim:
        raise DataError(f"queries have shape {X.shape}, index dimension is {index.dim}")
    dists, _ = index._tree.query(X, k=1)
    return np.asarray(dists, dtype=np.float64)


def save_index(index: NNIndex, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "points.ataf", index.points)


def load_index(in_dir: str | Path) -> NNIndex:
    return NNIndex(read_tensor(Path(in_dir) / "points.ataf").astype(np.float64))
