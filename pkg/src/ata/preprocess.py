"""Standardization and PCA projection.

Conventions (fixed):
    - standardizer uses the population std (divide by N); zero-variance
      dimensions get std = 1 and are recorded
    - PCA covariance uses the sample convention (divide by N-1)
    - PCA is computed via SVD of the centered matrix; the dense eigensolve of
      the sample covariance is kept as a test oracle only
    - component signs are canonicalized (largest-magnitude entry positive)

The retained dimension is min(max_dims, smallest m reaching the cumulative
variance target, numerical rank of the centered data, N-1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ataf import read_tensor, write_tensor
from .errors import DataError


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    zero_variance_dims: list[int] = field(default_factory=list)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean) / self.std


def fit_standardizer(X: np.ndarray) -> Standardizer:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError(f"need at least 2 samples to standardize, got shape {X.shape}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)  # population convention
    zero = np.where(std == 0.0)[0]
    std = std.copy()
    std[zero] = 1.0
    return Standardizer(mean=mean, std=std, zero_variance_dims=[int(i) for i in zero])


@dataclass
class PCAModel:
    components: np.ndarray          # D' x D, orthonormal rows
    explained_variance: np.ndarray  # D', descending
    center: np.ndarray              # D
    var_target: float = 0.95
    total_variance: float = 0.0

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def variance_ratio(self) -> float:
        if self.total_variance == 0:
            return 0.0
        return float(self.explained_variance.sum() / self.total_variance)

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.components.shape[1]:
            raise DataError(
                f"dimension mismatch: got {x.shape[-1]}, model expects {self.components.shape[1]}"
            )
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite input to project")
        return (x - self.center) @ self.components.T


def _canonical_signs(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for i in range(out.shape[0]):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def fit_pca(
    X: np.ndarray,
    var_target: float = 0.95,
    max_dims: int = 64,
    seed: int | None = None,
) -> PCAModel:
    """Fit PCA on an (already standardized) matrix. Deterministic; seed is recorded only."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError(f"need at least 2 samples for PCA, got shape {X.shape}")
    if not (0.0 < var_target <= 1.0):
        raise DataError(f"var_target must be in (0, 1], got {var_target}")
    n, d = X.shape
    center = X.mean(axis=0)
    Xc = X - center
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    if S[0] == 0.0:
        raise DataError("zero variance")
    variances = S**2 / (n - 1)
    total = float(variances.sum())
    tol = S[0] * max(n, d) * np.finfo(np.float64).eps
    rank = int(np.sum(S > tol))
    ratios = np.cumsum(variances) / total
    m = int(np.searchsorted(ratios, var_target - 1e-12) + 1)
    n_comp = max(1, min(max_dims, m, rank, n - 1))
    return PCAModel(
        components=_canonical_signs(Vt[:n_comp]),
        explained_variance=variances[:n_comp].copy(),
        center=center,
        var_target=var_target,
        total_variance=total,
    )


def save_preprocess(standardizer: Standardizer, pca: PCAModel, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "standardizer.ataf", np.stack([standardizer.mean, standardizer.std]))
    write_tensor(out / "pca_components.ataf", pca.components)
    write_tensor(out / "pca_variance.ataf", pca.explained_variance)
    write_tensor(out / "pca_center.ataf", pca.center)
    meta = {
        "zero_variance_dims": standardizer.zero_variance_dims,
        "var_target": pca.var_target,
        "n_components": pca.n_components,
        "total_variance": pca.total_variance,
        "std_convention": "population",
        "pca_convention": "sample",
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def load_preprocess(in_dir: str | Path) -> tuple[Standardizer, PCAModel]:
    src = Path(in_dir)
    ms = read_tensor(src / "standardizer.ataf").astype(np.float64)
    meta = json.loads((src / "meta.json").read_text())
    standardizer = Standardizer(
        mean=ms[0], std=ms[1], zero_variance_dims=list(meta["zero_variance_dims"])
    )
    pca = PCAModel(
        components=read_tensor(src / "pca_components.ataf").astype(np.float64),
        explained_variance=read_tensor(src / "pca_variance.ataf").astype(np.float64),
        center=read_tensor(src / "pca_center.ataf").astype(np.float64),
        var_target=float(meta["var_target"]),
        total_variance=float(meta["total_variance"]),
    )
    return standardizer, pca
