"""Gaussian mixture fitting with covariance shrinkage and min-Mahalanobis scoring.

The mixture is fitted by EM with k-means++ seeding, several random starts, and
a shrinkage step applied to every M-step covariance so the triangular
factorization never fails mid-run. The novelty score of a point is the minimum
Mahalanobis distance over components; mixture weights do not enter the score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .ataf import read_tensor, write_tensor
from .errors import DataError

CONVERGENCE_TOL = 1e-4
MAX_ITERATIONS = 200
DEGENERATE_WEIGHT = 1e-6
RESPONSIBILITY_FLOOR = 1e-300


@dataclass
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray  # lower-triangular factor of cov
    weight: float


@dataclass
class GMMModel:
    components: list[GaussianComponent]
    shrinkage: float
    fit_meta: dict = field(default_factory=dict)

    @property
    def n_components(self) -> int:
        return len(self.components)


def shrink_covariance(cov_emp: np.ndarray, rho: float) -> np.ndarray:
    """Blend the empirical covariance with a scaled identity of equal trace."""
    cov_emp = np.asarray(cov_emp, dtype=np.float64)
    if cov_emp.ndim != 2 or cov_emp.shape[0] != cov_emp.shape[1]:
        raise DataError(f"covariance must be square, got shape {cov_emp.shape}")
    if not np.all(np.isfinite(cov_emp)):
        raise DataError("non-finite covariance")
    if not (0.0 <= rho <= 1.0):
        raise DataError(f"shrinkage must be in [0, 1], got {rho}")
    asym = np.max(np.abs(cov_emp - cov_emp.T))
    if asym > 1e-6:
        raise DataError(f"covariance not symmetric (max asymmetry {asym:.3e})")
    d = cov_emp.shape[0]
    target = (np.trace(cov_emp) / d) * np.eye(d)
    return (1.0 - rho) * cov_emp + rho * target


def _factorize(cov: np.ndarray) -> np.ndarray:
    try:
        return cholesky(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DataError("covariance not positive-definite after shrinkage") from exc


def mahalanobis(x: np.ndarray, comp: GaussianComponent) -> float:
    """Distance computed through the triangular factor, never an explicit inverse."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite input to mahalanobis")
    diff = x - comp.mean
    sol = solve_triangular(comp.chol, diff, lower=True)
    return float(np.sqrt(np.dot(sol, sol)))


def _mahalanobis_sq_batch(X: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    sol = solve_triangular(chol, (X - mean).T, lower=True)
    return np.sum(sol**2, axis=0)


def score_gmm(model: GMMModel, x: np.ndarray) -> float:
    """Min Mahalanobis distance over components (weight-free)."""
    return min(mahalanobis(x, comp) for comp in model.components)


def score_gmm_batch(model: GMMModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    dists = np.stack(
        [_mahalanobis_sq_batch(X, c.mean, c.chol) for c in model.components]
    )
    return np.sqrt(np.clip(dists.min(axis=0), 0.0, None))


def _kmeanspp_means(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Z.shape[0]
    means = [Z[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            np.stack([np.sum((Z - m) ** 2, axis=1) for m in means]), axis=0
        )
        total = d2.sum()
        if total <= 0:
            means.append(Z[rng.integers(n)])
            continue
        means.append(Z[rng.choice(n, p=d2 / total)])
    return np.stack(means)


def _log_gaussians(Z: np.ndarray, comps: list[GaussianComponent]) -> np.ndarray:
    """N x K matrix of log pi_k + log N(z | mu_k, Sigma_k)."""
    n, d = Z.shape
    out = np.empty((n, len(comps)))
    const = -0.5 * d * np.log(2.0 * np.pi)
    for k, comp in enumerate(comps):
        logdet = np.sum(np.log(np.diag(comp.chol)))
        out[:, k] = (
            np.log(comp.weight)
            + const
            - logdet
            - 0.5 * _mahalanobis_sq_batch(Z, comp.mean, comp.chol)
        )
    return out


def _em_single_start(
    Z: np.ndarray, k: int, rho: float, rng: np.random.Generator
) -> tuple[list[GaussianComponent], list[float], int]:
    n, d = Z.shape
    init_means = _kmeanspp_means(Z, k, rng)
    # shrink the pooled covariance hard enough that the initial factorization holds
    base_cov = shrink_covariance(_empirical_cov(Z, Z.mean(axis=0), np.ones(n) / n), max(rho, 0.01))
    comps = [
        GaussianComponent(mean=m.copy(), cov=base_cov.copy(), chol=_factorize(base_cov), weight=1.0 / k)
        for m in init_means
    ]

    history: list[float] = []
    degenerate_streak = np.zeros(k, dtype=int)
    reseeds = 0
    prev_ll = -np.inf
    for _ in range(MAX_ITERATIONS):
        log_joint = _log_gaussians(Z, comps)
        log_norm = logsumexp(log_joint, axis=1)
        avg_ll = float(log_norm.mean())
        history.append(avg_ll)

        resp = np.exp(log_joint - log_norm[:, None])
        resp = np.maximum(resp, RESPONSIBILITY_FLOOR)
        resp /= resp.sum(axis=1, keepdims=True)

        weights = resp.mean(axis=0)
        for j in range(k):
            if weights[j] < DEGENERATE_WEIGHT:
                degenerate_streak[j] += 1
            else:
                degenerate_streak[j] = 0
            if degenerate_streak[j] >= 3:
                # re-seed collapsed component on a random data point
                comps[j] = GaussianComponent(
                    mean=Z[rng.integers(n)].copy(),
                    cov=base_cov.copy(),
                    chol=_factorize(base_cov),
                    weight=1.0 / k,
                )
                resp[:, j] = 1.0 / n
                weights = resp.mean(axis=0)
                degenerate_streak[j] = 0
                reseeds += 1
        weights = weights / weights.sum()

        for j in range(k):
            w = resp[:, j] / resp[:, j].sum()
            mean = w @ Z
            cov = shrink_covariance(_empirical_cov(Z, mean, w), rho)
            # a component collapsed onto a single point has ~zero trace, which
            # trace-preserving shrinkage cannot repair; fall back to the pooled
            # covariance so the factorization (and later persistence) stays sane
            if np.trace(cov) < 1e-10 * np.trace(base_cov):
                cov = base_cov.copy()
            comps[j] = GaussianComponent(mean=mean, cov=cov, chol=_factorize(cov), weight=float(weights[j]))

        if k == 1 or (np.isfinite(prev_ll) and abs(avg_ll - prev_ll) < CONVERGENCE_TOL):
            break
        prev_ll = avg_ll

    # final log-likelihood under the updated parameters
    final_ll = float(logsumexp(_log_gaussians(Z, comps), axis=1).mean())
    history.append(final_ll)
    return comps, history, reseeds


def _empirical_cov(Z: np.ndarray, mean: np.ndarray, w: np.ndarray) -> np.ndarray:
    diff = Z - mean
    cov = (diff * w[:, None]).T @ diff
    return 0.5 * (cov + cov.T)


def fit_gmm(
    Z: np.ndarray,
    k: int,
    rho: float = 0.01,
    n_starts: int = 5,
    seed: int = 0,
) -> GMMModel:
    """EM fit with ``n_starts`` seeded restarts; the best final average
    log-likelihood wins (ties broken by start index)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise DataError(f"expected 2-d data, got shape {Z.shape}")
    n = Z.shape[0]
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if n < k:
        raise DataError(f"{n} samples cannot support {k} components")

    seeds = np.random.SeedSequence(seed).spawn(n_starts)
    best: tuple[float, int] | None = None
    best_fit = None
    for start, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        comps, history, reseeds = _em_single_start(Z, k, rho, rng)
        ll = history[-1]
        key = (ll, -start)
        if best is None or key > best:
            best = key
            best_fit = (comps, history, reseeds, start)

    comps, history, reseeds, start = best_fit
    return GMMModel(
        components=comps,
        shrinkage=rho,
        fit_meta={
            "n_starts": n_starts,
            "iterations": len(history) - 1,
            "final_avg_loglik": history[-1],
            "loglik_history": history,
            "reseeded_components": reseeds,
            "best_start": start,
            "seed": seed,
        },
    )


def save_gmm(model: GMMModel, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "gmm_means.ataf", np.stack([c.mean for c in model.components]))
    write_tensor(out / "gmm_covs.ataf", np.stack([c.cov for c in model.components]))
    write_tensor(out / "gmm_weights.ataf", np.array([c.weight for c in model.components]))
    (out / "gmm_meta.json").write_text(
        json.dumps({"shrinkage": model.shrinkage, "fit_meta": model.fit_meta}, indent=2)
    )


def load_gmm(in_dir: str | Path) -> GMMModel:
    src = Path(in_dir)
    means = read_tensor(src / "gmm_means.ataf").astype(np.float64)
    covs = read_tensor(src / "gmm_covs.ataf").astype(np.float64)
    weights = read_tensor(src / "gmm_weights.ataf").astype(np.float64)
    meta = json.loads((src / "gmm_meta.json").read_text())
    comps = []
    for mean, cov, w in zip(means, covs, np.atleast_1d(weights)):
        cov = 0.5 * (cov + cov.T)
        comps.append(GaussianComponent(mean=mean, cov=cov, chol=_factorize(cov), weight=float(w)))
    return GMMModel(components=comps, shrinkage=float(meta["shrinkage"]), fit_meta=meta["fit_meta"])
