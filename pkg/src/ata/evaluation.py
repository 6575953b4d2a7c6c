"""Metrics, sweeps, rollout accounting, and the synthetic benchmark generator.

Numbers reported on the real robot suites need real backbone embeddings and
are documentation targets only; quantitative CI gates run on the seeded
synthetic benchmark below, with a quadrature Bayes oracle as the yardstick.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureMatrix, Manifest, ManifestRecord, SubsampleSpec, partition, subsample
from .errors import DataError
from .router import (
    ABSTAIN,
    ACT,
    LABEL_TO_CLASS,
    STRATEGIES,
    THINK,
    Hyper,
    MixupSpec,
    RouterModel,
    baseline_inputs,
    train_baseline,
    train_router,
)
from .scorebundle import BASELINE_CONFIG, DetectorBundle, fit_bundle, make_config, score_batch

# --- classification metrics ----------------------------------------------------


@dataclass
class ClassificationReport:
    confusion: np.ndarray  # 3x3, rows = truth, cols = prediction
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    supports: list[int]

    def to_json(self) -> dict:
        return {
            "classes": list(STRATEGIES),
            "confusion": self.confusion.tolist(),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "macro_f1": self.macro_f1,
            "supports": self.supports,
        }


def classification_report(truth, predicted) -> ClassificationReport:
    """Standard 3-class report; zero-support classes are excluded from macro F1."""
    truth = np.asarray(truth, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    if truth.shape != predicted.shape or truth.size == 0:
        raise DataError("truth and prediction lists must have equal non-zero length")
    confusion = np.zeros((3, 3), dtype=int)
    for t, p in zip(truth, predicted):
        confusion[t, p] += 1
    precision, recall, f1 = [], [], []
    for c in range(3):
        tp = confusion[c, c]
        col = confusion[:, c].sum()
        row = confusion[c, :].sum()
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if (p + r) else 0.0
        precision.append(float(p))
        recall.append(float(r))
        f1.append(float(f))
    supports = [int(confusion[c, :].sum()) for c in range(3)]
    scored = [f1[c] for c in range(3) if supports[c] > 0]
    macro = float(np.mean(scored)) if scored else 0.0
    return ClassificationReport(confusion, precision, recall, f1, macro, supports)


# --- rollout accounting --------------------------------------------------------


@dataclass
class Episode:
    episode_id: str
    suite: str
    variant: str
    decision: str  # Act | Think | Abstain
    outcome: str  # success | failure | not_executed
    wall_time_s: float
    counterfactual_failure: bool = False

    def validate(self) -> None:
        if self.decision not in STRATEGIES:
            raise DataError(f"episode {self.episode_id}: unknown decision {self.decision!r}")
        if self.outcome not in ("success", "failure", "not_executed"):
            raise DataError(f"episode {self.episode_id}: unknown outcome {self.outcome!r}")
        if self.decision == "Abstain" and self.outcome != "not_executed":
            raise DataError(f"episode {self.episode_id}: Abstain must not execute")
        if not np.isfinite(self.wall_time_s) or self.wall_time_s < 0:
            raise DataError(f"episode {self.episode_id}: bad wall_time_s {self.wall_time_s}")

    @classmethod
    def from_json(cls, obj: dict) -> "Episode":
        ep = cls(
            episode_id=str(obj["episode_id"]),
            suite=obj.get("suite", ""),
            variant=obj.get("variant", ""),
            decision=obj["decision"],
            outcome=obj["outcome"],
            wall_time_s=float(obj["wall_time_s"]),
            counterfactual_failure=bool(obj.get("counterfactual_failure", False)),
        )
        ep.validate()
        return ep


def read_episode_log(path: str | Path) -> list[Episode]:
    episodes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                episodes.append(Episode.from_json(json.loads(line)))
    return episodes


@dataclass
class RolloutStats:
    episodes: int = 0
    successes: int = 0
    prevented_failures: int = 0
    act: int = 0
    think: int = 0
    abstain: int = 0
    total_wall_time_s: float = 0.0

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    @property
    def mean_wall_time_s(self) -> float:
        return self.total_wall_time_s / self.episodes if self.episodes else 0.0

    def to_json(self) -> dict:
        return {
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "prevented_failures": self.prevented_failures,
            "act": self.act,
            "think": self.think,
            "abstain": self.abstain,
            "mean_wall_time_s": self.mean_wall_time_s,
        }


def rollout_account(log: list[Episode]) -> dict[tuple[str, str], RolloutStats]:
    """Per-(suite, variant) success rate, prevented failures, decision histogram, timing."""
    if not log:
        raise DataError("empty episode log")
    out: dict[tuple[str, str], RolloutStats] = {}
    for ep in log:
        ep.validate()
        stats = out.setdefault((ep.suite, ep.variant), RolloutStats())
        stats.episodes += 1
        stats.successes += ep.outcome == "success"
        stats.total_wall_time_s += ep.wall_time_s
        if ep.decision == "Act":
            stats.act += 1
        elif ep.decision == "Think":
            stats.think += 1
        else:
            stats.abstain += 1
            stats.prevented_failures += ep.counterfactual_failure
    return out


# --- synthetic benchmark -------------------------------------------------------


@dataclass
class SynthTruth:
    """Generative parameters of the synthetic benchmark, in the rotated basis."""

    rotation: np.ndarray        # D x D orthonormal
    id_means: np.ndarray        # K x D (rotated coordinates)
    id_vars: np.ndarray         # K x D diagonal variances
    ood_means: np.ndarray       # K x D
    lambda_range: tuple[float, float]
    priors: np.ndarray          # class priors (Act, Think, Abstain)


def _random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _sample_class(
    rng: np.random.Generator, means: np.ndarray, variances: np.ndarray, n: int
) -> np.ndarray:
    k = means.shape[0]
    comp = rng.integers(k, size=n)
    return means[comp] + rng.standard_normal((n, means.shape[1])) * np.sqrt(variances[comp])


def make_benchmark(
    seed: int,
    n_id: int = 6000,
    n_think: int = 3000,
    n_ood: int = 6000,
    dim: int = 768,
    text_dim: int = 960,
    n_clusters: int = 3,
    lambda_range: tuple[float, float] = (0.3, 0.7),
) -> tuple[dict[str, FeatureMatrix], Manifest, SynthTruth]:
    """Seeded three-cluster benchmark with a known Bayes oracle.

    ID is a mixture of ``n_clusters`` Gaussians with diagonal covariances in a
    random rotated basis; FullOOD shares the structure mean-shifted by many
    sigma along the cluster-spread axis; PartialOOD rows are mixup-style
    interpolations at lambda in ``lambda_range``. Text features follow the
    same recipe in their own basis with a weaker shift, mirroring the weaker
    signal language carries. The returned manifest is already partitioned.
    """
    rng = np.random.default_rng(seed)

    def build_modality(d: int, shift_sigma: float):
        rot = _random_rotation(d, rng)
        # clusters spread far apart along the first (pre-rotation) axis; the OOD
        # shift runs along that same axis, so a single pooled Gaussian swallows
        # it while per-cluster Gaussians see a many-sigma displacement
        means = rng.uniform(-2.0, 2.0, size=(n_clusters, d))
        variances = rng.uniform(0.5, 2.0, size=(n_clusters, d))
        gap = 400.0 * float(np.sqrt(variances[:, 0].mean()))
        means[:, 0] += gap * np.arange(n_clusters)
        ood_means = means.copy()
        ood_means[:, 0] += shift_sigma * np.sqrt(variances[:, 0])
        z_id = _sample_class(rng, means, variances, n_id)
        z_ood = _sample_class(rng, ood_means, variances, n_ood)
        # Think interpolates ID and OOD draws of the same cluster
        comp = rng.integers(n_clusters, size=n_think)
        lam = rng.uniform(*lambda_range, size=n_think)
        noise = rng.standard_normal((2, n_think, d)) * np.sqrt(variances[comp])
        z_think = (
            lam[:, None] * (means[comp] + noise[0])
            + (1.0 - lam[:, None]) * (ood_means[comp] + noise[1])
        )
        X = np.vstack([z_id, z_think, z_ood]) @ rot.T  # rotate into observed coordinates
        return X.astype(np.float32), rot, means, variances, ood_means

    X_vis, rot, means, variances, ood_means = build_modality(dim, 150.0)
    X_text, *_ = build_modality(text_dim, 30.0)

    n_total = n_id + n_think + n_ood
    ids = [f"s{idx:06d}" for idx in range(n_total)]
    labels = ["ID"] * n_id + ["PartialOOD"] * n_think + ["FullOOD"] * n_ood
    records = []
    for modality in ("vision", "text"):
        for sid, label in zip(ids, labels):
            records.append(
                ManifestRecord(
                    id=sid, modality=modality, label=label,
                    episode_id=sid, suite="synthetic", variant="benchmark",
                )
            )
    manifest = partition(Manifest(records), seed=seed)

    features = {
        "vision": FeatureMatrix(data=X_vis, modality="vision", ids=list(ids)),
        "text": FeatureMatrix(data=X_text, modality="text", ids=list(ids)),
    }
    truth = SynthTruth(
        rotation=rot,
        id_means=means,
        id_vars=variances,
        ood_means=ood_means,
        lambda_range=lambda_range,
        priors=np.array([n_id, n_think, n_ood], dtype=float) / n_total,
    )
    return features, manifest, truth


def _diag_log_gauss(Z: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * (np.sum(np.log(2 * np.pi * var)) + np.sum((Z - mean) ** 2 / var, axis=1))


def bayes_oracle_predict(X: np.ndarray, truth: SynthTruth, n_lambda: int = 21) -> np.ndarray:
    """Brute-force Bayes classifier from the true generative densities.

    Works in the rotated basis where all covariances are diagonal; the Think
    density integrates the lambda mixture over a quadrature grid (for fixed
    lambda and component, the same-cluster interpolant is Gaussian with
    diagonal covariance (lam^2 + (1-lam)^2) * var).
    """
    from scipy.special import logsumexp

    Z = np.asarray(X, dtype=np.float64) @ truth.rotation  # back to the diagonal basis
    k = truth.id_means.shape[0]
    log_k = np.log(k)

    log_p_id = logsumexp(
        np.stack([_diag_log_gauss(Z, m, v) for m, v in zip(truth.id_means, truth.id_vars)]),
        axis=0,
    ) - log_k
    log_p_ood = logsumexp(
        np.stack([_diag_log_gauss(Z, m, v) for m, v in zip(truth.ood_means, truth.id_vars)]),
        axis=0,
    ) - log_k

    lam_grid = np.linspace(*truth.lambda_range, n_lambda)
    parts = []
    for lam in lam_grid:
        for i in range(k):
            mean = lam * truth.id_means[i] + (1 - lam) * truth.ood_means[i]
            var = (lam**2 + (1 - lam) ** 2) * truth.id_vars[i]
            parts.append(_diag_log_gauss(Z, mean, var))
    log_p_think = logsumexp(np.stack(parts), axis=0) - np.log(len(parts))

    log_post = np.stack([log_p_id, log_p_think, log_p_ood], axis=1) + np.log(truth.priors)
    return np.argmax(log_post, axis=1)


# --- end-to-end pipeline and sweeps --------------------------------------------


@dataclass
class SweepResult:
    axis: list
    mean: list[float]
    std: list[float]
    cells: dict = field(default_factory=dict)  # (value, seed) -> macro F1 or error string

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "mean": self.mean,
            "std": self.std,
            "cells": {f"{v}:{s}": f1 for (v, s), f1 in self.cells.items()},
        }


def evaluate_config(
    features: dict[str, FeatureMatrix],
    manifest: Manifest,
    config_name: str,
    seed: int = 0,
    k: int = 3,
    rho: float = 0.01,
    n_starts: int = 5,
    hyper: Hyper | None = None,
    eval_split: str = "validation",
) -> tuple[ClassificationReport, RouterModel, DetectorBundle | None]:
    """Full pipeline: fit detectors, train the router, report on a held-out split."""
    hyper = hyper or Hyper()
    eval_ids = manifest.ids(split=eval_split)
    if not eval_ids:
        raise DataError(f"no samples in split {eval_split!r}")
    table = manifest.sample_table()
    truth = np.array([LABEL_TO_CLASS[table[sid].label] for sid in eval_ids])

    if config_name == BASELINE_CONFIG:
        model = train_baseline(features, manifest, hyper=hyper, seed=seed)
        probs = model.forward(baseline_inputs(features, eval_ids))
        bundle = None
    else:
        config = make_config(config_name, k=k, rho=rho, n_starts=n_starts, seed=seed)
        bundle = fit_bundle(features, manifest, config)
        model = train_router(bundle, features, manifest, hyper=hyper, seed=seed)
        probs = model.forward(score_batch(bundle, features, eval_ids))

    pred = np.array([int(2 - np.argmax(p[::-1])) for p in probs])
    return classification_report(truth, pred), model, bundle


def sweep_k(
    features: dict[str, FeatureMatrix],
    manifest: Manifest,
    k_values: list[int],
    seeds: list[int],
    config_name: str = "gmm_vision",
    rho: float = 0.01,
    hyper: Hyper | None = None,
) -> SweepResult:
    """Macro F1 (mean, std over seeds) as the GMM component count varies."""
    if not k_values:
        raise DataError("k_values must be non-empty")
    result = SweepResult(axis=list(k_values), mean=[], std=[])
    for k in k_values:
        scores = []
        for seed in seeds:
            report, _, _ = evaluate_config(
                features, manifest, config_name, seed=seed, k=k, rho=rho, hyper=hyper
            )
            result.cells[(k, seed)] = report.macro_f1
            scores.append(report.macro_f1)
        result.mean.append(float(np.mean(scores)))
        result.std.append(float(np.std(scores)))
    return result


def sweep_data(
    features: dict[str, FeatureMatrix],
    manifest: Manifest,
    fractions: list[float] = (0.001, 0.01, 0.05, 0.10, 0.25),
    seeds: list[int] = (0,),
    config_names: list[str] = ("gmm_vision",),
    k: int = 3,
    rho: float = 0.01,
    hyper: Hyper | None = None,
) -> dict[str, SweepResult]:
    """Refit and re-train on shrinking training fractions; validation untouched.

    A fraction too small to support the detectors is recorded as a failed cell
    rather than crashing the sweep.
    """
    results: dict[str, SweepResult] = {}
    for name in config_names:
        result = SweepResult(axis=list(fractions), mean=[], std=[])
        for fraction in fractions:
            scores = []
            for seed in seeds:
                sub = subsample(manifest, SubsampleSpec(fraction=fraction, seed=seed))
                try:
                    report, _, _ = evaluate_config(
                        features, sub, name, seed=seed, k=k, rho=rho, hyper=hyper
                    )
                except DataError as exc:
                    result.cells[(fraction, seed)] = f"failed: {exc}"
                    continue
                result.cells[(fraction, seed)] = report.macro_f1
                scores.append(report.macro_f1)
            result.mean.append(float(np.mean(scores)) if scores else float("nan"))
            result.std.append(float(np.std(scores)) if scores else float("nan"))
        results[name] = result
    return results
