"""Detector configurations, fused features, and unified score vectors.

A detector configuration names which novelty scores are produced and in which
order. Fitting a bundle runs, per required modality, standardizer -> PCA ->
GMM on the in-distribution rows of the detector split, plus an exact NN index
over the reduced vision features when the layout asks for the kNN score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureMatrix, Manifest
from .errors import DataError
from .gmm import GMMModel, fit_gmm, load_gmm, save_gmm, score_gmm_batch
from .nnindex import NNIndex, build_index, load_index, save_index, score_knn_batch
from .preprocess import (
    PCAModel,
    Standardizer,
    fit_pca,
    fit_standardizer,
    load_preprocess,
    save_preprocess,
)

SCORE_IDS = ("S_GMM_V", "S_GMM_L", "S_GMM_F", "S_kNN_V")

SCORE_MODALITY = {
    "S_GMM_V": "vision",
    "S_GMM_L": "text",
    "S_GMM_F": "fused",
    "S_kNN_V": "vision",
}

CONFIG_LAYOUTS: dict[str, list[str]] = {
    "gmm_vision": ["S_GMM_V"],
    "gmm_text": ["S_GMM_L"],
    "gmm_fused": ["S_GMM_F"],
    "knn_vision": ["S_kNN_V"],
    "gmm_all_plus_knn": ["S_GMM_V", "S_GMM_L", "S_GMM_F", "S_kNN_V"],
    "gmm_vision_plus_knn": ["S_GMM_V", "S_kNN_V"],
}

# trained on raw concatenated embeddings, no detectors; handled by the router module
BASELINE_CONFIG = "baseline_raw"

CONFIG_NAMES = tuple(CONFIG_LAYOUTS) + (BASELINE_CONFIG,)


@dataclass
class DetectorConfig:
    name: str
    score_layout: list[str]
    k: int = 3
    rho: float = 0.01
    n_starts: int = 5
    seed: int = 0
    var_target: float = 0.95
    max_dims: int = 64

    def __post_init__(self) -> None:
        if not self.score_layout:
            raise DataError("score_layout must be non-empty")
        for sid in self.score_layout:
            if sid not in SCORE_IDS:
                raise DataError(f"unknown score identifier {sid!r}")

    @property
    def modalities(self) -> list[str]:
        out = []
        for sid in self.score_layout:
            mod = SCORE_MODALITY[sid]
            if mod not in out:
                out.append(mod)
        return out

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "score_layout": self.score_layout,
            "k": self.k,
            "rho": self.rho,
            "n_starts": self.n_starts,
            "seed": self.seed,
            "var_target": self.var_target,
            "max_dims": self.max_dims,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorConfig":
        return cls(**obj)


def make_config(name: str, **overrides) -> DetectorConfig:
    if name not in CONFIG_LAYOUTS:
        raise DataError(f"unknown config {name!r}; choose from {sorted(CONFIG_LAYOUTS)}")
    return DetectorConfig(name=name, score_layout=list(CONFIG_LAYOUTS[name]), **overrides)


@dataclass
class ScoreVector:
    values: np.ndarray
    sample_id: str = ""


def fuse_features(z_vis: np.ndarray, z_text: np.ndarray) -> np.ndarray:
    """L2-normalize each modality and concatenate; output norm is sqrt(2)."""
    z_vis = np.asarray(z_vis, dtype=np.float64)
    z_text = np.asarray(z_text, dtype=np.float64)
    nv = np.linalg.norm(z_vis)
    nt = np.linalg.norm(z_text)
    if not np.isfinite(nv) or nv == 0.0:
        raise DataError("zero-norm or non-finite vision vector in fusion")
    if not np.isfinite(nt) or nt == 0.0:
        raise DataError("zero-norm or non-finite text vector in fusion")
    return np.concatenate([z_vis / nv, z_text / nt])


def fuse_matrix(vis: np.ndarray, text: np.ndarray) -> np.ndarray:
    vis = np.asarray(vis, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if vis.shape[0] != text.shape[0]:
        raise DataError("vision/text row counts differ in fusion")
    nv = np.linalg.norm(vis, axis=1, keepdims=True)
    nt = np.linalg.norm(text, axis=1, keepdims=True)
    if np.any(nv == 0.0):
        raise DataError("zero-norm or non-finite vision vector in fusion")
    if np.any(nt == 0.0):
        raise DataError("zero-norm or non-finite text vector in fusion")
    return np.hstack([vis / nv, text / nt])


@dataclass
class ModalityPipeline:
    standardizer: Standardizer
    pca: PCAModel
    gmm: GMMModel | None = None

    def reduce(self, X: np.ndarray) -> np.ndarray:
        return self.pca.project(self.standardizer.transform(np.atleast_2d(X)))


@dataclass
class DetectorBundle:
    config: DetectorConfig
    pipelines: dict[str, ModalityPipeline] = field(default_factory=dict)
    nn_index: NNIndex | None = None


def _fused_rows(features: dict[str, FeatureMatrix], ids: list[str]) -> np.ndarray:
    if "fused" in features:
        return features["fused"].rows_for(ids).astype(np.float64)
    if "vision" not in features or "text" not in features:
        raise DataError("fused scores need either fused features or vision + text")
    return fuse_matrix(features["vision"].rows_for(ids), features["text"].rows_for(ids))


def _modality_rows(features: dict[str, FeatureMatrix], modality: str, ids: list[str]) -> np.ndarray:
    if modality == "fused":
        return _fused_rows(features, ids)
    if modality not in features:
        raise DataError(f"config requires {modality!r} features, none supplied")
    return features[modality].rows_for(ids).astype(np.float64)


def fit_bundle(
    features: dict[str, FeatureMatrix],
    manifest: Manifest,
    config: DetectorConfig,
) -> DetectorBundle:
    """Calibrate all estimators the layout needs on detector-split ID rows only."""
    fit_ids = manifest.ids(split="detector", label="ID")
    if not fit_ids:
        raise DataError("detector split has no ID samples")

    bundle = DetectorBundle(config=config)
    needs_gmm = {SCORE_MODALITY[s] for s in config.score_layout if s.startswith("S_GMM")}
    for modality in config.modalities:
        X = _modality_rows(features, modality, fit_ids)
        standardizer = fit_standardizer(X)
        pca = fit_pca(
            standardizer.transform(X),
            var_target=config.var_target,
            max_dims=config.max_dims,
            seed=config.seed,
        )
        pipeline = ModalityPipeline(standardizer=standardizer, pca=pca)
        if modality in needs_gmm:
            Z = pipeline.reduce(X)
            pipeline.gmm = fit_gmm(
                Z, config.k, rho=config.rho, n_starts=config.n_starts, seed=config.seed
            )
        bundle.pipelines[modality] = pipeline

    if "S_kNN_V" in config.score_layout:
        Z_vis = bundle.pipelines["vision"].reduce(_modality_rows(features, "vision", fit_ids))
        bundle.nn_index = build_index(Z_vis)
    return bundle


def reduce_rows(
    bundle: DetectorBundle, features: dict[str, FeatureMatrix], ids: list[str]
) -> dict[str, np.ndarray]:
    """Reduced (post-PCA) representation of the given samples, per required modality."""
    return {
        modality: bundle.pipelines[modality].reduce(_modality_rows(features, modality, ids))
        for modality in bundle.config.modalities
    }


def score_reduced(bundle: DetectorBundle, reduced: dict[str, np.ndarray]) -> np.ndarray:
    """Score already-reduced rows; used for mixup-synthesized samples."""
    columns = []
    for sid in bundle.config.score_layout:
        modality = SCORE_MODALITY[sid]
        Z = np.atleast_2d(reduced[modality])
        if sid == "S_kNN_V":
            columns.append(score_knn_batch(bundle.nn_index, Z))
        else:
            columns.append(score_gmm_batch(bundle.pipelines[modality].gmm, Z))
    return np.stack(columns, axis=1)


def score_batch(
    bundle: DetectorBundle, features: dict[str, FeatureMatrix], ids: list[str]
) -> np.ndarray:
    """Unified score vectors (rows = samples, layout order preserved)."""
    return score_reduced(bundle, reduce_rows(bundle, features, ids))


def score_sample(bundle: DetectorBundle, sample: dict[str, np.ndarray]) -> ScoreVector:
    """Score one sample given per-modality raw vectors."""
    sample = dict(sample)
    if "fused" in bundle.config.modalities and "fused" not in sample:
        if "vision" not in sample or "text" not in sample:
            raise DataError("fused scores need either fused input or vision + text")
        sample["fused"] = fuse_features(sample["vision"], sample["text"])
    reduced = {}
    for modality in bundle.config.modalities:
        if modality not in sample:
            raise DataError(f"sample is missing {modality!r} modality")
        reduced[modality] = bundle.pipelines[modality].reduce(sample[modality])
    values = score_reduced(bundle, reduced)[0]
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite score")
    return ScoreVector(values=values)


def save_bundle(bundle: DetectorBundle, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(bundle.config.to_json(), indent=2))
    for modality, pipeline in bundle.pipelines.items():
        mdir = out / modality
        save_preprocess(pipeline.standardizer, pipeline.pca, mdir)
        if pipeline.gmm is not None:
            save_gmm(pipeline.gmm, mdir)
    if bundle.nn_index is not None:
        save_index(bundle.nn_index, out / "knn")


def load_bundle(in_dir: str | Path) -> DetectorBundle:
    src = Path(in_dir)
    config = DetectorConfig.from_json(json.loads((src / "config.json").read_text()))
    bundle = DetectorBundle(config=config)
    for modality in config.modalities:
        mdir = src / modality
        standardizer, pca = load_preprocess(mdir)
        pipeline = ModalityPipeline(standardizer=standardizer, pca=pca)
        if (mdir / "gmm_means.ataf").exists():
            pipeline.gmm = load_gmm(mdir)
        bundle.pipelines[modality] = pipeline
    if (src / "knn" / "points.ataf").exists():
        bundle.nn_index = load_index(src / "knn")
    return bundle
