"""Feature matrices, manifests, and deterministic dataset partitioning.

A :class:`FeatureMatrix` holds one modality's embeddings (row = sample). The
:class:`Manifest` is a JSON-lines file with one record per (sample, modality)
carrying the distribution-shift label and the split assignment.

Splits follow the 50/25/25 detector / mlp / validation scheme, stratified per
label over unique sample ids so every split sees all label classes. Rounding:
floor for detector, floor for mlp, remainder to validation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ataf import read_tensor, write_tensor
from .errors import DataError

MODALITY_DIMS = {"vision": 768, "text": 960, "fused": 1728}
LABELS = ("ID", "PartialOOD", "FullOOD")
SPLITS = ("detector", "mlp", "validation", "test")

SPLIT_FRACTIONS = (0.50, 0.25, 0.25)  # detector / mlp / validation


@dataclass
class FeatureMatrix:
    """N x D embedding matrix for one modality with per-row sample ids."""

    data: np.ndarray
    modality: str
    ids: list[str]
    nonstandard_dim: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DataError(f"feature matrix must be 2-d, got shape {self.data.shape}")
        n, d = self.data.shape
        if n == 0:
            raise DataError("empty matrix")
        if d == 0:
            raise DataError("feature dimension must be > 0")
        if len(self.ids) != n:
            raise DataError(f"{len(self.ids)} ids for {n} rows")
        if not np.all(np.isfinite(self.data)):
            row = int(np.where(~np.isfinite(self.data).all(axis=1))[0][0])
            raise DataError(f"non-finite value in row {row}")
        expected = MODALITY_DIMS.get(self.modality)
        if expected is None:
            raise DataError(f"unknown modality {self.modality!r}")
        # Externally supplied matrices may carry other dimensions; accept but flag.
        self.nonstandard_dim = d != expected

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def rows_for(self, ids: list[str]) -> np.ndarray:
        index = {sid: i for i, sid in enumerate(self.ids)}
        try:
            sel = [index[sid] for sid in ids]
        except KeyError as exc:
            raise DataError(f"id {exc.args[0]!r} not present in {self.modality} features") from exc
        return self.data[sel]


def write_features(matrix: FeatureMatrix, path: str | Path) -> None:
    """Write a FeatureMatrix as ATAF plus a JSON sidecar with ids/modality."""
    path = Path(path)
    write_tensor(path, matrix.data)
    sidecar = {
        "modality": matrix.modality,
        "ids": matrix.ids,
        "nonstandard_dim": matrix.nonstandard_dim,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_features(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    data = read_tensor(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if sidecar_path.exists():
        meta = json.loads(sidecar_path.read_text())
        modality = meta["modality"]
        ids = list(meta["ids"])
    else:
        # Bare tensors get synthetic ids and are assumed vision-shaped.
        modality = "vision"
        ids = [str(i) for i in range(data.shape[0])]
    return FeatureMatrix(data=data, modality=modality, ids=ids)


@dataclass
class ManifestRecord:
    id: str
    modality: str
    label: str
    split: str | None = None
    episode_id: str = ""
    suite: str = ""
    variant: str = ""
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r} for id {self.id!r}")
        if self.split is not None and self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r} for id {self.id!r}")

    def to_json(self) -> dict:
        rec = {
            "id": self.id,
            "modality": self.modality,
            "label": self.label,
            "split": self.split,
            "episode_id": self.episode_id,
            "suite": self.suite,
            "variant": self.variant,
        }
        rec.update(self.extra)
        return rec

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestRecord":
        known = {"id", "modality", "label", "split", "episode_id", "suite", "variant"}
        rec = cls(
            id=str(obj["id"]),
            modality=obj.get("modality", "vision"),
            label=obj["label"],
            split=obj.get("split"),
            episode_id=str(obj.get("episode_id", "")),
            suite=obj.get("suite", ""),
            variant=obj.get("variant", ""),
            extra={k: v for k, v in obj.items() if k not in known},
        )
        rec.validate()
        return rec


class Manifest:
    """Ordered collection of manifest records with split/label helpers."""

    def __init__(self, records: list[ManifestRecord]):
        self.records = records
        for rec in records:
            rec.validate()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def sample_table(self) -> dict[str, ManifestRecord]:
        """Unique id -> representative record; label/split must agree across modalities."""
        table: dict[str, ManifestRecord] = {}
        for rec in self.records:
            prev = table.get(rec.id)
            if prev is None:
                table[rec.id] = rec
            elif (prev.label, prev.split) != (rec.label, rec.split):
                raise DataError(f"inconsistent label/split for id {rec.id!r} across modalities")
        return table

    def ids(self, split: str | None = None, label: str | None = None) -> list[str]:
        """Unique sample ids, optionally filtered by split and/or label."""
        out = []
        seen = set()
        for rec in self.records:
            if split is not None and rec.split != split:
                continue
            if label is not None and rec.label != label:
                continue
            if rec.id not in seen:
                seen.add(rec.id)
                out.append(rec.id)
        return out

    def with_assignment(self, assignment: dict[str, str]) -> "Manifest":
        records = []
        for rec in self.records:
            split = assignment.get(rec.id, rec.split)
            records.append(
                ManifestRecord(rec.id, rec.modality, rec.label, split,
                               rec.episode_id, rec.suite, rec.variant, dict(rec.extra))
            )
        return Manifest(records)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_json()) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(ManifestRecord.from_json(json.loads(line)))
        return cls(records)


@dataclass
class SubsampleSpec:
    fraction: float
    seed: int

    def __post_init__(self) -> None:
        if not (0.0 < self.fraction <= 1.0):
            raise DataError(f"fraction must be in (0, 1], got {self.fraction}")


def _subset_size(fraction: float, n: int) -> int:
    # round-half-up, never below one sample
    return max(1, int(math.floor(fraction * n + 0.5)))


def partition(manifest: Manifest, seed: int) -> Manifest:
    """Assign detector/mlp/validation splits, 50/25/25 stratified per label.

    Records already marked ``test`` are left untouched. Floor rounding for
    detector then mlp; the remainder goes to validation. Deterministic in seed.
    """
    table = manifest.sample_table()
    strata: dict[str, list[str]] = {}
    for sid, rec in table.items():
        if rec.split == "test":
            continue
        strata.setdefault(rec.label, []).append(sid)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in sorted(strata):
        ids = sorted(strata[label])
        if len(ids) < 4:
            raise DataError(f"label stratum {label!r} has {len(ids)} samples, need >= 4")
        order = rng.permutation(len(ids))
        n = len(ids)
        n_det = int(math.floor(n * SPLIT_FRACTIONS[0]))
        n_mlp = int(math.floor(n * SPLIT_FRACTIONS[1]))
        for pos, idx in enumerate(order):
            if pos < n_det:
                split = "detector"
            elif pos < n_det + n_mlp:
                split = "mlp"
            else:
                split = "validation"
            assignment[ids[idx]] = split
    return manifest.with_assignment(assignment)


def subsample(manifest: Manifest, spec: SubsampleSpec) -> Manifest:
    """Keep a random fraction of the detector and mlp splits, per label stratum.

    Validation and test rows pass through untouched. Deterministic in seed;
    kept subsets for equal seeds are identical.
    """
    table = manifest.sample_table()
    strata: dict[tuple[str, str], list[str]] = {}
    for sid, rec in table.items():
        if rec.split in ("detector", "mlp"):
            strata.setdefault((rec.split, rec.label), []).append(sid)

    rng = np.random.default_rng(spec.seed)
    keep: set[str] = set()
    for key in sorted(strata):
        ids = sorted(strata[key])
        k = _subset_size(spec.fraction, len(ids))
        chosen = rng.choice(len(ids), size=k, replace=False)
        keep.update(ids[i] for i in chosen)

    records = []
    for rec in manifest.records:
        if rec.split in ("detector", "mlp") and rec.id not in keep:
            continue
        records.append(rec)
    return Manifest(records)
