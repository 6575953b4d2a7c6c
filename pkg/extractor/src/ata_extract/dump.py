"""End-to-end extraction: backbone -> pooling -> ATAF files + manifest.

Outputs are exactly what the routing package's readers expect: one ATAF file
per modality with a JSON sidecar carrying ids/modality, plus a JSON-lines
manifest with one record per (sample, modality). Fused features are never
written; fusion happens downstream after score normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ataf import atomic_write_text, write_tensor
from .backbone import TEXT_DIM, VISION_DIM, load_backbone
from .errors import ExtractError
from .pooling import pool_text, pool_vision

LABELS = ("ID", "PartialOOD", "FullOOD")


@dataclass
class Sample:
    """One episode frame: per-camera image bytes plus its instruction."""

    id: str
    label: str
    images: list[bytes]
    instruction: str

    def validate(self, n_cameras: int) -> None:
        if self.label not in LABELS:
            raise ExtractError(f"unknown label {self.label!r} for sample {self.id!r}")
        if len(self.images) != n_cameras:
            raise ExtractError(
                f"sample {self.id!r} has {len(self.images)} camera views, expected {n_cameras}"
            )
        if not self.instruction.strip():
            raise ExtractError(f"sample {self.id!r} has an empty instruction")


@dataclass
class ExtractionSpec:
    model: str
    out_dir: Path
    n_cameras: int = 1
    batch_size: int = 32
    vision_file: str = "vision.ataf"
    text_file: str = "text.ataf"
    manifest_file: str = "manifest.jsonl"
    extra_meta: dict = field(default_factory=dict)


def dump(spec: ExtractionSpec, samples: list[Sample]) -> dict[str, Path]:
    """Extract embeddings for `samples` and write the output files.

    Returns the paths written, keyed by "vision"/"text"/"manifest".
    """
    if not samples:
        raise ExtractError("no samples to extract")
    seen: set[str] = set()
    for sample in samples:
        sample.validate(spec.n_cameras)
        if sample.id in seen:
            raise ExtractError(f"duplicate sample id {sample.id!r}")
        seen.add(sample.id)

    backbone = load_backbone(spec.model)
    vision_rows = []
    text_rows = []
    for start in range(0, len(samples), spec.batch_size):
        batch = samples[start : start + spec.batch_size]
        vision_rows.append(pool_vision(backbone.encode_vision([s.images for s in batch])))
        text_rows.append(pool_text(*backbone.encode_text([s.instruction for s in batch])))
    vision = np.concatenate(vision_rows, axis=0)
    text = np.concatenate(text_rows, axis=0)
    if vision.shape[1] != VISION_DIM:
        raise ExtractError(f"vision embedding dim {vision.shape[1]} != {VISION_DIM}")
    if text.shape[1] != TEXT_DIM:
        raise ExtractError(f"text embedding dim {text.shape[1]} != {TEXT_DIM}")

    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [s.id for s in samples]
    paths = {
        "vision": out / spec.vision_file,
        "text": out / spec.text_file,
        "manifest": out / spec.manifest_file,
    }
    _write_modality(paths["vision"], vision, "vision", ids)
    _write_modality(paths["text"], text, "text", ids)

    lines = []
    for modality in ("vision", "text"):
        for sample in samples:
            rec = {
                "id": sample.id,
                "modality": modality,
                "label": sample.label,
                "split": None,
                "episode_id": "",
                "suite": "",
                "variant": "",
            }
            rec.update(spec.extra_meta)
            lines.append(json.dumps(rec))
    atomic_write_text(paths["manifest"], "\n".join(lines) + "\n")
    return paths


def _write_modality(path: Path, data: np.ndarray, modality: str, ids: list[str]) -> None:
    write_tensor(path, data)
    sidecar = {"modality": modality, "ids": ids, "nonstandard_dim": False}
    atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(sidecar))
