"""Pooling of backbone hidden states into fixed-size embeddings.

Vision: spatial mean over the patch states of each camera, then an unweighted
mean over cameras (cameras count equally even if their patch counts differ).
Text: mean over the hidden states of non-padding tokens only.
"""

from __future__ import annotations

import numpy as np

from .errors import ExtractError


def pool_vision(patch_states: list[list[np.ndarray]]) -> np.ndarray:
    """Pool per-camera patch states into one embedding per sample.

    `patch_states[b][c]` is an (S_v, D) array of patch hidden states for
    camera c of sample b; S_v may differ between cameras. All samples in the
    batch must have the same number of cameras. Returns (B, D) float32.
    """
    if not patch_states:
        raise ExtractError("empty vision batch")
    n_cameras = len(patch_states[0])
    if n_cameras == 0:
        raise ExtractError("sample 0 has no camera views")
    rows = []
    for b, cameras in enumerate(patch_states):
        if len(cameras) != n_cameras:
            raise ExtractError(
                f"sample {b} has {len(cameras)} camera views, expected {n_cameras}"
            )
        means = []
        for c, states in enumerate(cameras):
            arr = np.asarray(states, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ExtractError(f"camera {c} of sample {b} has no patch states")
            means.append(arr.mean(axis=0))
        rows.append(np.mean(means, axis=0))
    return np.asarray(rows, dtype=np.float32)


def pool_text(hidden: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked mean over token hidden states.

    `hidden` is (B, S_t, D), `mask` is (B, S_t) with nonzero entries marking
    real (non-padding) tokens. Returns (B, D) float32.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    mask = np.asarray(mask)
    if hidden.ndim != 3:
        raise ExtractError(f"token states must be 3-d (B, S_t, D), got shape {hidden.shape}")
    if mask.shape != hidden.shape[:2]:
        raise ExtractError(f"mask shape {mask.shape} does not match token states {hidden.shape[:2]}")
    weights = (mask != 0).astype(np.float64)
    counts = weights.sum(axis=1)
    if np.any(counts == 0):
        row = int(np.where(counts == 0)[0][0])
        raise ExtractError(f"sample {row} has no non-padding tokens")
    pooled = np.einsum("bsd,bs->bd", hidden, weights) / counts[:, None]
    return pooled.astype(np.float32)
