"""Routing MLP over unified score vectors, plus the raw-embedding baseline.

The network is input batch-norm followed by ReLU hidden layers and a softmax
head over the fixed class order [Act, Think, Abstain]. Training synthesizes
the intermediate (Think) class by mixup between ID and OOD rows with
Beta(0.5, 0.5) coefficients, mixing in reduced feature space and re-scoring
through the fitted bundle (the baseline mixes in its own raw input space).
Ties in the final argmax resolve toward the more conservative strategy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ataf import read_tensor, write_tensor
from .dataset import FeatureMatrix, Manifest
from .errors import DataError
from .scorebundle import DetectorBundle, fuse_matrix, reduce_rows, score_batch, score_reduced

STRATEGIES = ("Act", "Think", "Abstain")
ACT, THINK, ABSTAIN = 0, 1, 2

ROUTER_HIDDEN = (64, 32)
BASELINE_HIDDEN = (512, 128)
BASELINE_DROPOUT = 0.2

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

LABEL_TO_CLASS = {"ID": ACT, "PartialOOD": THINK, "FullOOD": ABSTAIN}


@dataclass
class Hyper:
    lr: float = 1e-3
    batch: int = 256
    patience: int = 10
    max_epochs: int = 500
    holdout: float = 0.15  # early-stopping slice of the training data


@dataclass
class MixupSpec:
    alpha: float = 0.5
    count: int | None = None  # defaults to min(|ID|, |OOD|)
    seed: int = 0


@dataclass
class Decision:
    strategy: int
    probabilities: np.ndarray
    input: np.ndarray | None = None

    @property
    def name(self) -> str:
        return STRATEGIES[self.strategy]


class RouterModel:
    """Small MLP: BN(u) -> [Linear -> ReLU -> (dropout)]* -> Linear -> softmax."""

    def __init__(
        self,
        in_dim: int,
        hidden: tuple[int, ...] = ROUTER_HIDDEN,
        n_classes: int = 3,
        dropout: float = 0.0,
        seed: int = 0,
    ):
        if in_dim < 1:
            raise DataError(f"in_dim must be >= 1, got {in_dim}")
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.n_classes = n_classes
        self.dropout = float(dropout)
        rng = np.random.default_rng(seed)
        self.bn_gamma = np.ones(in_dim)
        self.bn_beta = np.zeros(in_dim)
        self.running_mean = np.zeros(in_dim)
        self.running_var = np.ones(in_dim)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        sizes = (in_dim,) + self.hidden + (n_classes,)
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)  # He init for ReLU stacks
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    # --- parameter bookkeeping -------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"w{i}"] = w
            params[f"b{i}"] = b
        return params

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        self.bn_gamma = params["bn_gamma"].copy()
        self.bn_beta = params["bn_beta"].copy()
        for i in range(len(self.weights)):
            self.weights[i] = params[f"w{i}"].copy()
            self.biases[i] = params[f"b{i}"].copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {k: v.copy() for k, v in self.parameters().items()}
        snap["running_mean"] = self.running_mean.copy()
        snap["running_var"] = self.running_var.copy()
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        self.set_parameters(snap)
        self.running_mean = snap["running_mean"].copy()
        self.running_var = snap["running_var"].copy()

    # --- forward / backward ----------------------------------------------------

    def _forward(self, X: np.ndarray, mode: str, drop_rng: np.random.Generator | None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise DataError(f"input dim {X.shape[1]}, model expects {self.in_dim}")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite input to forward")
        cache: dict = {"X": X, "mode": mode}
        if mode == "train":
            mu = X.mean(axis=0)
            var = X.var(axis=0)
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mu
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var
        else:
            mu = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        x_hat = (X - mu) * inv_std
        h = self.bn_gamma * x_hat + self.bn_beta
        cache.update(x_hat=x_hat, inv_std=inv_std)

        acts = []
        masks = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            last = i == len(self.weights) - 1
            pre = h @ w + b
            if last:
                acts.append((h, pre, None))
                h = pre
                break
            relu = np.maximum(pre, 0.0)
            mask = None
            if mode == "train" and self.dropout > 0.0:
                if drop_rng is None:
                    drop_rng = np.random.default_rng(0)
                mask = (drop_rng.random(relu.shape) >= self.dropout) / (1.0 - self.dropout)
                relu = relu * mask
            acts.append((h, pre, mask))
            h = relu
        cache["acts"] = acts
        logits = h
        logits = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        probs = exp / exp.sum(axis=1, keepdims=True)
        cache["probs"] = probs
        return probs, cache

    def forward(
        self, u: np.ndarray, mode: str = "infer", drop_rng: np.random.Generator | None = None
    ) -> np.ndarray:
        """Class probabilities for one input vector or a batch."""
        u = np.asarray(u, dtype=np.float64)
        single = u.ndim == 1
        probs, _ = self._forward(u, mode, drop_rng)
        return probs[0] if single else probs

    def loss_and_grads(
        self, X: np.ndarray, y: np.ndarray, drop_rng: np.random.Generator | None = None
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy and its analytic gradient, train-mode forward."""
        probs, cache = self._forward(X, "train", drop_rng)
        n = probs.shape[0]
        y = np.asarray(y, dtype=int)
        loss = float(-np.mean(np.log(np.clip(probs[np.arange(n), y], 1e-300, None))))

        grads: dict[str, np.ndarray] = {}
        dlogits = probs.copy()
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n

        dh = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            inp, pre, mask = cache["acts"][i]
            grads[f"w{i}"] = inp.T @ dh
            grads[f"b{i}"] = dh.sum(axis=0)
            if i == 0:
                dh = dh @ self.weights[i].T
                break
            dinp = dh @ self.weights[i].T
            prev_inp, prev_pre, prev_mask = cache["acts"][i - 1]
            if prev_mask is not None:
                dinp = dinp * prev_mask
            dh = dinp * (prev_pre > 0.0)

        # dh is now the gradient at the BN output
        x_hat = cache["x_hat"]
        inv_std = cache["inv_std"]
        grads["bn_gamma"] = np.sum(dh * x_hat, axis=0)
        grads["bn_beta"] = np.sum(dh, axis=0)
        return loss, grads


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def decide(probabilities: np.ndarray) -> Decision:
    """Argmax with exact ties resolved toward the more conservative strategy."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.shape != (3,):
        raise DataError(f"expected a 3-vector of probabilities, got shape {p.shape}")
    strategy = int(len(p) - 1 - np.argmax(p[::-1]))
    return Decision(strategy=strategy, probabilities=p)


def mixup_think(
    Z_id: np.ndarray,
    Z_ood: np.ndarray,
    spec: MixupSpec,
    lam_override: float | None = None,
    return_details: bool = False,
):
    """Beta(alpha, alpha) convex combinations of random ID and OOD rows."""
    Z_id = np.atleast_2d(np.asarray(Z_id, dtype=np.float64))
    Z_ood = np.atleast_2d(np.asarray(Z_ood, dtype=np.float64))
    if Z_id.shape[0] == 0 or Z_ood.shape[0] == 0:
        raise DataError("mixup needs non-empty ID and OOD sets")
    if Z_id.shape[1] != Z_ood.shape[1]:
        raise DataError("ID and OOD dimensionality differ")
    count = spec.count if spec.count is not None else min(Z_id.shape[0], Z_ood.shape[0])
    rng = np.random.default_rng(spec.seed)
    lam = rng.beta(spec.alpha, spec.alpha, size=count)
    if lam_override is not None:
        lam = np.full(count, float(lam_override))
    idx_id = rng.integers(Z_id.shape[0], size=count)
    idx_ood = rng.integers(Z_ood.shape[0], size=count)
    mixed = lam[:, None] * Z_id[idx_id] + (1.0 - lam[:, None]) * Z_ood[idx_ood]
    if return_details:
        return mixed, lam, idx_id, idx_ood
    return mixed


def _mixup_pairing(n_id: int, n_ood: int, spec: MixupSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared (lambda, id-row, ood-row) draws so every modality mixes coherently."""
    count = spec.count if spec.count is not None else min(n_id, n_ood)
    rng = np.random.default_rng(spec.seed)
    lam = rng.beta(spec.alpha, spec.alpha, size=count)
    idx_id = rng.integers(n_id, size=count)
    idx_ood = rng.integers(n_ood, size=count)
    return lam, idx_id, idx_ood


# --- training ------------------------------------------------------------------


def _stratified_holdout(
    y: np.ndarray, fraction: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    train_idx, val_idx = [], []
    for cls in np.unique(y):
        idx = np.where(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, int(round(fraction * len(idx))))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))


def _fit_mlp(
    X: np.ndarray,
    y: np.ndarray,
    hidden: tuple[int, ...],
    hyper: Hyper,
    seed: int,
    dropout: float = 0.0,
) -> tuple[RouterModel, dict]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.shape[0] != y.shape[0]:
        raise DataError("feature/label length mismatch")
    present = set(np.unique(y))
    if present != {ACT, THINK, ABSTAIN}:
        missing = [STRATEGIES[c] for c in (ACT, THINK, ABSTAIN) if c not in present]
        raise DataError(f"training set is missing class(es): {', '.join(missing)}")

    rng = np.random.default_rng(seed)
    train_idx, val_idx = _stratified_holdout(y, hyper.holdout, rng)
    X_tr, y_tr = X[train_idx], y[train_idx]
    X_val, y_val = X[val_idx], y[val_idx]

    model = RouterModel(X.shape[1], hidden=hidden, dropout=dropout, seed=seed)
    adam_m = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    adam_v = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    best_loss = np.inf
    best_snap = model.snapshot()
    best_epoch = -1
    history = []
    n = X_tr.shape[0]
    drop_rng = np.random.default_rng(seed + 1)
    for epoch in range(hyper.max_epochs):
        order = np.random.default_rng((seed, epoch)).permutation(n)
        for start in range(0, n, hyper.batch):
            batch = order[start : start + hyper.batch]
            loss, grads = model.loss_and_grads(X_tr[batch], y_tr[batch], drop_rng)
            if not np.isfinite(loss):
                raise DataError(f"training diverged at epoch {epoch}")
            step += 1
            params = model.parameters()
            for key, g in grads.items():
                adam_m[key] = beta1 * adam_m[key] + (1 - beta1) * g
                adam_v[key] = beta2 * adam_v[key] + (1 - beta2) * g * g
                m_hat = adam_m[key] / (1 - beta1**step)
                v_hat = adam_v[key] / (1 - beta2**step)
                params[key] -= hyper.lr * m_hat / (np.sqrt(v_hat) + eps)

        val_probs = model.forward(X_val, mode="infer")
        val_loss = float(
            -np.mean(np.log(np.clip(val_probs[np.arange(len(y_val)), y_val], 1e-300, None)))
        )
        history.append(val_loss)
        if val_loss < best_loss - 1e-9:
            best_loss = val_loss
            best_snap = model.snapshot()
            best_epoch = epoch
        elif epoch - best_epoch >= hyper.patience:
            break

    model.restore(best_snap)
    meta = {
        "best_epoch": best_epoch,
        "epochs_run": len(history),
        "best_val_loss": best_loss,
        "val_loss_history": history,
        "seed": seed,
    }
    return model, meta


def _class_rows(manifest: Manifest, split: str) -> dict[str, list[str]]:
    return {label: manifest.ids(split=split, label=label) for label in ("ID", "PartialOOD", "FullOOD")}


def build_router_training_set(
    bundle: DetectorBundle,
    features: dict[str, FeatureMatrix],
    manifest: Manifest,
    mixup: MixupSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Score-vector training set for the router: real rows plus mixup Think rows."""
    by_label = _class_rows(manifest, "mlp")
    if not by_label["ID"] or not by_label["FullOOD"]:
        raise DataError("mlp split needs both ID and FullOOD samples")

    X_parts, y_parts = [], []
    for label, ids in by_label.items():
        if not ids:
            continue
        X_parts.append(score_batch(bundle, features, ids))
        y_parts.append(np.full(len(ids), LABEL_TO_CLASS[label], dtype=int))

    # synthetic Think rows: mix in reduced space, re-score through the bundle
    red_id = reduce_rows(bundle, features, by_label["ID"])
    red_ood = reduce_rows(bundle, features, by_label["FullOOD"])
    lam, idx_id, idx_ood = _mixup_pairing(len(by_label["ID"]), len(by_label["FullOOD"]), mixup)
    mixed = {
        modality: lam[:, None] * red_id[modality][idx_id]
        + (1.0 - lam[:, None]) * red_ood[modality][idx_ood]
        for modality in red_id
    }
    X_parts.append(score_reduced(bundle, mixed))
    y_parts.append(np.full(len(lam), THINK, dtype=int))

    return np.vstack(X_parts), np.concatenate(y_parts)


def train_router(
    bundle: DetectorBundle,
    features: dict[str, FeatureMatrix],
    manifest: Manifest,
    hyper: Hyper | None = None,
    mixup: MixupSpec | None = None,
    seed: int = 0,
) -> RouterModel:
    hyper = hyper or Hyper()
    mixup = mixup or MixupSpec(seed=seed)
    X, y = build_router_training_set(bundle, features, manifest, mixup)
    model, meta = _fit_mlp(X, y, ROUTER_HIDDEN, hyper, seed)
    model.train_meta = meta
    return model


def baseline_inputs(features: dict[str, FeatureMatrix], ids: list[str]) -> np.ndarray:
    """Concatenated raw embeddings [z_vis | z_text | z_fused]."""
    vis = features["vision"].rows_for(ids).astype(np.float64)
    text = features["text"].rows_for(ids).astype(np.float64)
    return np.hstack([vis, text, fuse_matrix(vis, text)])


def train_baseline(
    features: dict[str, FeatureMatrix],
    manifest: Manifest,
    hyper: Hyper | None = None,
    mixup: MixupSpec | None = None,
    seed: int = 0,
    dropout: float = BASELINE_DROPOUT,
) -> RouterModel:
    hyper = hyper or Hyper()
    mixup = mixup or MixupSpec(seed=seed)
    by_label = _class_rows(manifest, "mlp")
    if not by_label["ID"] or not by_label["FullOOD"]:
        raise DataError("mlp split needs both ID and FullOOD samples")

    X_parts, y_parts = [], []
    for label, ids in by_label.items():
        if not ids:
            continue
        X_parts.append(baseline_inputs(features, ids))
        y_parts.append(np.full(len(ids), LABEL_TO_CLASS[label], dtype=int))

    # baseline mixes in its raw input space
    X_id = baseline_inputs(features, by_label["ID"])
    X_ood = baseline_inputs(features, by_label["FullOOD"])
    mixed = mixup_think(X_id, X_ood, mixup)
    X_parts.append(mixed)
    y_parts.append(np.full(mixed.shape[0], THINK, dtype=int))

    model, meta = _fit_mlp(
        np.vstack(X_parts), np.concatenate(y_parts), BASELINE_HIDDEN, hyper, seed, dropout=dropout
    )
    model.train_meta = meta
    return model


# --- serialization -------------------------------------------------------------


def save_router(model: RouterModel, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "bn.ataf", np.stack(
        [model.bn_gamma, model.bn_beta, model.running_mean, model.running_var]
    ))
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        write_tensor(out / f"w{i}.ataf", w)
        write_tensor(out / f"b{i}.ataf", b)
    meta = {
        "in_dim": model.in_dim,
        "hidden": list(model.hidden),
        "n_classes": model.n_classes,
        "dropout": model.dropout,
        "class_order": list(STRATEGIES),
        "train_meta": getattr(model, "train_meta", {}),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


def load_router(in_dir: str | Path) -> RouterModel:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    model = RouterModel(
        meta["in_dim"], hidden=tuple(meta["hidden"]),
        n_classes=meta["n_classes"], dropout=meta["dropout"],
    )
    bn = read_tensor(src / "bn.ataf").astype(np.float64)
    model.bn_gamma, model.bn_beta, model.running_mean, model.running_var = bn
    for i in range(len(model.weights)):
        model.weights[i] = read_tensor(src / f"w{i}.ataf").astype(np.float64)
        model.biases[i] = read_tensor(src / f"b{i}.ataf").astype(np.float64)
    model.train_meta = meta.get("train_meta", {})
    return model
