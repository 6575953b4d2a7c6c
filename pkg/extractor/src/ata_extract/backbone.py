"""Backbone adapters producing raw hidden states for the pooling stage.

Two flavours: a deterministic stub (model ids starting with ``stub:``) whose
hidden states are seeded from the input bytes, and a thin Hugging Face wrapper
for real checkpoints. Both expose the same two methods:

- ``encode_vision(images)`` where ``images[b][c]`` holds the raw bytes of
  camera c of sample b, returning per-camera patch states for ``pool_vision``;
- ``encode_text(instructions)`` returning padded token states plus a mask for
  ``pool_text``. Text runs without visual conditioning.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ExtractError

VISION_DIM = 768
TEXT_DIM = 960


class StubBackbone:
    """Deterministic stand-in backbone: hidden states seeded from input bytes.

    Lets the full extraction pipeline (and its consumers) run without any
    model download. The same input always yields the same embeddings.
    """

    def __init__(self, model_id: str, n_patches: int = 16):
        self.model_id = model_id
        self.n_patches = n_patches

    def _rng(self, *parts: bytes) -> np.random.Generator:
        digest = hashlib.sha256(b"\x00".join((self.model_id.encode(),) + parts)).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    def encode_vision(self, images: list[list[bytes]]) -> list[list[np.ndarray]]:
        out = []
        for cameras in images:
            sample = []
            for blob in cameras:
                rng = self._rng(b"vision", blob)
                sample.append(rng.standard_normal((self.n_patches, VISION_DIM)))
            out.append(sample)
        return out

    def encode_text(self, instructions: list[str]) -> tuple[np.ndarray, np.ndarray]:
        token_lists = []
        for text in instructions:
            tokens = text.split()
            if not tokens:
                raise ExtractError(f"instruction {text!r} is empty after tokenization")
            token_lists.append(tokens)
        max_len = max(len(t) for t in token_lists)
        hidden = np.zeros((len(instructions), max_len, TEXT_DIM))
        mask = np.zeros((len(instructions), max_len), dtype=np.int64)
        for b, tokens in enumerate(token_lists):
            for s, token in enumerate(tokens):
                rng = self._rng(b"text", token.encode(), str(s).encode())
                hidden[b, s] = rng.standard_normal(TEXT_DIM)
            mask[b, : len(tokens)] = 1
        return hidden, mask


class HuggingFaceBackbone:
    """Wraps a local or hub checkpoint; last hidden states from both encoders."""

    def __init__(self, model_id: str):
        try:
            import torch  # noqa: F401
            from transformers import AutoModel, AutoProcessor
        except ImportError as exc:
            raise ExtractError(f"transformers/torch unavailable, cannot load {model_id!r}") from exc
        try:
            self.processor = AutoProcessor.from_pretrained(model_id)
            self.model = AutoModel.from_pretrained(model_id)
        except Exception as exc:
            raise ExtractError(f"cannot load model {model_id!r}: {exc}") from exc
        self.model.eval()
        vision = getattr(self.model, "vision_model", None) or getattr(self.model, "vision_tower", None)
        text = getattr(self.model, "text_model", None) or getattr(self.model, "language_model", None)
        if vision is None or text is None:
            raise ExtractError(f"model {model_id!r} exposes no separate vision/text encoders")
        self.vision_model = vision
        self.text_model = text

    def encode_vision(self, images: list[list[bytes]]) -> list[list[np.ndarray]]:
        import io

        import torch
        from PIL import Image

        out = []
        with torch.no_grad():
            for cameras in images:
                sample = []
                for blob in cameras:
                    pil = Image.open(io.BytesIO(blob)).convert("RGB")
                    pixels = self.processor(images=pil, return_tensors="pt")["pixel_values"]
                    states = self.vision_model(pixels).last_hidden_state[0]
                    sample.append(states.cpu().numpy())
                out.append(sample)
        return out

    def encode_text(self, instructions: list[str]) -> tuple[np.ndarray, np.ndarray]:
        import torch

        tokenizer = getattr(self.processor, "tokenizer", self.processor)
        batch = tokenizer(instructions, return_tensors="pt", padding=True)
        with torch.no_grad():
            states = self.text_model(
                input_ids=batch["input_ids"], attention_mask=batch["attention_mask"]
            ).last_hidden_state
        return states.cpu().numpy(), batch["attention_mask"].cpu().numpy()


def load_backbone(model_id: str):
    if model_id.startswith("stub:"):
        return StubBackbone(model_id)
    return HuggingFaceBackbone(model_id)
