"""Encoder backbones.

Two families are registered:

- ``hash-<dim>``: a deterministic offline encoder that derives each
  embedding from the SHA-256 of the image file bytes or the prompt text.
  It carries no semantics but is bit-reproducible on any machine, which
  makes it the backbone of choice for plumbing tests and format checks.
- ``clip:<model_id>``: a real vision-language encoder loaded from the
  local Hugging Face cache (never the network). Raises MissingWeights
  when the weights are not already on disk.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import MissingWeights, UnknownBackbone


class HashEncoder:
    """Deterministic stand-in encoder: unit vectors seeded by content hash."""

    def __init__(self, dim: int):
        if dim < 2:
            raise ValueError("embedding dim must be at least 2")
        self.dim = dim
        self.name = f"hash-{dim}"

    def _vector(self, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(payload).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed_images(self, paths: list[Path]) -> np.ndarray:
        if not paths:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self._vector(Path(p).read_bytes()) for p in paths])

    def embed_texts(self, prompts: list[str]) -> np.ndarray:
        if not prompts:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self._vector(t.encode("utf-8")) for t in prompts])


class ClipEncoder:
    """CLIP image/text towers from a locally cached Hugging Face checkpoint."""

    def __init__(self, model_id: str):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise MissingWeights(
                f"backbone {model_id!r} needs torch+transformers installed"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id, local_files_only=True)
            self._processor = CLIPProcessor.from_pretrained(
                model_id, local_files_only=True)
        except Exception as exc:
            raise MissingWeights(
                f"no local weights for {model_id!r}; download the checkpoint "
                f"into the Hugging Face cache first"
            ) from exc
        self._model.eval()
        self.dim = int(self._model.config.projection_dim)
        self.name = f"clip:{model_id}"

    def embed_images(self, paths: list[Path]) -> np.ndarray:
        import torch
        from PIL import Image

        if not paths:
            return np.zeros((0, self.dim), dtype=np.float32)
        out = []
        with torch.no_grad():
            for chunk_start in range(0, len(paths), 32):
                chunk = paths[chunk_start : chunk_start + 32]
                images = [Image.open(p).convert("RGB") for p in chunk]
                inputs = self._processor(images=images, return_tensors="pt")
                feats = self._model.get_image_features(**inputs)
                out.append(feats.cpu().numpy().astype(np.float32))
        return np.concatenate(out, axis=0)

    def embed_texts(self, prompts: list[str]) -> np.ndarray:
        import torch

        if not prompts:
            return np.zeros((0, self.dim), dtype=np.float32)
        with torch.no_grad():
            inputs = self._processor(text=prompts, return_tensors="pt", padding=True)
            feats = self._model.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)


def load_encoder(backbone: str):
    """Resolve a backbone name to an encoder instance."""
    if backbone.startswith("hash-"):
        try:
            dim = int(backbone.split("-", 1)[1])
        except ValueError as exc:
            raise UnknownBackbone(f"bad hash backbone spec {backbone!r}") from exc
        return HashEncoder(dim)
    if backbone.startswith("clip:"):
        return ClipEncoder(backbone.split(":", 1)[1])
    raise UnknownBackbone(
        f"unknown backbone {backbone!r}; use 'hash-<dim>' or 'clip:<model_id>'"
    )
