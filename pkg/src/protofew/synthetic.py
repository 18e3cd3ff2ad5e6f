"""Seeded synthetic cluster datasets for tests and smoke experiments.

Classes live on the unit sphere: each class has a unit-norm center and
rows are the center plus Gaussian noise, re-normalized. Image and text
centers can be forced apart to exercise cross-modal alignment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import ClassVocabulary, LoadedDataset, QuerySet, SupportSet, TextPromptBank


@dataclass(frozen=True)
class ClusterSpec:
    n_classes: int = 5
    k_shot: int = 4
    n_queries_per_class: int = 4
    n_prompts_per_class: int = 2
    dim: int = 16
    noise: float = 0.01
    min_center_distance: float = 1.0
    # max cosine between a class's image and text centers; None keeps them equal
    max_modality_cos: float | None = None
    text_is_noise: bool = False
    seed: int = 0


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _sample_centers(rng: np.random.Generator, spec: ClusterSpec) -> np.ndarray:
    # rejection sampling; in dim >= 8 random unit vectors separate quickly
    for _ in range(1000):
        centers = _unit(rng.standard_normal((spec.n_classes, spec.dim)))
        dists = np.sqrt(
            ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        )
        np.fill_diagonal(dists, np.inf)
        if dists.min() > spec.min_center_distance:
            return centers
    raise RuntimeError("could not place cluster centers; lower min_center_distance")


def _noisy_rows(rng, center: np.ndarray, count: int, noise: float) -> np.ndarray:
    rows = center[None, :] + noise * rng.standard_normal((count, len(center)))
    return _unit(rows)


def make_cluster_dataset(spec: ClusterSpec) -> LoadedDataset:
    """Build a fully in-memory dataset of unit-norm Gaussian clusters.

    Every query is strictly nearest to its own class center by
    construction when noise is small relative to the center separation.
    """
    rng = np.random.default_rng(spec.seed)
    image_centers = _sample_centers(rng, spec)
    if spec.text_is_noise:
        text_centers = _unit(rng.standard_normal((spec.n_classes, spec.dim)))
    elif spec.max_modality_cos is not None:
        text_centers = np.empty_like(image_centers)
        for k in range(spec.n_classes):
            for _ in range(1000):
                cand = _unit(rng.standard_normal((1, spec.dim)))[0]
                if float(cand @ image_centers[k]) < spec.max_modality_cos:
                    text_centers[k] = cand
                    break
            else:
                raise RuntimeError("could not sample a misaligned text center")
    else:
        text_centers = image_centers.copy()

    def block(centers, per_class):
        rows = np.vstack([
            _noisy_rows(rng, centers[k], per_class, spec.noise)
            for k in range(spec.n_classes)
        ]).astype(np.float32)
        labels = np.repeat(np.arange(spec.n_classes), per_class)
        return rows, labels

    support_rows, support_labels = block(image_centers, spec.k_shot)
    text_rows, text_labels = block(text_centers, spec.n_prompts_per_class)
    if spec.text_is_noise:
        # overwrite with rows carrying no class signal at all
        text_rows = _unit(
            rng.standard_normal((spec.n_classes * spec.n_prompts_per_class, spec.dim))
        ).astype(np.float32)
    val_rows, val_labels = block(image_centers, spec.n_queries_per_class)
    test_rows, test_labels = block(image_centers, spec.n_queries_per_class)

    n = spec.n_classes
    return LoadedDataset(
        vocab=ClassVocabulary(tuple(f"class_{k}" for k in range(n))),
        support=SupportSet(embeddings=support_rows, labels=support_labels, num_classes=n),
        text=TextPromptBank(embeddings=text_rows, labels=text_labels, num_classes=n),
        val=QuerySet(embeddings=val_rows, labels=val_labels, num_classes=n),
        test=QuerySet(embeddings=test_rows, labels=test_labels, num_classes=n),
    )
