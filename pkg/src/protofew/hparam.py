"""Validation-set grid search over the mixing weight and the distance
sharpener for a frozen model snapshot.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .errors import NoLabels
from .model import MixtureHyperparams, ModelState, adapt_queries, compute_prototypes
from .store import QuerySet


def default_alphas() -> tuple[float, ...]:
    return tuple(round(0.05 * i, 2) for i in range(21))


def default_betas() -> tuple[float, ...]:
    return tuple(float(b) for b in np.logspace(-1, 2, 20))


@dataclass(frozen=True)
class GridSpec:
    alphas: tuple[float, ...] = None  # type: ignore[assignment]
    betas: tuple[float, ...] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.alphas is None:
            object.__setattr__(self, "alphas", default_alphas())
        if self.betas is None:
            object.__setattr__(self, "betas", default_betas())
        if not self.alphas or not self.betas:
            raise ValueError("grid axes must be non-empty")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("all alphas must lie in [0, 1]")
        if any(not b > 0.0 for b in self.betas):
            raise ValueError("all betas must be positive")


@dataclass(frozen=True)
class GridCell:
    alpha: float
    beta: float
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


@dataclass(frozen=True)
class GridResult:
    best: MixtureHyperparams
    best_accuracy: float
    cells: tuple[GridCell, ...]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def grid_search(state: ModelState, val_queries: QuerySet, grid: GridSpec) -> GridResult:
    """Score every (alpha, beta) cell on the validation set.

    The adapted queries and both squared-distance matrices are computed
    once and shared across cells; each cell only re-runs the softmax and
    the mixture. Ties break toward the lower alpha, then the lower beta,
    regardless of evaluation order. Correct counts are compared as
    integers so ties are exact.
    """
    if val_queries.labels is None:
        raise NoLabels("grid search needs labeled validation queries")
    snapshot = state.as_dtype(np.float64)
    tape = Tape()
    q = Tensor(val_queries.embeddings.astype(np.float64))
    adapted = adapt_queries(tape, snapshot.adapter, q)
    protos = compute_prototypes(tape, snapshot.bank)
    d_image = tape.sq_euclidean(adapted, protos.image_prototypes).data
    d_text = tape.sq_euclidean(adapted, protos.text_prototypes).data
    labels = val_queries.labels

    cells = []
    for beta in grid.betas:
        p_image = _softmax_rows(-beta * d_image)
        p_text = _softmax_rows(-beta * d_text)
        for alpha in grid.alphas:
            probs = alpha * p_image + (1.0 - alpha) * p_text
            pred = np.argmax(probs, axis=1)
            cells.append(GridCell(
                alpha=float(alpha), beta=float(beta),
                correct=int((pred == labels).sum()), total=len(labels),
            ))
    cells.sort(key=lambda c: (c.alpha, c.beta))
    best = min(cells, key=lambda c: (-c.correct, c.alpha, c.beta))
    return GridResult(
        best=MixtureHyperparams(alpha=best.alpha, beta=best.beta),
        best_accuracy=best.accuracy,
        cells=tuple(cells),
    )


def write_grid_csv(result: GridResult, path) -> None:
    lines = ["alpha,beta,accuracy"]
    for c in result.cells:
        lines.append(f"{c.alpha!r},{c.beta!r},{c.accuracy!r}")
    Path(path).write_text("\n".join(lines) + "\n")
