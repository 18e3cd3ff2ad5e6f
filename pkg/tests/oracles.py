"""Independent reference computations used to pin expected test values.

Everything here is straight-line float64 numpy, written directly from the
mathematical definitions, with no use of the package's tape or ops.
"""
from __future__ import annotations

import numpy as np


def class_means(rows: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """Brute-force per-class mean, one python loop per class."""
    rows = np.asarray(rows, dtype=np.float64)
    return np.stack([rows[labels == k].mean(axis=0) for k in range(n)])


def mixture_probabilities(
    support: np.ndarray,
    support_labels: np.ndarray,
    text: np.ndarray,
    text_labels: np.ndarray,
    queries: np.ndarray,
    n: int,
    alpha: float,
    beta: float,
) -> np.ndarray:
    """Monolithic evaluation of the full classifier from raw arrays.

    Prototypes are per-class means; each head is a softmax over the
    negative sharpened squared distances; the result is the convex
    mixture. No adapter (identity).
    """
    protos_img = class_means(support, support_labels, n)
    protos_txt = class_means(text, text_labels, n)
    q = np.asarray(queries, dtype=np.float64)

    def head(protos):
        d = np.array([[np.sum((qr - p) ** 2) for p in protos] for qr in q])
        logits = -beta * d
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    return alpha * head(protos_img) + (1.0 - alpha) * head(protos_txt)


def finite_difference_grads(fn, arrays: list[np.ndarray], step: float = 1e-5):
    """Central finite differences of scalar fn(), perturbing the given
    float64 arrays in place one element at a time."""
    grads = []
    for arr in arrays:
        assert arr.dtype == np.float64
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn()
            flat[i] = orig - step
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def unit_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
