"""Training objective: classification loss plus the two prototype-alignment
contrastive losses, each carrying its own 1/L or 1/N normalization so the
total is a plain sum of the enabled terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .model import PrototypeSet

# guards -log(0) when a softmax underflows at extreme sharpening
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    use_l1: bool = True
    use_l2: bool = True
    use_l3: bool = True

    def __post_init__(self):
        if not (self.use_l1 or self.use_l2 or self.use_l3):
            raise ValueError("at least one loss term must be enabled")

    def label(self) -> str:
        parts = [n for n, on in (("l1", self.use_l1), ("l2", self.use_l2),
                                 ("l3", self.use_l3)) if on]
        return "+".join(parts)


def true_class_probs(tape: Tape, probs: Tensor, labels: np.ndarray) -> Tensor:
    """Pick each query's probability of its true label: (L, N) -> (L,)."""
    onehot = np.zeros(probs.shape, dtype=probs.data.dtype)
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return tape.dot(probs, Tensor(onehot))


def loss_l1(tape: Tape, probs_true_class: Tensor) -> Tensor:
    """Mean negative log-probability of the true label, clamped below."""
    clamped = tape.clamp_min(probs_true_class, PROB_FLOOR)
    return tape.neg(tape.mean_rows(tape.log(clamped)))


def _infonce(tape: Tape, anchors: Tensor, others: Tensor) -> Tensor:
    """Mean over classes of -log softmax of the matching-class dot product.

    Both prototype sets are L2-normalized before the dot products, which
    bounds every logit in [-1, 1]; no temperature is applied.
    """
    a = tape.l2norm_rows(anchors)
    o = tape.l2norm_rows(others)
    logits = tape.matmul(a, o, transpose_b=True)
    eye = Tensor(np.eye(logits.shape[0], dtype=logits.data.dtype))
    diag = tape.dot(logits, eye)
    per_class = tape.add(tape.logsumexp(logits), tape.neg(diag))
    return tape.mean_rows(per_class)


def loss_l2(tape: Tape, protos: PrototypeSet) -> Tensor:
    """Alignment loss with image prototypes as anchors."""
    return _infonce(tape, protos.image_prototypes, protos.text_prototypes)


def loss_l3(tape: Tape, protos: PrototypeSet) -> Tensor:
    """Alignment loss with text prototypes as anchors."""
    return _infonce(tape, protos.text_prototypes, protos.image_prototypes)


def total_loss(
    tape: Tape,
    cfg: LossConfig,
    l1: Tensor | None = None,
    l2: Tensor | None = None,
    l3: Tensor | None = None,
) -> Tensor:
    """Sum of the enabled terms; each term already carries its normalization."""
    terms = []
    for enabled, term, name in ((cfg.use_l1, l1, "l1"), (cfg.use_l2, l2, "l2"),
                                (cfg.use_l3, l3, "l3")):
        if enabled:
            if term is None:
                raise ValueError(f"loss config enables {name} but no value was given")
            terms.append(term)
    total = terms[0]
    for term in terms[1:]:
        total = tape.add(total, term)
    return total
