"""Model state and forward pass: memory banks, query adapters, class
prototypes, per-modality probability heads, and the mixture classifier.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .errors import DimMismatch, DimNotSquare
from .store import ClassVocabulary, SupportSet, TextPromptBank

ADAPTER_KINDS = ("identity", "mlp", "conv2", "conv3")


@dataclass(frozen=True)
class MixtureHyperparams:
    """Mixing weight between the two modality heads and the distance sharpener."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass
class MemoryBank:
    """Learnable per-example embeddings, one bank per modality.

    Rows are initialized as exact copies of the frozen encoder outputs;
    label layouts never change after construction.
    """

    image_memory: Tensor
    text_memory: Tensor
    image_labels: np.ndarray
    text_labels: np.ndarray
    num_classes: int
    train_image: bool
    train_text: bool


@dataclass
class AdapterParams:
    """Weights of the residual query adapter.

    kind "mlp" is a bottleneck C -> C/4 -> C with ReLU between; "conv2"
    reshapes the C-vector onto a 1-channel sqrt(C) x sqrt(C) grid and runs
    (32 filters over 1 channel) then (1 filter over 32 channels); "conv3"
    inserts a middle layer of 32 filters over 32 channels. "identity" is
    a pure passthrough with no weights.
    """

    kind: str
    weights: dict[str, Tensor] = field(default_factory=dict)
    residual_ratio: float = 0.2
    grid_side: int | None = None

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        if not 0.0 <= self.residual_ratio <= 1.0:
            raise ValueError("residual_ratio must lie in [0, 1]")

    def trainable(self) -> list[Tensor]:
        return [t for t in self.weights.values() if t.requires_grad]


@dataclass
class PrototypeSet:
    """Per-class mean embeddings for each modality, recomputed from live memory."""

    image_prototypes: Tensor
    text_prototypes: Tensor


@dataclass
class ModelState:
    """A memory bank plus adapter; the unit that is trained and evaluated."""

    bank: MemoryBank
    adapter: AdapterParams

    @property
    def num_classes(self) -> int:
        return self.bank.num_classes

    @property
    def dim(self) -> int:
        return self.bank.image_memory.shape[1]

    def trainable_params(self) -> list[Tensor]:
        params = []
        if self.bank.train_image:
            params.append(self.bank.image_memory)
        if self.bank.train_text:
            params.append(self.bank.text_memory)
        params.extend(self.adapter.trainable())
        return params

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"image_memory": self.bank.image_memory, "text_memory": self.bank.text_memory}
        for name, t in self.adapter.weights.items():
            out[f"adapter.{name}"] = t
        return out

    def as_dtype(self, dtype) -> "ModelState":
        """Deep copy with every tensor cast; used for high-precision inference."""
        bank = MemoryBank(
            image_memory=Tensor(self.bank.image_memory.data.astype(dtype),
                                requires_grad=self.bank.train_image),
            text_memory=Tensor(self.bank.text_memory.data.astype(dtype),
                               requires_grad=self.bank.train_text),
            image_labels=self.bank.image_labels.copy(),
            text_labels=self.bank.text_labels.copy(),
            num_classes=self.bank.num_classes,
            train_image=self.bank.train_image,
            train_text=self.bank.train_text,
        )
        adapter = AdapterParams(
            kind=self.adapter.kind,
            weights={k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                     for k, t in self.adapter.weights.items()},
            residual_ratio=self.adapter.residual_ratio,
            grid_side=self.adapter.grid_side,
        )
        return ModelState(bank=bank, adapter=adapter)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_adapter(kind: str, dim: int, seed: int, residual_ratio: float = 0.2) -> AdapterParams:
    """Build adapter weights for embedding dimension `dim`, seeded."""
    rng = np.random.default_rng(seed)
    if kind == "identity":
        return AdapterParams(kind=kind, residual_ratio=residual_ratio)
    if kind == "mlp":
        hidden = max(1, dim // 4)
        weights = {
            "w1": Tensor(_uniform_init(rng, (dim, hidden), dim), requires_grad=True),
            "b1": Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True),
            "w2": Tensor(_uniform_init(rng, (hidden, dim), hidden), requires_grad=True),
            "b2": Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True),
        }
        return AdapterParams(kind=kind, weights=weights, residual_ratio=residual_ratio)
    if kind in ("conv2", "conv3"):
        side = math.isqrt(dim)
        if side * side != dim:
            raise DimNotSquare(
                f"conv adapters need a square embedding dim, got {dim}"
            )
        channels = [(32, 1), (1, 32)] if kind == "conv2" else [(32, 1), (32, 32), (1, 32)]
        weights = {}
        for i, (cout, cin) in enumerate(channels, start=1):
            weights[f"w{i}"] = Tensor(
                _uniform_init(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True
            )
            weights[f"b{i}"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        return AdapterParams(
            kind=kind, weights=weights, residual_ratio=residual_ratio, grid_side=side
        )
    raise ValueError(f"unknown adapter kind {kind!r}")


def init_model(
    support: SupportSet,
    prompts: TextPromptBank,
    adapter_kind: str = "identity",
    train_text: bool = False,
    seed: int = 0,
    residual_ratio: float = 0.2,
) -> ModelState:
    """Copy support/prompt embeddings into memories and build the adapter."""
    if support.dim != prompts.dim:
        raise DimMismatch(
            f"support dim {support.dim} != text dim {prompts.dim}"
        )
    if support.num_classes != prompts.num_classes:
        raise DimMismatch("support and prompt banks disagree on class count")
    bank = MemoryBank(
        image_memory=Tensor(support.embeddings.astype(np.float32).copy(),
                            requires_grad=True),
        text_memory=Tensor(prompts.embeddings.astype(np.float32).copy(),
                           requires_grad=train_text),
        image_labels=support.labels.copy(),
        text_labels=prompts.labels.copy(),
        num_classes=support.num_classes,
        train_image=True,
        train_text=train_text,
    )
    adapter = init_adapter(adapter_kind, support.dim, seed, residual_ratio)
    return ModelState(bank=bank, adapter=adapter)


def adapt_queries(tape: Tape, params: AdapterParams, queries: Tensor) -> Tensor:
    """Apply the residual adapter to query rows (L, C).

    Identity is an exact passthrough. The other kinds blend the stack
    output with the input and re-normalize each row.
    """
    if params.kind == "identity":
        return queries
    w = params.weights
    if params.kind == "mlp":
        if queries.shape[1] != w["w1"].shape[0]:
            raise DimMismatch(
                f"query dim {queries.shape[1]} != adapter dim {w['w1'].shape[0]}"
            )
        h = tape.relu(tape.add_bias(tape.matmul(queries, w["w1"]), w["b1"]))
        f = tape.add_bias(tape.matmul(h, w["w2"]), w["b2"])
    else:
        side = params.grid_side
        if queries.shape[1] != side * side:
            raise DimMismatch(
                f"query dim {queries.shape[1]} != adapter grid {side}x{side}"
            )
        x = tape.reshape(queries, (queries.shape[0], 1, side, side))
        n_layers = 2 if params.kind == "conv2" else 3
        for i in range(1, n_layers + 1):
            x = tape.conv2d(x, w[f"w{i}"], w[f"b{i}"])
            if i < n_layers:
                x = tape.relu(x)
        f = tape.reshape(x, (queries.shape[0], side * side))
    r = params.residual_ratio
    blended = tape.add(tape.scale(f, r), tape.scale(queries, 1.0 - r))
    return tape.l2norm_rows(blended)


def compute_prototypes(tape: Tape, bank: MemoryBank) -> PrototypeSet:
    """Per-class means of the live memory rows; differentiable."""
    return PrototypeSet(
        image_prototypes=tape.mean_rows(
            bank.image_memory, labels=bank.image_labels, num_groups=bank.num_classes
        ),
        text_prototypes=tape.mean_rows(
            bank.text_memory, labels=bank.text_labels, num_groups=bank.num_classes
        ),
    )


def modality_probs(
    tape: Tape, protos: PrototypeSet, adapted: Tensor, beta: float
) -> tuple[Tensor, Tensor]:
    """Class probabilities per modality: softmax over -beta * squared distance."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    p_image = tape.softmax(
        tape.scale(tape.sq_euclidean(adapted, protos.image_prototypes), -beta)
    )
    p_text = tape.softmax(
        tape.scale(tape.sq_euclidean(adapted, protos.text_prototypes), -beta)
    )
    return p_image, p_text


def mixture_probs(tape: Tape, p_image: Tensor, p_text: Tensor, alpha: float) -> Tensor:
    """Convex combination alpha * p_image + (1 - alpha) * p_text."""
    return tape.add(tape.scale(p_image, alpha), tape.scale(p_text, 1.0 - alpha))


def forward_probs(
    tape: Tape, state: ModelState, queries: Tensor, hp: MixtureHyperparams
) -> Tensor:
    """Full forward pass from raw queries to mixture probabilities (L, N)."""
    adapted = adapt_queries(tape, state.adapter, queries)
    protos = compute_prototypes(tape, state.bank)
    p_image, p_text = modality_probs(tape, protos, adapted, hp.beta)
    return mixture_probs(tape, p_image, p_text, hp.alpha)


def classify_batch(
    state: ModelState, queries: np.ndarray, hp: MixtureHyperparams
) -> tuple[np.ndarray, np.ndarray]:
    """Classify query rows against a frozen model snapshot.

    Runs in float64 regardless of the stored dtype. Returns (probs (L, N)
    float64, labels (L,) int64); argmax ties break toward the lowest index.
    """
    snapshot = state.as_dtype(np.float64)
    tape = Tape()
    q = Tensor(np.asarray(queries, dtype=np.float64))
    probs = forward_probs(tape, snapshot, q, hp).data
    return probs, np.argmax(probs, axis=1).astype(np.int64)


def classify(
    state: ModelState, query: np.ndarray, hp: MixtureHyperparams
) -> tuple[np.ndarray, int]:
    """Single-query convenience wrapper around classify_batch."""
    probs, labels = classify_batch(state, np.asarray(query)[None, :], hp)
    return probs[0], int(labels[0])


def export_prototypes(
    protos: PrototypeSet, vocab: ClassVocabulary, path
) -> None:
    """Write prototypes as CSV: header class,modality,d0..d{C-1}, one row
    per prototype per modality (all image rows, then all text rows)."""
    img = protos.image_prototypes.data
    txt = protos.text_prototypes.data
    dim = img.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "modality"] + [f"d{i}" for i in range(dim)])
        for modality, block in (("image", img), ("text", txt)):
            for k, name in enumerate(vocab.names):
                writer.writerow([name, modality] + [repr(float(v)) for v in block[k]])


def snapshot_prototypes(state: ModelState) -> PrototypeSet:
    """Prototypes of the current memory values, detached from any training tape."""
    return compute_prototypes(Tape(), state.as_dtype(np.float64).bank)
