"""Fine-tuning loop: Adam over the enabled memories and adapter weights,
with the support set doubling as the query set, plus checkpoint I/O.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor
from .errors import CorruptCheckpoint, NonFiniteLoss, ProtofewError, VersionMismatch
from .losses import LossConfig, loss_l1, loss_l2, loss_l3, total_loss, true_class_probs
from .model import (
    AdapterParams,
    MemoryBank,
    MixtureHyperparams,
    ModelState,
    adapt_queries,
    compute_prototypes,
    mixture_probs,
    modality_probs,
)
from .store import SupportSet, read_container, write_container

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    loss_config: LossConfig = field(default_factory=LossConfig)
    train_text: bool = False
    adapter_kind: str = "identity"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    l1: float | None
    l2: float | None
    l3: float | None
    total: float


class Adam:
    """Adam with constant learning rate; moments kept in float64."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.dtype)


def build_training_loss(
    tape: Tape,
    state: ModelState,
    queries: Tensor,
    labels: np.ndarray,
    hp: MixtureHyperparams,
    cfg: LossConfig,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Assemble the training graph; returns (total, per-term tensors)."""
    protos = compute_prototypes(tape, state.bank)
    parts: dict[str, Tensor] = {}
    if cfg.use_l1:
        adapted = adapt_queries(tape, state.adapter, queries)
        p_image, p_text = modality_probs(tape, protos, adapted, hp.beta)
        probs = mixture_probs(tape, p_image, p_text, hp.alpha)
        parts["l1"] = loss_l1(tape, true_class_probs(tape, probs, labels))
    if cfg.use_l2:
        parts["l2"] = loss_l2(tape, protos)
    if cfg.use_l3:
        parts["l3"] = loss_l3(tape, protos)
    total = total_loss(tape, cfg, parts.get("l1"), parts.get("l2"), parts.get("l3"))
    return total, parts


def train(
    state: ModelState,
    support: SupportSet,
    cfg: TrainConfig,
    hp: MixtureHyperparams,
) -> tuple[ModelState, list[EpochLoss]]:
    """Optimize the enabled parameters against the total loss with S = Q.

    The support rows serve as the query set. Full-batch by default; with a
    batch size, the per-epoch order is a seeded permutation. Deterministic
    under (inputs, config, seed). Aborts on the first non-finite loss.
    """
    queries_np = support.embeddings.astype(np.float32)
    labels = support.labels
    params = state.trainable_params()
    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    trace: list[EpochLoss] = []

    for epoch in range(cfg.epochs):
        if cfg.batch_size is None or cfg.batch_size >= len(labels):
            batches = [np.arange(len(labels))]
        else:
            order = rng.permutation(len(labels))
            batches = [order[i : i + cfg.batch_size]
                       for i in range(0, len(order), cfg.batch_size)]
        sums = {"l1": 0.0, "l2": 0.0, "l3": 0.0, "total": 0.0}
        weight = 0
        for batch in batches:
            tape = Tape()
            q = Tensor(queries_np[batch])
            total, parts = build_training_loss(tape, state, q, labels[batch], hp,
                                               cfg.loss_config)
            value = total.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(
                    f"non-finite total loss at epoch {epoch} "
                    f"(l1={parts.get('l1') and parts['l1'].item()}, "
                    f"l2={parts.get('l2') and parts['l2'].item()}, "
                    f"l3={parts.get('l3') and parts['l3'].item()})"
                )
            opt.zero_grad()
            tape.backward(total)
            opt.step()
            n = len(batch)
            weight += n
            sums["total"] += value * n
            for name in ("l1", "l2", "l3"):
                if name in parts:
                    sums[name] += parts[name].item() * n
        trace.append(EpochLoss(
            epoch=epoch,
            l1=sums["l1"] / weight if cfg.loss_config.use_l1 else None,
            l2=sums["l2"] / weight if cfg.loss_config.use_l2 else None,
            l3=sums["l3"] / weight if cfg.loss_config.use_l3 else None,
            total=sums["total"] / weight,
        ))
    return state, trace


def write_loss_trace(trace: list[EpochLoss], path) -> None:
    """CSV trace: epoch,l1,l2,l3,total; disabled terms are left empty."""
    lines = ["epoch,l1,l2,l3,total"]
    for row in trace:
        cells = [str(row.epoch)]
        for v in (row.l1, row.l2, row.l3, row.total):
            cells.append("" if v is None else repr(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and its chosen hyperparameters."""

    state: ModelState
    classes: tuple[str, ...]
    alpha: float
    beta: float
    epoch: int
    final_losses: dict
    config: dict


def _tensor_to_2d(data: np.ndarray) -> np.ndarray:
    if data.ndim == 1:
        return data.reshape(1, -1)
    if data.ndim == 2:
        return data
    return data.reshape(data.shape[0], -1)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write header.json plus one PCE1 container per tensor."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    state = ckpt.state
    tensors = {}
    for name, t in state.named_tensors().items():
        fname = name.replace(".", "_") + ".pce1"
        write_container(_tensor_to_2d(t.data.astype(np.float32)), out / fname)
        tensors[name] = {"file": fname, "shape": list(t.shape)}
    header = {
        "version": CHECKPOINT_VERSION,
        "alpha": ckpt.alpha,
        "beta": ckpt.beta,
        "epoch": ckpt.epoch,
        "final_losses": ckpt.final_losses,
        "config": ckpt.config,
        "classes": list(ckpt.classes),
        "adapter": {
            "kind": state.adapter.kind,
            "residual_ratio": state.adapter.residual_ratio,
            "grid_side": state.adapter.grid_side,
        },
        "train_image": state.bank.train_image,
        "train_text": state.bank.train_text,
        "image_labels": [int(x) for x in state.bank.image_labels],
        "text_labels": [int(x) for x in state.bank.text_labels],
        "num_classes": state.bank.num_classes,
        "tensors": tensors,
    }
    (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    """Rebuild a checkpoint; tensor payloads round-trip bit-exactly."""
    root = Path(path)
    header_path = root / "header.json"
    if not header_path.exists():
        raise CorruptCheckpoint(f"{root}: missing header.json")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{root}: unreadable header ({exc})") from exc
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint version {version!r}, this build reads {CHECKPOINT_VERSION}"
        )
    try:
        loaded: dict[str, np.ndarray] = {}
        for name, meta in header["tensors"].items():
            data = read_container(root / meta["file"])
            shape = tuple(meta["shape"])
            expected = int(np.prod(shape)) if shape else 1
            if data.size != expected:
                raise CorruptCheckpoint(
                    f"{root}: tensor {name} has {data.size} values, "
                    f"header says shape {shape}"
                )
            loaded[name] = data.reshape(shape)
        adapter_meta = header["adapter"]
        adapter = AdapterParams(
            kind=adapter_meta["kind"],
            weights={
                name.split(".", 1)[1]: Tensor(arr, requires_grad=True)
                for name, arr in loaded.items()
                if name.startswith("adapter.")
            },
            residual_ratio=adapter_meta["residual_ratio"],
            grid_side=adapter_meta["grid_side"],
        )
        bank = MemoryBank(
            image_memory=Tensor(loaded["image_memory"], requires_grad=True),
            text_memory=Tensor(loaded["text_memory"],
                               requires_grad=bool(header["train_text"])),
            image_labels=np.asarray(header["image_labels"], dtype=np.int64),
            text_labels=np.asarray(header["text_labels"], dtype=np.int64),
            num_classes=int(header["num_classes"]),
            train_image=bool(header["train_image"]),
            train_text=bool(header["train_text"]),
        )
        return Checkpoint(
            state=ModelState(bank=bank, adapter=adapter),
            classes=tuple(header["classes"]),
            alpha=float(header["alpha"]),
            beta=float(header["beta"]),
            epoch=int(header["epoch"]),
            final_losses=dict(header["final_losses"]),
            config=dict(header["config"]),
        )
    except VersionMismatch:
        raise
    except (KeyError, TypeError, ValueError, ProtofewError, OSError) as exc:
        raise CorruptCheckpoint(f"{root}: {exc}") from exc
