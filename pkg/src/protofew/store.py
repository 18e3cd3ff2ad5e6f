"""On-disk embedding containers, dataset manifests, splits, and episode sampling.

Container format ("PCE1"): 4 magic bytes, little-endian u32 row count,
little-endian u32 column count, then rows*dim float32 values little-endian
in row-major order. Round trips are bit-exact for finite matrices.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    EmptyClass,
    LabelOutOfRange,
    ManifestError,
    MissingFile,
    NonFinite,
    NotEnoughShots,
    Truncated,
    ZeroNormRow,
)

MAGIC = b"PCE1"
_HEADER = struct.Struct("<4sII")


def write_container(matrix: np.ndarray, path: str | Path) -> None:
    """Write a 2-D float32 matrix to `path` in the PCE1 container format."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    rows, dim = m.shape
    if rows >= 2**32 or dim >= 2**32:
        raise ValueError("matrix extents exceed the u32 container header")
    if not np.isfinite(m).all():
        raise NonFinite("refusing to write non-finite embedding values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, dim))
        fh.write(m.tobytes())


def read_container(path: str | Path) -> np.ndarray:
    """Read a PCE1 container, validating magic, length, and finiteness."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: not a PCE1 container")
    if len(raw) < _HEADER.size:
        raise Truncated(f"{path}: header cut short")
    _, rows, dim = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * rows * dim
    if len(raw) != expected:
        raise Truncated(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
            f"expected {4 * rows * dim} for {rows}x{dim}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, dim)
    if not np.isfinite(data).all():
        raise NonFinite(f"{path}: container holds NaN or Inf values")
    return data.copy()


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm. Norms accumulate in float64."""
    m = np.asarray(matrix)
    norms = np.sqrt(np.sum(m.astype(np.float64) ** 2, axis=1))
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ZeroNormRow(f"row {bad} has zero norm and cannot be normalized")
    out = m.astype(np.float64) / norms[:, None]
    return out.astype(m.dtype)


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names; position in `names` defines the class index."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ManifestError("classification needs at least 2 classes")
        if len(set(self.names)) != len(self.names):
            raise ManifestError("class names must be unique")
        if any(not n for n in self.names):
            raise ManifestError("class names must be non-empty")

    @property
    def size(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        return self.names.index(name)


def _check_labels(labels: np.ndarray, num_classes: int, what: str) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(
            f"{what}: labels must lie in [0, {num_classes}), "
            f"got range [{labels.min()}, {labels.max()}]"
        )


@dataclass(frozen=True)
class SupportSet:
    """Labeled support embeddings; every class must contribute at least one row."""

    embeddings: np.ndarray
    labels: np.ndarray
    num_classes: int
    # Original vocabulary indices when this set is an episode of a larger one.
    class_ids: np.ndarray | None = None
    per_class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.embeddings.ndim != 2 or len(labels) != self.embeddings.shape[0]:
            raise ManifestError("support labels must map one-to-one onto rows")
        _check_labels(labels, self.num_classes, "support set")
        counts = np.bincount(labels, minlength=self.num_classes)
        if np.any(counts == 0):
            missing = int(np.flatnonzero(counts == 0)[0])
            raise EmptyClass(f"class {missing} has no support rows")
        object.__setattr__(self, "per_class_counts", counts)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class TextPromptBank:
    """Prompt embeddings per class; every class needs at least one prompt row."""

    embeddings: np.ndarray
    labels: np.ndarray
    num_classes: int
    prompt_texts: tuple[str, ...] | None = None
    per_class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.embeddings.ndim != 2 or len(labels) != self.embeddings.shape[0]:
            raise ManifestError("text labels must map one-to-one onto rows")
        if self.prompt_texts is not None and len(self.prompt_texts) != len(labels):
            raise ManifestError("prompt_texts must map one-to-one onto rows")
        _check_labels(labels, self.num_classes, "text bank")
        counts = np.bincount(labels, minlength=self.num_classes)
        if np.any(counts == 0):
            missing = int(np.flatnonzero(counts == 0)[0])
            raise EmptyClass(f"class {missing} has no prompt rows")
        object.__setattr__(self, "per_class_counts", counts)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class QuerySet:
    """Embeddings to classify; labels are optional for pure inference."""

    embeddings: np.ndarray
    labels: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            object.__setattr__(self, "labels", labels)
            if len(labels) != self.embeddings.shape[0]:
                raise ManifestError("query labels must map one-to-one onto rows")
            _check_labels(labels, self.num_classes, "query set")

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class EpisodeSpec:
    """Seeded N-way K-shot sampling request."""

    n_way: int
    k_shot: int
    seed: int

    def __post_init__(self):
        if self.k_shot < 1:
            raise ValueError("k_shot must be at least 1")
        if self.n_way < 2:
            raise ValueError("n_way must be at least 2")


@dataclass(frozen=True)
class LoadedDataset:
    vocab: ClassVocabulary
    support: SupportSet
    text: TextPromptBank
    val: QuerySet
    test: QuerySet


def sample_episode(full_support: SupportSet, spec: EpisodeSpec) -> SupportSet:
    """Draw a seeded episode: k_shot rows per class, without replacement.

    Classes are visited in ascending index order so the RNG consumption,
    and therefore the selection, is a pure function of (inputs, seed).
    When n_way < N the selected classes are relabeled compactly in
    ascending order of their original index, recorded in `class_ids`.
    """
    n = full_support.num_classes
    if spec.n_way > n:
        raise ValueError(f"n_way={spec.n_way} exceeds the {n} available classes")
    rng = np.random.default_rng(spec.seed)
    if spec.n_way < n:
        classes = np.sort(rng.choice(n, size=spec.n_way, replace=False))
    else:
        classes = np.arange(n)
    picked_rows = []
    new_labels = []
    for new_idx, cls in enumerate(classes):
        rows = np.flatnonzero(full_support.labels == cls)
        if len(rows) < spec.k_shot:
            raise NotEnoughShots(
                f"class {cls} has {len(rows)} rows, need k_shot={spec.k_shot}"
            )
        chosen = np.sort(rng.choice(rows, size=spec.k_shot, replace=False))
        picked_rows.append(chosen)
        new_labels.append(np.full(spec.k_shot, new_idx, dtype=np.int64))
    order = np.concatenate(picked_rows)
    prior_ids = full_support.class_ids
    class_ids = classes if prior_ids is None else np.asarray(prior_ids)[classes]
    return SupportSet(
        embeddings=full_support.embeddings[order],
        labels=np.concatenate(new_labels),
        num_classes=spec.n_way,
        class_ids=class_ids,
    )


def _read_split(base: Path, entry: dict, what: str) -> tuple[np.ndarray, list | None]:
    if "file" not in entry:
        raise ManifestError(f"{what}: manifest entry is missing 'file'")
    path = base / entry["file"]
    if not path.exists():
        raise MissingFile(f"{what}: no such file {path}")
    return read_container(path), entry.get("labels")


def _labels_array(labels: list | None, rows: int, what: str) -> np.ndarray | None:
    if labels is None:
        return None
    arr = np.asarray(labels, dtype=np.int64)
    if arr.shape != (rows,):
        raise ManifestError(f"{what}: {len(labels)} labels for {rows} rows")
    return arr


def load_dataset(manifest_path: str | Path) -> LoadedDataset:
    """Load and cross-validate a dataset directory from its JSON manifest.

    All embeddings are L2-normalized here, once, at ingestion. Either a
    fully validated bundle is returned or a typed error is raised.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFile(f"no such manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("classes", "support", "text", "val", "test"):
        if key not in manifest:
            raise ManifestError(f"{manifest_path}: missing '{key}' section")

    vocab = ClassVocabulary(tuple(manifest["classes"]))
    base = manifest_path.parent

    support_data, support_labels = _read_split(base, manifest["support"], "support")
    text_data, text_labels = _read_split(base, manifest["text"], "text")
    val_data, val_labels = _read_split(base, manifest["val"], "val")
    test_data, test_labels = _read_split(base, manifest["test"], "test")

    dim = support_data.shape[1]
    for name, data in (("text", text_data), ("val", val_data), ("test", test_data)):
        if data.shape[1] != dim:
            raise DimMismatch(
                f"{name} embeddings have dim {data.shape[1]}, support has {dim}"
            )

    if support_labels is None:
        raise ManifestError("support entry requires labels")
    if text_labels is None:
        raise ManifestError("text entry requires labels")

    n = vocab.size
    support = SupportSet(
        embeddings=l2_normalize_rows(support_data),
        labels=_labels_array(support_labels, support_data.shape[0], "support"),
        num_classes=n,
    )
    prompts = manifest["text"].get("prompts")
    text = TextPromptBank(
        embeddings=l2_normalize_rows(text_data),
        labels=_labels_array(text_labels, text_data.shape[0], "text"),
        num_classes=n,
        prompt_texts=tuple(prompts) if prompts is not None else None,
    )
    val = QuerySet(
        embeddings=l2_normalize_rows(val_data) if val_data.size else val_data,
        labels=_labels_array(val_labels, val_data.shape[0], "val"),
        num_classes=n,
    )
    test = QuerySet(
        embeddings=l2_normalize_rows(test_data) if test_data.size else test_data,
        labels=_labels_array(test_labels, test_data.shape[0], "test"),
        num_classes=n,
    )
    return LoadedDataset(vocab=vocab, support=support, text=text, val=val, test=test)


def write_dataset(
    out_dir: str | Path,
    classes: list[str],
    support: tuple[np.ndarray, list[int]],
    text: tuple[np.ndarray, list[int]],
    val: tuple[np.ndarray, list[int] | None],
    test: tuple[np.ndarray, list[int] | None],
    prompts: list[str] | None = None,
) -> Path:
    """Write containers plus a dataset.json manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, (data, labels) in (
        ("support", support), ("text", text), ("val", val), ("test", test),
    ):
        fname = f"{name}.pce1"
        write_container(np.asarray(data, dtype=np.float32), out / fname)
        entry: dict = {"file": fname}
        if labels is not None:
            entry["labels"] = [int(x) for x in labels]
        entries[name] = entry
    if prompts is not None:
        entries["text"]["prompts"] = list(prompts)
    manifest = {"classes": list(classes), **entries}
    manifest_path = out / "dataset.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
