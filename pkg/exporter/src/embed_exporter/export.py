"""Walk a class-per-subfolder image tree, embed images and prompts, and
write the PCE1 containers plus dataset.json manifest the classifier loads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import load_encoder
from .errors import EmptyClassFolder, ExporterError
from .pce import write_container

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass(frozen=True)
class ExportJob:
    image_root: Path
    templates: tuple[str, ...]
    backbone: str
    out_dir: Path
    val_root: Path | None = None
    test_root: Path | None = None

    def __post_init__(self):
        if not self.templates:
            raise ExporterError("at least one prompt template is required")


def read_templates(path: str | Path) -> tuple[str, ...]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return tuple(ln for ln in lines if ln and not ln.startswith("#"))


def render_prompt(template: str, class_name: str) -> str:
    if "{class}" in template:
        return template.replace("{class}", class_name)
    if "{}" in template:
        return template.replace("{}", class_name)
    return f"{template} {class_name}".strip()


def _scan_classes(root: Path) -> list[str]:
    if not root.is_dir():
        raise ExporterError(f"image root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ExporterError(f"{root}: need at least 2 class subfolders")
    return classes


def _class_images(root: Path, classes: list[str], require_nonempty=True):
    """Per-class sorted image paths; deterministic listing order."""
    per_class: list[list[Path]] = []
    for name in classes:
        files = sorted(
            p for p in (root / name).iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        if require_nonempty and not files:
            raise EmptyClassFolder(f"{root / name} holds no images")
        per_class.append(files)
    return per_class


def _l2_normalize(rows: np.ndarray) -> np.ndarray:
    if rows.shape[0] == 0:
        return rows.astype(np.float32)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ExporterError("encoder produced a zero embedding")
    return (rows.astype(np.float64) / norms).astype(np.float32)


def _embed_split(encoder, root: Path | None, classes: list[str], dim: int):
    """Embed one optional query split; absent splits become empty containers."""
    if root is None:
        return np.zeros((0, dim), dtype=np.float32), []
    per_class = _class_images(Path(root), classes)
    paths = [p for files in per_class for p in files]
    labels = [k for k, files in enumerate(per_class) for _ in files]
    return _l2_normalize(encoder.embed_images(paths)), labels


def export(job: ExportJob) -> Path:
    """Run the encoder over the job and write a loadable dataset directory.

    Deterministic for fixed encoder weights and inputs: classes sorted by
    folder name, images sorted by filename, one text row per template per
    class in template order. Returns the manifest path.
    """
    encoder = load_encoder(job.backbone)
    classes = _scan_classes(Path(job.image_root))
    per_class = _class_images(Path(job.image_root), classes)

    support_paths = [p for files in per_class for p in files]
    support_labels = [k for k, files in enumerate(per_class) for _ in files]
    support = _l2_normalize(encoder.embed_images(support_paths))

    prompts = [render_prompt(t, name) for name in classes for t in job.templates]
    text_labels = [k for k in range(len(classes)) for _ in job.templates]
    text = _l2_normalize(encoder.embed_texts(prompts))

    dim = support.shape[1]
    val, val_labels = _embed_split(encoder, job.val_root, classes, dim)
    test, test_labels = _embed_split(encoder, job.test_root, classes, dim)

    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, data, labels in (
        ("support", support, support_labels),
        ("text", text, text_labels),
        ("val", val, val_labels),
        ("test", test, test_labels),
    ):
        fname = f"{name}.pce1"
        write_container(data, out / fname)
        entries[name] = {"file": fname, "labels": [int(x) for x in labels]}
    entries["text"]["prompts"] = prompts
    manifest = {"classes": classes, **entries}
    manifest_path = out / "dataset.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "export_manifest.json").write_text(json.dumps({
        "backbone": encoder.name,
        "dim": dim,
        "templates": list(job.templates),
        "image_root": str(job.image_root),
        "val_root": str(job.val_root) if job.val_root else None,
        "test_root": str(job.test_root) if job.test_root else None,
        "rows": {"support": int(support.shape[0]), "text": int(text.shape[0]),
                 "val": int(val.shape[0]), "test": int(test.shape[0])},
    }, indent=2, sort_keys=True))
    return manifest_path
