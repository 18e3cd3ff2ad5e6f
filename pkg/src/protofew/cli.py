"""Command-line front end wiring the library into reproducible experiments.

Every command resolves its configuration, writes a run manifest next to
its outputs, and removes partial outputs on failure. Seeds are always
explicit flags; nothing is derived from the wall clock.
"""
from __future__ import annotations

import csv
import hashlib
import json
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import LabelOutOfRange, ManifestError, ProtofewError
from .evaluator import evaluate, markdown_table, report_from_json, report_to_json
from .hparam import GridSpec, grid_search, write_grid_csv
from .losses import LossConfig
from .model import (
    ADAPTER_KINDS,
    MixtureHyperparams,
    ModelState,
    classify_batch,
    export_prototypes,
    init_model,
    snapshot_prototypes,
)
from .store import (
    ClassVocabulary,
    EpisodeSpec,
    LoadedDataset,
    QuerySet,
    l2_normalize_rows,
    load_dataset,
    read_container,
    sample_episode,
    write_dataset,
)
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_trace,
)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_inputs(paths: list[Path]) -> dict[str, str]:
    digests = {}
    for p in paths:
        if p.is_dir():
            for child in sorted(p.iterdir()):
                if child.is_file():
                    digests[str(child)] = _sha256(child)
        elif p.is_file():
            digests[str(p)] = _sha256(p)
    return digests


def _write_run_manifest(out_dir: Path, command: str, config: dict,
                        inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": config,
        "input_digests": _digest_inputs(inputs),
        "outputs": [str(p) for p in outputs],
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )


class _OutputGuard:
    """Deletes declared outputs if the command fails partway."""

    def __init__(self, paths: list[Path]):
        self.paths = paths
        self.preexisting = {p for p in paths if p.exists()}

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        for p in self.paths:
            if p in self.preexisting:
                continue
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink(missing_ok=True)
        return False


def _fail(exc: Exception) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(1)


def _resolve_data(data: str | None) -> Path:
    if data is None:
        raise click.UsageError("--data is required (or set PROTO_DATA_DIR)")
    root = Path(data)
    return root / "dataset.json" if root.is_dir() else root


def _episode_support(dataset: LoadedDataset, shots: int | None, seed: int | None):
    if shots is None:
        return dataset.support
    if seed is None:
        raise click.UsageError("--shots requires an explicit --seed")
    spec = EpisodeSpec(n_way=dataset.vocab.size, k_shot=shots, seed=seed)
    return sample_episode(dataset.support, spec)


def _model_for_eval(dataset, checkpoint: str | None, shots, seed) -> tuple[ModelState, dict]:
    """Training-free model from the dataset, or a restored checkpoint."""
    if checkpoint is not None:
        ckpt = load_checkpoint(checkpoint)
        echo = {"variant": "checkpoint", "adapter": ckpt.state.adapter.kind,
                "alpha": ckpt.alpha, "beta": ckpt.beta}
        for key in ("shots", "seed"):
            if key in ckpt.config:
                echo[key] = ckpt.config[key]
        return ckpt.state, echo
    support = _episode_support(dataset, shots, seed)
    state = init_model(support, dataset.text, adapter_kind="identity")
    echo = {"variant": "training-free", "adapter": "identity",
            "shots": shots, "seed": seed}
    return state, echo


_data_option = click.option(
    "--data", envvar="PROTO_DATA_DIR", default=None,
    help="Dataset directory or manifest path (default: $PROTO_DATA_DIR).",
)


@click.group()
@click.version_option(__version__)
def main():
    """Few-shot classification over precomputed image/text embeddings."""


# ----------------------------------------------------------------- ingest

def _read_embedding_csv(path: Path, with_prompts: bool = False):
    """CSV with header label[,prompt],d0..d{C-1}; label cells hold class names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise ManifestError(f"{path}: first CSV column must be 'label'")
        has_prompt = with_prompts and len(header) > 1 and header[1] == "prompt"
        skip = 2 if has_prompt else 1
        names, prompts, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            names.append(row[0])
            if has_prompt:
                prompts.append(row[1])
            try:
                rows.append([float(v) for v in row[skip:]])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        if not rows:
            return names, (prompts if has_prompt else None), np.zeros(
                (0, max(len(header) - skip, 0)), dtype=np.float32)
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ManifestError(f"{path}: rows have inconsistent dimensions {sorted(widths)}")
        return names, (prompts if has_prompt else None), np.asarray(rows, dtype=np.float32)


def _read_split_input(path_str: str, labels_path: str | None, with_prompts=False):
    path = Path(path_str)
    if path.suffix == ".pce1":
        data = read_container(path)
        if labels_path is None:
            return None, None, data
        names = [ln.strip() for ln in Path(labels_path).read_text().splitlines() if ln.strip()]
        return names, None, data
    names, prompts, data = _read_embedding_csv(path, with_prompts)
    return names, prompts, data


def _names_to_indices(names: list[str] | None, vocab: ClassVocabulary, what: str):
    if names is None:
        return None
    indices = []
    for name in names:
        if name not in vocab.names:
            raise LabelOutOfRange(f"{what}: label {name!r} is not a known class")
        indices.append(vocab.index_of(name))
    return indices


@main.command()
@click.option("--support", "support_path", required=True)
@click.option("--support-labels", default=None, help="Label file when --support is a .pce1.")
@click.option("--text", "text_path", required=True)
@click.option("--text-labels", default=None)
@click.option("--val", "val_path", required=True)
@click.option("--val-labels", default=None)
@click.option("--test", "test_path", required=True)
@click.option("--test-labels", default=None)
@click.option("--classes", "classes_path", default=None,
              help="One class name per line; defines the class index order.")
@click.option("--out", "out_dir", required=True)
def ingest(support_path, support_labels, text_path, text_labels, val_path,
           val_labels, test_path, test_labels, classes_path, out_dir):
    """Convert CSV or PCE1 inputs into a validated dataset directory."""
    out = Path(out_dir)
    try:
        with _OutputGuard([out]):
            sup_names, _, sup_data = _read_split_input(support_path, support_labels)
            txt_names, prompts, txt_data = _read_split_input(
                text_path, text_labels, with_prompts=True)
            val_names, _, val_data = _read_split_input(val_path, val_labels)
            test_names, _, test_data = _read_split_input(test_path, test_labels)
            if classes_path is not None:
                class_names = [ln.strip() for ln in Path(classes_path).read_text().splitlines()
                               if ln.strip()]
            elif sup_names is not None:
                class_names = sorted(set(sup_names))
            else:
                raise ManifestError("PCE1 ingestion requires --classes or label files")
            vocab = ClassVocabulary(tuple(class_names))
            manifest_path = write_dataset(
                out,
                classes=class_names,
                support=(sup_data, _names_to_indices(sup_names, vocab, "support")),
                text=(txt_data, _names_to_indices(txt_names, vocab, "text")),
                val=(val_data, _names_to_indices(val_names, vocab, "val")),
                test=(test_data, _names_to_indices(test_names, vocab, "test")),
                prompts=prompts,
            )
            load_dataset(manifest_path)  # exit 0 only for a fully valid bundle
            _write_run_manifest(
                out, "ingest",
                {"support": support_path, "text": text_path, "val": val_path,
                 "test": test_path, "classes": classes_path},
                [Path(p) for p in (support_path, text_path, val_path, test_path)],
                [manifest_path],
            )
    except (ProtofewError, OSError) as exc:
        _fail(exc)
    click.echo(f"wrote dataset to {out}")


# ------------------------------------------------------------------- eval

@main.command(name="eval")
@_data_option
@click.option("--variant", type=click.Choice(["training-free", "checkpoint"]),
              default="training-free")
@click.option("--checkpoint", default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--split", type=click.Choice(["test", "val"]), default="test")
@click.option("--shots", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", required=True)
def eval_cmd(data, variant, checkpoint, alpha, beta, split, shots, seed, out_path):
    """Evaluate a training-free or checkpointed model on a labeled split."""
    out = Path(out_path)
    try:
        with _OutputGuard([out]):
            dataset = load_dataset(_resolve_data(data))
            if variant == "checkpoint" and checkpoint is None:
                raise click.UsageError("--variant checkpoint requires --checkpoint")
            state, echo = _model_for_eval(
                dataset, checkpoint if variant == "checkpoint" else None, shots, seed)
            if alpha is not None:
                echo["alpha"] = alpha
            if beta is not None:
                echo["beta"] = beta
            if echo.get("alpha") is None or echo.get("beta") is None:
                raise click.UsageError("--alpha and --beta are required for this variant")
            hp = MixtureHyperparams(alpha=echo["alpha"], beta=echo["beta"])
            queries = dataset.test if split == "test" else dataset.val
            echo["split"] = split
            echo["dataset"] = Path(data).name if data else "-"
            # keep checkpoint-recorded shots/seed unless overridden here
            if shots is not None or "shots" not in echo:
                echo["shots"] = shots
            if seed is not None or "seed" not in echo:
                echo["seed"] = seed
            report = evaluate(state, queries, hp, config_echo=echo)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(report_to_json(report))
            _write_run_manifest(out.parent, "eval", echo,
                                [Path(data)] if data else [], [out])
    except (ProtofewError, OSError) as exc:
        _fail(exc)
    click.echo(f"accuracy {json.loads(out.read_text())['overall_accuracy']:.4f} -> {out}")


# ------------------------------------------------------------------ train

@main.command(name="train")
@_data_option
@click.option("--adapter", type=click.Choice(list(ADAPTER_KINDS)), default="mlp")
@click.option("--train-text", type=bool, default=False)
@click.option("--losses", "losses_flag", default="l1,l2,l3",
              help="Comma-separated subset of l1,l2,l3.")
@click.option("--shots", type=int, default=None)
@click.option("--seed", type=int, required=True)
@click.option("--epochs", type=int, default=100)
@click.option("--lr", type=float, default=1e-3)
@click.option("--batch-size", type=int, default=None)
@click.option("--residual-ratio", type=float, default=0.2)
@click.option("--alpha", type=float, required=True)
@click.option("--beta", type=float, required=True)
@click.option("--out", "out_dir", required=True)
def train_cmd(data, adapter, train_text, losses_flag, shots, seed, epochs, lr,
              batch_size, residual_ratio, alpha, beta, out_dir):
    """Fine-tune memories and adapter; writes a checkpoint plus a loss trace."""
    out = Path(out_dir)
    try:
        with _OutputGuard([out]):
            dataset = load_dataset(_resolve_data(data))
            chosen = {s.strip() for s in losses_flag.split(",") if s.strip()}
            unknown = chosen - {"l1", "l2", "l3"}
            if unknown:
                raise click.UsageError(f"unknown loss terms: {sorted(unknown)}")
            loss_cfg = LossConfig("l1" in chosen, "l2" in chosen, "l3" in chosen)
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
            episode_seed = int(rng.integers(2**63))
            init_seed = int(rng.integers(2**63))
            support = _episode_support(dataset, shots, episode_seed)
            state = init_model(support, dataset.text, adapter_kind=adapter,
                               train_text=train_text, seed=init_seed,
                               residual_ratio=residual_ratio)
            hp = MixtureHyperparams(alpha=alpha, beta=beta)
            cfg = TrainConfig(epochs=epochs, learning_rate=lr, batch_size=batch_size,
                              seed=seed, loss_config=loss_cfg, train_text=train_text,
                              adapter_kind=adapter)
            state, trace = train(state, support, cfg, hp)
            final = trace[-1] if trace else None
            config_echo = {
                "adapter": adapter, "train_text": train_text,
                "losses": loss_cfg.label(), "shots": shots, "seed": seed,
                "epochs": epochs, "lr": lr, "batch_size": batch_size,
                "residual_ratio": residual_ratio, "alpha": alpha, "beta": beta,
                "dataset": Path(data).name if data else "-",
            }
            ckpt = Checkpoint(
                state=state, classes=dataset.vocab.names, alpha=alpha, beta=beta,
                epoch=len(trace) - 1 if trace else -1,
                final_losses={} if final is None else {
                    "l1": final.l1, "l2": final.l2, "l3": final.l3,
                    "total": final.total,
                },
                config=config_echo,
            )
            save_checkpoint(ckpt, out)
            write_loss_trace(trace, out / "loss_trace.csv")
            _write_run_manifest(out, "train", config_echo,
                                [Path(data)] if data else [],
                                [out / "header.json", out / "loss_trace.csv"])
    except (ProtofewError, OSError) as exc:
        _fail(exc)
    click.echo(f"trained {epochs} epochs -> {out}")


# ----------------------------------------------------------------- search

@main.command(name="search")
@_data_option
@click.option("--checkpoint", default=None)
@click.option("--alphas", default=None, help="Comma-separated mixing weights.")
@click.option("--betas", default=None, help="Comma-separated sharpening values.")
@click.option("--shots", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", required=True)
@click.option("--best-out", default=None)
def search_cmd(data, checkpoint, alphas, betas, shots, seed, out_path, best_out):
    """Grid-search alpha/beta on the validation split; emits the full grid CSV."""
    out = Path(out_path)
    best_path = Path(best_out) if best_out else None
    try:
        with _OutputGuard([out] + ([best_path] if best_path else [])):
            dataset = load_dataset(_resolve_data(data))
            state, echo = _model_for_eval(dataset, checkpoint, shots, seed)
            grid = GridSpec(
                alphas=tuple(float(a) for a in alphas.split(",")) if alphas else None,
                betas=tuple(float(b) for b in betas.split(",")) if betas else None,
            )
            result = grid_search(state, dataset.val, grid)
            out.parent.mkdir(parents=True, exist_ok=True)
            write_grid_csv(result, out)
            chosen = {"alpha": result.best.alpha, "beta": result.best.beta,
                      "accuracy": result.best_accuracy}
            if best_path is not None:
                best_path.write_text(json.dumps(chosen, indent=2, sort_keys=True))
            echo.update({"alphas": alphas, "betas": betas})
            _write_run_manifest(out.parent, "search", echo,
                                [Path(data)] if data else [],
                                [out] + ([best_path] if best_path else []))
    except (ProtofewError, OSError) as exc:
        _fail(exc)
    click.echo(f"best alpha={chosen['alpha']} beta={chosen['beta']} "
               f"accuracy={chosen['accuracy']:.4f}")


# ---------------------------------------------------------------- predict

@main.command(name="predict")
@_data_option
@click.option("--checkpoint", default=None)
@click.option("--queries", "queries_path", required=True, help="PCE1 container.")
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--out", "out_path", required=True)
def predict_cmd(data, checkpoint, queries_path, alpha, beta, out_path):
    """Classify an unlabeled container; writes row,label,class,confidence CSV."""
    out = Path(out_path)
    try:
        with _OutputGuard([out]):
            dataset = load_dataset(_resolve_data(data))
            state, echo = _model_for_eval(dataset, checkpoint, None, None)
            if alpha is not None:
                echo["alpha"] = alpha
            if beta is not None:
                echo["beta"] = beta
            if echo.get("alpha") is None or echo.get("beta") is None:
                raise click.UsageError("--alpha and --beta are required for this variant")
            hp = MixtureHyperparams(alpha=echo["alpha"], beta=echo["beta"])
            raw = read_container(queries_path)
            queries = QuerySet(embeddings=l2_normalize_rows(raw) if raw.size else raw,
                               labels=None, num_classes=dataset.vocab.size)
            probs, labels = classify_batch(state, queries.embeddings, hp)
            out.parent.mkdir(parents=True, exist_ok=True)
            with open(out, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["row", "label", "class", "confidence"])
                for i, lab in enumerate(labels):
                    writer.writerow([i, int(lab), dataset.vocab.names[int(lab)],
                                     repr(float(probs[i, lab]))])
            _write_run_manifest(out.parent, "predict", echo,
                                [Path(queries_path)], [out])
    except (ProtofewError, OSError) as exc:
        _fail(exc)
    click.echo(f"predictions -> {out}")


# ----------------------------------------------------------------- export

@main.command(name="export")
@_data_option
@click.option("--checkpoint", default=None)
@click.option("--out", "out_path", required=True)
def export_cmd(data, checkpoint, out_path):
    """Dump current image/text prototypes as CSV for external plotting."""
    out = Path(out_path)
    try:
        with _OutputGuard([out]):
            dataset = load_dataset(_resolve_data(data))
            state, echo = _model_for_eval(dataset, checkpoint, None, None)
            protos = snapshot_prototypes(state)
            out.parent.mkdir(parents=True, exist_ok=True)
            export_prototypes(protos, dataset.vocab, out)
            _write_run_manifest(out.parent, "export", echo,
                                [Path(data)] if data else [], [out])
    except (ProtofewError, OSError) as exc:
        _fail(exc)
    click.echo(f"prototypes -> {out}")


# ----------------------------------------------------------------- report

@main.command(name="report")
@click.argument("reports", nargs=-1, required=True)
@click.option("--out", "out_path", required=True)
def report_cmd(reports, out_path):
    """Merge evaluation report JSONs into one Markdown table."""
    out = Path(out_path)
    try:
        with _OutputGuard([out]):
            parsed = [report_from_json(Path(p).read_text()) for p in reports]
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(markdown_table(parsed))
            _write_run_manifest(out.parent, "report", {"reports": list(reports)},
                                [Path(p) for p in reports], [out])
    except (ProtofewError, OSError, json.JSONDecodeError, KeyError) as exc:
        _fail(exc)
    click.echo(f"report table ({len(reports)} rows) -> {out}")


if __name__ == "__main__":
    main()
