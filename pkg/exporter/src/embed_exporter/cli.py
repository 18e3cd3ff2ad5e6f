"""Command-line entry point for the embedding exporter."""
from __future__ import annotations

import sys
from pathlib import Path

import click

from .errors import ExporterError
from .export import ExportJob, export, read_templates


@click.group()
def main():
    """Export image/prompt embeddings as PCE1 datasets."""


@main.command(name="export")
@click.option("--images", "images_dir", required=True,
              help="Class-per-subfolder image tree for the support split.")
@click.option("--templates", "templates_path", required=True,
              help="Prompt templates, one per line; '{class}' is substituted.")
@click.option("--backbone", required=True,
              help="'hash-<dim>' or 'clip:<huggingface_model_id>'.")
@click.option("--val-images", default=None,
              help="Optional validation image tree (same class folders).")
@click.option("--test-images", default=None,
              help="Optional test image tree (same class folders).")
@click.option("--out", "out_dir", required=True)
def export_cmd(images_dir, templates_path, backbone, val_images, test_images, out_dir):
    """Embed every image and prompt, then write containers + manifest."""
    try:
        job = ExportJob(
            image_root=Path(images_dir),
            templates=read_templates(templates_path),
            backbone=backbone,
            out_dir=Path(out_dir),
            val_root=Path(val_images) if val_images else None,
            test_root=Path(test_images) if test_images else None,
        )
        manifest = export(job)
    except (ExporterError, OSError) as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    click.echo(f"wrote {manifest}")


if __name__ == "__main__":
    main()
