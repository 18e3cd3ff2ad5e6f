"""Writer for the PCE1 embedding container consumed by the classifier.

Format contract: 4 magic bytes "PCE1", little-endian u32 rows, u32 dim,
then rows*dim float32 values little-endian, row-major. This module is the
exporter's own implementation of the on-disk interface; compatibility
with the consumer is pinned by the integration tests.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCE1"
_HEADER = struct.Struct("<4sII")


def write_container(matrix: np.ndarray, path: str | Path) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("refusing to write non-finite embedding values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())
