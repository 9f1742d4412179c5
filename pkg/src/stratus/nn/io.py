"""Weight files: a little-endian float32 blob plus a text manifest with one
``name shape offset`` line per array (offsets in float32 elements)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def save_weights(path_prefix: str | Path, weights: dict[str, np.ndarray]):
    prefix = Path(path_prefix)
    lines, chunks, offset = [], [], 0
    for name in sorted(weights):
        arr = np.asarray(weights[name], dtype="<f4")
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {offset}")
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    prefix.with_suffix(".manifest").write_text("\n".join(lines) + "\n")
    prefix.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_weights(path_prefix: str | Path) -> dict[str, np.ndarray]:
    prefix = Path(path_prefix)
    blob = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f4")
    weights = {}
    for line in prefix.with_suffix(".manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split()
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        size = int(np.prod(dims)) if dims else 1
        start = int(offset)
        if start + size > blob.size:
            raise ValueError(f"weight file too short for {name}")
        weights[name] = blob[start:start + size].reshape(dims).astype(np.float32)
    return weights
