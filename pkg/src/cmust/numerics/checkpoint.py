"""Directory checkpoints: ``params.json`` plus raw little-endian float64 blobs.

Layout::

    <dir>/params.json          ordered [{name, shape, file, mask_file}]
    <dir>/<sanitized>.f64      values, '<f8', row-major
    <dir>/<sanitized>.mask     freeze mask, one byte (0/1) per element
    <dir>/meta.json            free-form metadata supplied by the caller
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from ..io import atomic_write_bytes, atomic_write_json
from .optim import Parameter

_UNSAFE = re.compile(r"[^A-Za-z0-9_.-]")


def sanitize(name: str) -> str:
    return _UNSAFE.sub("_", name.replace("/", "__"))


def save_checkpoint(
    path: str | os.PathLike,
    params: Iterable[Parameter],
    meta: Mapping[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    used: set[str] = set()
    for p in params:
        stem = sanitize(p.name)
        if stem in used:
            raise ValueError(f"sanitized name collision for {p.name!r}")
        used.add(stem)
        atomic_write_bytes(path / f"{stem}.f64", p.value.astype("<f8").tobytes(order="C"))
        atomic_write_bytes(path / f"{stem}.mask", p.freeze_mask.astype(np.uint8).tobytes(order="C"))
        index.append(
            {"name": p.name, "shape": list(p.shape), "file": f"{stem}.f64", "mask_file": f"{stem}.mask"}
        )
    if meta is not None:
        atomic_write_json(path / "meta.json", dict(meta))
    atomic_write_json(path / "params.json", index)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[list[Parameter], dict[str, Any]]:
    """Read a checkpoint directory back into ``Parameter`` objects (and meta)."""
    path = Path(path)
    index_file = path / "params.json"
    if not index_file.exists():
        raise FileNotFoundError(f"no params.json in {path}")
    index = json.loads(index_file.read_text(encoding="utf-8"))
    params = []
    for entry in index:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = (path / entry["file"]).read_bytes()
        if len(raw) != 8 * count:
            raise ValueError(f"{entry['name']}: expected {8 * count} bytes, found {len(raw)}")
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        mask_raw = (path / entry["mask_file"]).read_bytes()
        if len(mask_raw) != count:
            raise ValueError(f"{entry['name']}: mask has {len(mask_raw)} bytes, expected {count}")
        mask = np.frombuffer(mask_raw, dtype=np.uint8).reshape(shape).astype(bool)
        params.append(Parameter(entry["name"], values, mask))
    meta_file = path / "meta.json"
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    return params, meta
