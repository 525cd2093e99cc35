"""Compressed numeric-array container with a small JSON header.

Label rolls, spectrograms and attention maps all persist through this one
format: a ``.npz`` archive whose ``__header__`` entry holds a JSON object.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_arrays(path, header: dict, **arrays: np.ndarray) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, **header}
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, __header__=blob, **arrays)
    return path


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data.files:
            raise ValueError(f"{path}: missing header entry")
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {header.get('format_version')}")
    return header, arrays
