"""Flat parameter blobs: little-endian float64 data plus a JSON index.

The index maps each parameter name to ``{"offset": <byte offset>, "shape": [...]}``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

_LE_F64 = np.dtype("<f8")


class BlobError(ValueError):
    pass


def save_arrays(arrays: Mapping[str, np.ndarray], blob_path: Path, index_path: Path) -> None:
    index = {}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=_LE_F64)
            fh.write(data.tobytes())
            index[name] = {"offset": offset, "shape": list(data.shape)}
            offset += data.nbytes
    Path(index_path).write_text(json.dumps(index, indent=1))


def load_arrays(blob_path: Path, index_path: Path) -> dict[str, np.ndarray]:
    try:
        index = json.loads(Path(index_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BlobError(f"cannot read index {index_path}: {exc}") from exc
    raw = Path(blob_path).read_bytes()
    out = {}
    for name, entry in index.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["offset"])
        stop = start + count * _LE_F64.itemsize
        if stop > len(raw):
            raise BlobError(f"{blob_path}: truncated at parameter {name!r}")
        out[name] = np.frombuffer(raw[start:stop], dtype=_LE_F64).reshape(shape).astype(np.float64)
    return out
