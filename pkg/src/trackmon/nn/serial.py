"""Deterministic array serialization: an uncompressed npz with fixed zip
metadata, so identical arrays produce byte-identical files, and values
round-trip bit-exactly."""

from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np

ARRAY_STORE_VERSION = 1
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write a name->array map as an npz readable by ``np.load``.

    Entries are written in sorted-name order with a constant timestamp and
    no compression; the store version travels as its own entry.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    items = dict(arrays)
    if "__store_version__" in items:
        raise ValueError("'__store_version__' is a reserved entry name")
    items["__store_version__"] = np.array([ARRAY_STORE_VERSION], dtype=np.int64)
    with zipfile.ZipFile(path, mode="w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(items):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(items[name]), version=(1, 0), allow_pickle=False
            )
            info = zipfile.ZipInfo(name + ".npy", date_time=_FIXED_DATE)
            zf.writestr(info, buf.getvalue())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    """Read back a map written by :func:`save_arrays` (bit-exact)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"array store not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        out = {name: np.array(data[name]) for name in data.files}
    version = out.pop("__store_version__", None)
    if version is None or int(version[0]) != ARRAY_STORE_VERSION:
        got = None if version is None else int(version[0])
        raise ValueError(
            f"unsupported array store version {got}; expected {ARRAY_STORE_VERSION}"
        )
    return out
