"""Deterministic zip archives of named float32 arrays plus a JSON manifest.

Entries carry a fixed timestamp and are written in sorted order, so equal
content always gives byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

FIXED_DATE = (1980, 1, 1, 0, 0, 0)
MANIFEST = "manifest.json"


def _entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def array_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    with np.errstate(over="ignore"):  # a diverged model may hold values beyond float32 range
        arr = np.ascontiguousarray(arr, dtype="<f4")
    np.lib.format.write_array(buf, arr, allow_pickle=False)
    return buf.getvalue()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=2).encode("utf-8")


def write_archive(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _entry(zf, MANIFEST, canonical_json(manifest))
        for name in sorted(arrays):
            _entry(zf, f"arrays/{name}.npy", array_bytes(arrays[name]))
    tmp.replace(path)


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read(MANIFEST).decode("utf-8"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                with zf.open(name) as fh:
                    arr = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
                arrays[name[len("arrays/"):-len(".npy")]] = arr
    return arrays, manifest
