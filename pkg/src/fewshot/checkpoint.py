"""Checkpoint container: a zip of named float64 arrays plus a manifest."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamps, reproducible archives


def save_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Write arrays (little-endian float64 .npy payloads) and a manifest."""
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(
            zipfile.ZipInfo("manifest.json", _EPOCH),
            json.dumps(manifest, sort_keys=True, indent=1),
        )
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name], dtype="<f8"))
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", _EPOCH), buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint file {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for info in zf.infolist():
                if info.filename.startswith("arrays/") and info.filename.endswith(".npy"):
                    name = info.filename[len("arrays/") : -len(".npy")]
                    arrays[name] = np.load(io.BytesIO(zf.read(info.filename)))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataError(f"checkpoint file {path} is not a valid container") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"checkpoint {path} has format_version {manifest.get('format_version')}, "
            f"expected {FORMAT_VERSION}"
        )
    return arrays, manifest
