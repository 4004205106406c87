"""Raw-tensor directory format used by model checkpoints.

manifest.json maps tensor names to {file, shape, dtype}; each tensor is a
headerless little-endian array in its own file. Extra manifest sections
(fusion config, taxonomy, train config) ride along under "meta".
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import BadMagic, MissingModalityFile

CHECKPOINT_VERSION = 1


def _tensor_filename(name: str) -> str:
    return name.replace("/", "__").replace(".", "__") + ".bin"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    os.makedirs(path, exist_ok=True)
    table = {}
    for name, arr in tensors.items():
        fname = _tensor_filename(name)
        arr64 = np.ascontiguousarray(arr, dtype="<f8")
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(arr64.tobytes())
        table[name] = {"file": fname, "shape": list(arr.shape), "dtype": "<f8"}
    manifest = {"version": CHECKPOINT_VERSION, "tensors": table, "meta": meta}
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise BadMagic(f"no manifest.json in {path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {manifest.get('version')!r}")
    tensors = {}
    for name, desc in manifest["tensors"].items():
        fpath = os.path.join(path, desc["file"])
        if not os.path.exists(fpath):
            raise MissingModalityFile(f"tensor file missing: {desc['file']}")
        raw = np.fromfile(fpath, dtype=desc["dtype"])
        tensors[name] = raw.reshape(desc["shape"])
    return tensors, manifest["meta"]
