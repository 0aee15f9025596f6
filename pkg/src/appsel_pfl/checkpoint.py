"""Checkpoint files: a JSON manifest next to a little-endian float64 blob.

The manifest lists every tensor with its shape, byte offset, element count and
frozen flag, plus the SHA-256 of the whole blob. Extra tensors (optimizer
moments) and free-form metadata ride along so a run can resume exactly.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from appsel_pfl.nn import ModelParams

FORMAT = "appsel-checkpoint"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_checkpoint(params: ModelParams, path, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    groups = [("param", params.items(), params.frozen)]
    if extra:
        groups.append(("extra", extra.items(), frozenset()))
    for kind, items, frozen in groups:
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype=_DTYPE)
            raw = arr.tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "offset": offset, "count": int(arr.size),
                            "frozen": name in frozen})
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    blob_path = _blob_path(path)
    blob_path.write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": blob_path.name,
        "dtype": "float64-le",
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "meta": meta or {},
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint_full(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a version-{VERSION} {FORMAT} manifest")
    try:
        blob = (path.parent / manifest["blob"]).read_bytes()
        expected = manifest["sha256"]
        entries = sorted(manifest["tensors"], key=lambda e: e["offset"])
    except (OSError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc})") from exc
    if hashlib.sha256(blob).hexdigest() != expected:
        raise CheckpointError(f"{path}: checksum mismatch for {manifest['blob']}")

    params, frozen, extra = {}, [], {}
    for e in entries:
        try:
            shape = tuple(int(s) for s in e["shape"])
            count, offset = int(e["count"]), int(e["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed tensor entry {e}") from exc
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"{path}: {e['name']} shape {shape} != count {count}")
        end = offset + count * _DTYPE.itemsize
        if offset < 0 or end > len(blob):
            raise CheckpointError(f"{path}: {e['name']} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset).reshape(shape)
        arr = arr.astype(np.float64)
        if e.get("kind", "param") == "extra":
            extra[e["name"]] = arr
        else:
            params[e["name"]] = arr
            if e.get("frozen"):
                frozen.append(e["name"])
    return ModelParams(params, frozen), extra, manifest.get("meta", {})


def load_checkpoint(path) -> ModelParams:
    return load_checkpoint_full(path)[0]


def load_into(template: ModelParams, path) -> ModelParams:
    """Load ``path`` and check it against ``template``'s names and shapes."""
    loaded = load_checkpoint(path)
    if set(loaded.names) != set(template.names):
        raise CheckpointError(f"{path}: tensor names differ from the model")
    tensors = {}
    for name in template.names:
        if loaded[name].shape != template[name].shape:
            raise CheckpointError(
                f"{path}: {name} has shape {loaded[name].shape}, expected {template[name].shape}")
        tensors[name] = loaded[name]
    return ModelParams(tensors, loaded.frozen)


def params_digest(params: ModelParams, names=None) -> dict[str, str]:
    names = params.names if names is None else names
    return {n: hashlib.sha256(np.ascontiguousarray(params[n], dtype=_DTYPE).tobytes()).hexdigest()[:16]
            for n in names}
