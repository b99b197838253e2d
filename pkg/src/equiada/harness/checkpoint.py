"""Checkpoint files: a JSON manifest followed by a float64 parameter blob.

Layout::

    EQUIADA-CKPT 1\\n
    manifest <byte length>\\n
    <manifest JSON, UTF-8>\\n
    <blob: tensors concatenated as little-endian float64>

The manifest's ``tensors`` directory lists name, shape, byte offset and the
trainable flag of every tensor; ``blob_sha256`` is the SHA-256 of the blob.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from equiada import numerics as nx

HEADER = b"EQUIADA-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def params_blob(params: nx.ParamSet) -> tuple[bytes, list[dict]]:
    directory, chunks, offset = [], [], 0
    for name in sorted(params.names()):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "trainable": params.is_trainable(name)}
        )
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), directory


def params_hash(params: nx.ParamSet) -> str:
    return hashlib.sha256(params_blob(params)[0]).hexdigest()


@dataclass
class Checkpoint:
    manifest: dict
    params: nx.ParamSet

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    @property
    def blob_hash(self) -> str:
        return self.manifest["blob_sha256"]


def save_checkpoint(path, params: nx.ParamSet, manifest: dict) -> Checkpoint:
    blob, directory = params_blob(params)
    manifest = dict(manifest)
    manifest["tensors"] = directory
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    text = json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    with open(path, "wb") as fh:
        fh.write(HEADER)
        fh.write(f"manifest {len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(blob)
    return Checkpoint(manifest, params)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if not buf.startswith(HEADER):
        raise CheckpointError(f"{path}: not an equiada checkpoint")
    rest = buf[len(HEADER) :]
    line, _, rest = rest.partition(b"\n")
    try:
        tag, size = line.decode("ascii").split()
        size = int(size)
        assert tag == "manifest"
    except (ValueError, AssertionError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: malformed manifest header") from None
    if len(rest) < size:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(rest[:size].decode("utf-8"))
    blob = rest[size:]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest.get("blob_sha256"):
        raise CheckpointError(f"{path}: parameter blob hash mismatch ({digest} != {manifest.get('blob_sha256')})")
    params = nx.ParamSet()
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the end of the blob")
        arr = np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        params.add(entry["name"], arr, entry["trainable"])
    return Checkpoint(manifest, params)
