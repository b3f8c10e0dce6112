"""Binary checkpoint container and emission cache files.

Layout (all integers little-endian)::

    magic      8 bytes  b"HMSNET\\x00\\x01"
    version    uint32
    header_len uint32
    header     UTF-8 JSON: {"config": {...}, "tensors": [[name, dtype, shape, offset], ...]}
    payload    raw little-endian tensor bytes
    checksum   32 bytes SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .network import EmissionSequence, NetConfig, NetParams, init_params

MAGIC = b"HMSNET\x00\x01"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack_tensors(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append([name, le.dtype.str, list(arr.shape), offset])
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({**meta, "tensors": manifest}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def unpack_tensors(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 8 + _DIGEST or data[:len(MAGIC)] != MAGIC:
        if data[:len(MAGIC)] == MAGIC:
            raise ChecksumError("file truncated before checksum")
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is truncated or corrupted")
    version, header_len = struct.unpack("<II", body[len(MAGIC):len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 8
    meta = json.loads(body[start:start + header_len])
    payload = body[start + header_len:]
    tensors = {}
    for name, dtype, shape, offset in meta.pop("tensors"):
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(dt.newbyteorder("="))
    return meta, tensors


def save_params(params: NetParams, path) -> None:
    tensors = {"w/" + k: v for k, v in params.weights.items()}
    tensors.update({"s/" + k: v for k, v in params.stats.items()})
    atomic_write_bytes(path, pack_tensors(tensors, {"kind": "params",
                                                    "config": params.config.to_dict()}))


def load_params(path, expected: NetConfig | None = None) -> NetParams:
    meta, tensors = unpack_tensors(Path(path).read_bytes())
    if meta.get("kind") != "params":
        raise CheckpointError(f"{path} holds {meta.get('kind')!r}, not network parameters")
    config = NetConfig(**meta["config"])
    if expected is not None and expected != config:
        raise ShapeMismatchError(
            f"checkpoint config {config} does not match expected {expected}")
    weights = {k[2:]: v for k, v in tensors.items() if k.startswith("w/")}
    stats = {k[2:]: v for k, v in tensors.items() if k.startswith("s/")}
    if expected is not None:
        ref = init_params(expected)
        for k, v in ref.weights.items():
            if k not in weights or weights[k].shape != v.shape:
                got = weights[k].shape if k in weights else None
                raise ShapeMismatchError(f"tensor {k}: file shape {got}, expected {v.shape}")
    return NetParams(config, weights, stats)


# -- emission cache ----------------------------------------------------------

def save_emissions(emissions: EmissionSequence, path) -> None:
    """``.tsv`` paths get a text table; anything else the binary container."""
    path = Path(path)
    probs = emissions.probs
    if path.suffix.lower() == ".tsv":
        head = "downbeat_index\t" + "\t".join(f"p{c}" for c in range(probs.shape[1]))
        rows = [head] + [f"{i}\t" + "\t".join(repr(float(v)) for v in row)
                         for i, row in enumerate(probs)]
        atomic_write_bytes(path, ("\n".join(rows) + "\n").encode())
    else:
        atomic_write_bytes(path, pack_tensors({"probs": probs}, {"kind": "emissions"}))


def load_emissions(path) -> EmissionSequence:
    path = Path(path)
    if path.suffix.lower() == ".tsv":
        lines = [ln for ln in path.read_text().split("\n") if ln.strip()]
        rows = [[float(v) for v in ln.split("\t")[1:]] for ln in lines[1:]]
        return EmissionSequence(np.array(rows, dtype=np.float64))
    meta, tensors = unpack_tensors(path.read_bytes())
    if meta.get("kind") != "emissions":
        raise CheckpointError(f"{path} does not hold emissions")
    return EmissionSequence(tensors["probs"])
