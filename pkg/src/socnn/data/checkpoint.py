"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic         8 bytes   b"SOCNNCK\\0"
    version       uint32
    payload_len   uint64
    payload       payload_len bytes
    sha256        32 bytes over the payload

The payload is a uint32-length-prefixed UTF-8 JSON header (config, extra
metadata and a tensor table of name, kind, dtype, shape, offset, nbytes)
followed by the raw little-endian tensor bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..network import SOCNNConfig
from ..numerics.params import ParamStore
from .cloudio import _atomic_write

MAGIC = b"SOCNNCK\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _encode(store: ParamStore, config: SOCNNConfig, extra: dict | None) -> bytes:
    table, blobs, offset = [], [], 0
    entries = [("param", n, t.data) for n, t in store.params.items()]
    entries += [("buffer", n, b) for n, b in store.buffers.items()]
    for kind, name, arr in entries:
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"cannot checkpoint {name} with dtype {dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        table.append({"name": name, "kind": kind, "dtype": dtype, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config.to_dict(), "dtype": np.dtype(store.dtype).name,
                         "extra": extra or {}, "tensors": table}, sort_keys=True).encode()
    return struct.pack("<I", len(header)) + header + b"".join(blobs)


def checkpoint_save(path, store: ParamStore, config: SOCNNConfig, extra: dict | None = None) -> None:
    """Write ``store`` and ``config`` atomically (temp file, then rename)."""
    payload = _encode(store, config, extra)
    blob = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(payload)) + payload + hashlib.sha256(payload).digest()
    _atomic_write(Path(path), blob)


def checkpoint_load(path, with_extra: bool = False):
    """Return ``(store, config)`` (plus the extra dict when asked).

    Everything is validated before any state is built, so a damaged file
    never yields a partial store.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpointError(f"{path}: truncated header")
    _, version, length = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version} "
                                      f"(this build reads version {FORMAT_VERSION})")
    end = _PREFIX.size + length
    if len(blob) != end + _DIGEST:
        raise CorruptCheckpointError(f"{path}: expected {end + _DIGEST} bytes, found {len(blob)}")
    payload = blob[_PREFIX.size:end]
    if hashlib.sha256(payload).digest() != blob[end:]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    try:
        (hlen,) = struct.unpack_from("<I", payload)
        header = json.loads(payload[4:4 + hlen])
        config = SOCNNConfig.from_dict(header["config"])
        data = memoryview(payload)[4 + hlen:]
        store = ParamStore(np.dtype(header["dtype"]).type)
        seen = set()
        for entry in header["tensors"]:
            name = entry["name"]
            if name in seen:
                raise CorruptCheckpointError(f"{path}: duplicate tensor {name}")
            seen.add(name)
            lo, n = entry["offset"], entry["nbytes"]
            if lo + n > len(data):
                raise CorruptCheckpointError(f"{path}: tensor {name} runs past the payload")
            arr = np.frombuffer(data[lo:lo + n], dtype=_DTYPES[entry["dtype"]])
            arr = arr.reshape(entry["shape"]).astype(entry["dtype"])
            if entry["kind"] == "param":
                store.add_param(name, arr)
            else:
                store.add_buffer(name, arr)
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError, struct.error) as exc:
        raise CorruptCheckpointError(f"{path}: malformed payload ({exc})") from None
    _check_plan(path, store, config)
    if with_extra:
        return store, config, header.get("extra", {})
    return store, config


def _check_plan(path, store: ParamStore, config: SOCNNConfig) -> None:
    from ..network import init_socnn

    has_cls = any(n.startswith("cls.") for n in store.params)
    ref = init_socnn(config, dtype=store.dtype, classification=has_cls)
    want = {n: t.shape for n, t in ref.params.items()}
    got = {n: t.shape for n, t in store.params.items()}
    if want != got:
        missing = sorted(set(want) - set(got))
        bad = sorted(n for n in set(want) & set(got) if want[n] != got[n])
        raise CorruptCheckpointError(f"{path}: tensors do not match the config plan "
                                     f"(missing {missing[:3]}, wrong shape {bad[:3]})")
