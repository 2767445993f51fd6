"""Bit-exact named-tensor checkpoint container and config documents.

File layout, fully specified here so tests can assert exact bytes:

    8 bytes   magic "UPSK1\\0\\0\\0"
    8 bytes   little-endian unsigned header length H
    H bytes   UTF-8 JSON: {name: {"dtype": "f32"|"f64", "shape": [...],
                                  "offset": int, "nbytes": int}}
    payload   contiguous little-endian raw values

Offsets are ascending, non-overlapping and cover the payload with no gaps.
Writes are atomic (temp file + rename); concurrent loads of one file are
safe, concurrent writes to one path are serialized by the rename.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Iterable, Mapping

import numpy as np

from .errors import (ContractError, HeaderError, OverlapError,
                     TruncationError, ValidationError)

MAGIC = b"UPSK1\x00\x00\x00"
CONFIG_FORMAT_VERSION = 1

_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _normalize(tensors) -> list[tuple[str, np.ndarray]]:
    if isinstance(tensors, Mapping):
        items = list(tensors.items())
    else:
        items = [(name, arr) for name, arr in tensors]
    seen = set()
    out = []
    for name, arr in items:
        if not isinstance(name, str) or not name:
            raise ContractError(f"tensor name must be a non-empty string, got {name!r}")
        if name in seen:
            raise ContractError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = arr.data if hasattr(arr, "requires_grad") else np.asarray(arr)
        if arr.dtype not in _DTYPE_TO_TAG:
            raise ContractError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        if not np.isfinite(arr).all():
            raise ContractError(f"tensor {name!r} contains non-finite values")
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        out.append((name, arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)))
    return out


def save_container(tensors, path: str | os.PathLike) -> None:
    """Write a named-tensor map atomically to `path`.

    Accepts a mapping or an iterable of (name, array) pairs; names are
    stored in sorted order so equal maps produce byte-identical files.
    """
    items = sorted(_normalize(tensors))
    header: dict[str, dict] = {}
    offset = 0
    chunks = []
    for name, arr in items:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        header[name] = {
            "dtype": _DTYPE_TO_TAG[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        offset += len(raw)
        chunks.append(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".upsk-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(len(header_bytes).to_bytes(8, "little"))
            f.write(header_bytes)
            for raw in chunks:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Load a container, validating every format invariant before returning."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise HeaderError(f"{path}: missing UPSK1 magic")
    header_len = int.from_bytes(blob[8:16], "little")
    if 16 + header_len > len(blob):
        raise HeaderError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: malformed header JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")

    entries = []
    for name, info in header.items():
        try:
            tag = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            offset = int(info["offset"])
            nbytes = int(info["nbytes"])
        except (TypeError, KeyError, ValueError) as exc:
            raise HeaderError(f"{path}: bad header entry for {name!r}") from exc
        if tag not in _TAG_TO_DTYPE:
            raise HeaderError(f"{path}: tensor {name!r} has unknown dtype {tag!r}")
        if any(d < 0 for d in shape):
            raise HeaderError(f"{path}: tensor {name!r} has negative dimension")
        dtype = _TAG_TO_DTYPE[tag]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count * dtype.itemsize != nbytes:
            raise HeaderError(
                f"{path}: tensor {name!r}: {count} x {dtype.itemsize} bytes != nbytes {nbytes}")
        if offset < 0:
            raise HeaderError(f"{path}: tensor {name!r} has negative offset")
        entries.append((offset, nbytes, name, shape, dtype))

    payload = blob[16 + header_len:]
    declared = sum(n for _, n, *_ in entries)
    end = 0
    for offset, nbytes, name, _, _ in sorted(entries):
        if offset != end:
            raise OverlapError(
                f"{path}: tensor {name!r} at offset {offset} overlaps or leaves a gap "
                f"(expected offset {end})")
        end = offset + nbytes
    if len(payload) < declared:
        raise TruncationError(
            f"{path}: payload has {len(payload)} bytes, header declares {declared}")
    if len(payload) > declared:
        raise OverlapError(
            f"{path}: payload has {len(payload)} bytes past the declared extent {declared}")

    out = {}
    for offset, nbytes, name, shape, dtype in entries:
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=offset).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return out


def save_config(config, path: str | os.PathLike) -> None:
    """Serialize a ModelConfig (plus format version) as UTF-8 JSON."""
    config.validate()
    doc = {"format_version": CONFIG_FORMAT_VERSION}
    doc.update(config.to_dict())
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".cfg-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_config(path: str | os.PathLike):
    """Load and validate a config document, rejecting unknown fields."""
    from .config import ModelConfig

    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed config JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    version = doc.pop("format_version", None)
    if version != CONFIG_FORMAT_VERSION:
        raise ValidationError(
            f"{path}: format_version {version!r} not supported "
            f"(expected {CONFIG_FORMAT_VERSION})")
    config = ModelConfig.from_dict(doc, source=path)
    config.validate()
    return config
