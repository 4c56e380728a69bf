"""Versioned, integrity-checked checkpoint container.

Layout: ``MAGIC`` | format version (uint16, big endian) | sha256 of payload |
payload, where the payload is a ``torch.save`` blob of a plain dict.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import torch

from .errors import ConfigMismatchError, IntegrityError

MAGIC = b"SPYWM-CKPT\x00"
FORMAT_VERSION = 1
_HEADER = len(MAGIC) + 2 + 32


def write_checkpoint(path: str | Path, payload: dict) -> str:
    """Atomically write ``payload`` and return its sha256 hex digest."""
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">H", FORMAT_VERSION))
        fh.write(digest)
        fh.write(body)
    os.replace(tmp, path)
    return digest.hex()


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER or not raw.startswith(MAGIC):
        raise IntegrityError(f"{path} is not a checkpoint (bad magic header)")
    (version,) = struct.unpack(">H", raw[len(MAGIC):len(MAGIC) + 2])
    if version != FORMAT_VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint format version {version}")
    digest = raw[len(MAGIC) + 2:_HEADER]
    body = raw[_HEADER:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: payload hash mismatch, file is corrupt")
    try:
        return torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises assorted types for malformed pickles
        raise IntegrityError(f"{path}: undecodable payload: {exc}") from exc


def check_config(found: dict, expected: dict | None, what: str) -> None:
    if expected is None:
        return
    if found != expected:
        diff = sorted(k for k in set(found) | set(expected) if found.get(k) != expected.get(k))
        raise ConfigMismatchError(f"{what} checkpoint config differs in {diff}")
