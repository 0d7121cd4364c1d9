"""WFCK checkpoint container.

Layout (little-endian)::

    "WFCK" u16 version u64 arch_fingerprint
    u32 meta_len, meta (UTF-8 JSON)
    u32 n_blobs, blobs
    u8 has_optimizer [u32 opt_meta_len, opt_meta JSON, u32 n_blobs, blobs]

A blob is ``u16 name_len, name, u8 ndim, u32 dims[ndim], float32 data``.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, FormatError, TruncatedError, VersionMismatchError

MAGIC = b"WFCK"
VERSION = 1


def fingerprint(arch: dict) -> int:
    text = json.dumps(arch, sort_keys=True, separators=(",", ":"))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _write_blobs(fh, blobs: dict[str, np.ndarray]):
    fh.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _write_json(fh, obj):
    raw = json.dumps(obj, sort_keys=True).encode()
    fh.write(struct.pack("<I", len(raw)) + raw)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def json(self):
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.path}: bad metadata block: {exc}") from None

    def blobs(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def write_checkpoint(path, arch_fingerprint: int, meta: dict, blobs: dict, optimizer: dict | None = None):
    """``optimizer`` is ``{"meta": {...}, "blobs": {...}}`` or None."""
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<HQ", VERSION, arch_fingerprint))
    _write_json(buf, meta)
    _write_blobs(buf, blobs)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        _write_json(buf, optimizer["meta"])
        _write_blobs(buf, optimizer["blobs"])
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Returns ``(fingerprint, meta, blobs, optimizer_or_None)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC[: len(data[:4])]:
        raise BadMagicError(f"{path}: not a WFCK checkpoint")
    r = _Reader(data, path)
    r.take(4)
    version, fp = r.unpack("<HQ")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    meta = r.json()
    blobs = r.blobs()
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        opt = {"meta": r.json(), "blobs": r.blobs()}
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    return fp, meta, blobs, opt
