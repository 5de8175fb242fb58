"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"SPLTCKPT"
    version    uint32
    count      uint32    number of sections
    then per section:
      name_len uint16, name (utf-8)
      dtype    uint8     see DTYPES
      ndim     uint8
      shape    ndim x uint64
      length   uint64    payload byte length
      crc32    uint32    of the section header fields above plus the payload
      payload  length bytes, C order, little-endian
    trailer    uint32    crc32 of every preceding byte of the file

Sections hold plain arrays. A ``meta`` section of dtype ``json`` carries the
structured metadata (config echo, flags) as canonical UTF-8 JSON.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from ..errors import CheckpointChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError

MAGIC = b"SPLTCKPT"
VERSION = 1

DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1", 4: "json"}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("|u1"): 3}
META = "meta"


def _encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _as_storable(name, value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype("<i8")
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if np.dtype(dt) not in DTYPE_CODES:
        raise CheckpointError(f"section {name!r}: unsupported dtype {arr.dtype}")
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return np.require(arr.astype(dt, copy=False), requirements="C")


def encode_checkpoint(sections: dict, meta: dict | None = None) -> bytes:
    """Serialize ``sections`` (name -> array) plus optional JSON ``meta`` to bytes."""
    items = []
    if meta is not None:
        items.append((META, 4, (), _encode_meta(meta)))
    for name, value in sections.items():
        if name == META:
            raise CheckpointError(f"section name {META!r} is reserved")
        arr = _as_storable(name, value)
        items.append((name, DTYPE_CODES[arr.dtype], arr.shape, arr.tobytes(order="C")))
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, code, shape, payload in items:
        raw = name.encode("utf-8")
        head = (struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, len(shape))
                + struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<Q", len(payload)))
        out += [head, struct.pack("<I", zlib.crc32(payload, zlib.crc32(head))), payload]
    blob = b"".join(out)
    return blob + struct.pack("<I", zlib.crc32(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple[dict, dict | None]:
    r = _Reader(data)
    if len(data) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        sections, meta = _read_sections(r, count)
    except (UnicodeDecodeError, ValueError, struct.error) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    body = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the checkpoint trailer")
    if zlib.crc32(data[:body]) != crc:
        raise CheckpointChecksumError("file checksum mismatch")
    return sections, meta


def _read_sections(r: _Reader, count: int):
    sections, meta = {}, None
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H")
        raw = r.take(name_len)
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q")
        (length,) = r.unpack("<Q")
        head = r.data[start : r.pos]
        (crc,) = r.unpack("<I")
        payload = r.take(length)
        if zlib.crc32(payload, zlib.crc32(head)) != crc:
            raise CheckpointChecksumError(f"checksum mismatch in section starting at byte {start}")
        name = raw.decode("utf-8")
        if code not in DTYPES:
            raise CheckpointError(f"section {name!r}: unknown dtype code {code}")
        if DTYPES[code] == "json":
            meta = json.loads(payload.decode("utf-8"))
            continue
        dt = np.dtype(DTYPES[code])
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != length:
            raise CheckpointError(f"section {name!r}: length does not match shape")
        sections[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return sections, meta


def save_checkpoint(sections: dict, path, meta: dict | None = None) -> Path:
    """Atomically write a checkpoint (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(sections, meta)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[dict, dict | None]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
