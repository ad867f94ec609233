"""OVCK1 binary checkpoint files.

Layout (little-endian)::

    b"OVCK1\\0"  version:u16  count:u32
    meta_len:u32  meta:utf-8 "key=value" lines
    count x [ name_len:u16 name:utf-8  rank:u8  dims:u32*rank  dtype:u8  payload ]
    crc32:u32 over every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from ..errors import BadMagic, ChecksumMismatch, InvalidArgument, TruncatedCheckpoint
from .checkpoint import Checkpoint

MAGIC = b"OVCK1\0"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(ckpt))]
    lines = []
    for k, v in sorted(ckpt.meta.items()):
        if "=" in k or "\n" in k or "\n" in v:
            raise InvalidArgument(f"metadata entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    meta = "\n".join(lines).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    for name, arr in ckpt.items():
        code = CODE_OF.get(arr.dtype)
        if code is None:
            raise InvalidArgument(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpoint(f"file ends at byte {self.end}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if not MAGIC.startswith(buf[: len(MAGIC)]):
        raise BadMagic("not an OVCK1 checkpoint (bad magic)")
    if len(buf) < len(MAGIC) + 4:
        raise TruncatedCheckpoint("file shorter than the header")
    r = _Reader(buf, len(buf) - 4)
    r.take(len(MAGIC))
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise InvalidArgument(f"unsupported OVCK version {version}")
    (meta_len,) = r.unpack("<I")
    meta_text = r.take(meta_len).decode("utf-8", errors="replace")
    meta = dict(line.split("=", 1) for line in meta_text.split("\n") if line)
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        (code,) = r.unpack("<B")
        dt = DTYPE_CODES.get(code)
        if dt is None:
            # a bad dtype code can only come from corruption once the header parsed
            _verify_crc(buf)
            raise InvalidArgument(f"unknown dtype code {code}")
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != r.end:
        _verify_crc(buf)
        raise TruncatedCheckpoint("trailing bytes after the last tensor")
    _verify_crc(buf)
    return Checkpoint(tensors, meta)


def _verify_crc(buf: bytes) -> None:
    (stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored:
        raise ChecksumMismatch("checksum mismatch: checkpoint is corrupted")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
