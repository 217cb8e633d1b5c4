"""Binary parameter container.

Layout (all integers little-endian)::

    magic      8 bytes  b"SMPCKPT\\0"
    version    u16
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON
    n_params   u32
    n_params records:
        name_len u16, name (UTF-8), rank u8, dims u32 * rank,
        values   float32 little-endian, C order
    crc32      u32 over every preceding byte
"""
import json
import struct
import zlib

import numpy as np

MAGIC = b"SMPCKPT\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def dumps(params, metadata=None):
    """Serialize an ordered mapping name -> ndarray (stored as float32)."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf):
    """Inverse of :func:`dumps`; returns (params dict of float32 arrays, metadata)."""
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    (meta_len,) = r.unpack("<I")
    meta_raw = r.take(meta_len)
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    if zlib.crc32(buf[:body_end]) != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    return params, json.loads(meta_raw.decode("utf-8"))


def save(path, params, metadata=None):
    with open(path, "wb") as fh:
        fh.write(dumps(params, metadata))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
