"""Binary container for named float32 parameter arrays.

Layout (all integers little-endian uint32):

    b"SSRCKPT1"
    entry count
    per entry: name length, UTF-8 name, rank, extents..., raw float32 LE values
    32-byte SHA-256 of every preceding byte
"""
import hashlib
import struct

import numpy as np

MAGIC = b"SSRCKPT1"


class CheckpointError(ValueError):
    pass


def encode(arrays):
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob):
    if len(blob) < len(MAGIC) + 4 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not an SSRCKPT1 checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + ln].decode("utf-8")
        pos += ln
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def save(path, arrays):
    with open(path, "wb") as fh:
        fh.write(encode(arrays))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
