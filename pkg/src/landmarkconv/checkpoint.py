"""Binary archive of named float32 tensors.

Layout: magic "LBYL", version u32, count u32, then per entry:
name length u32, UTF-8 name, rank u32, dims u32 x rank, little-endian
float32 payload. Round-trips bit-exactly.
"""

import struct

import numpy as np

MAGIC = b"LBYL"
VERSION = 1


class CheckpointError(IOError):
    pass


def save(entries, path):
    """Write an ordered mapping of name -> array-like (cast to f32)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, value in entries.items():
            arr = np.ascontiguousarray(getattr(value, "data", value),
                                       dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            fh.write(arr.tobytes())


def load(path):
    """Read an archive back as an ordered dict of name -> float32 ndarray."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError("%s: bad magic bytes" % path)
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError("%s: unsupported version %d" % (path, version))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack("<%dI" % rank, fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise CheckpointError("%s: truncated payload for %r" % (path, name))
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
        return out
