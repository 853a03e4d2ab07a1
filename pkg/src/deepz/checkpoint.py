"""Parameter checkpoint container (DZCK).

Layout, all little-endian:
    magic "DZCK", u32 version, u32 count, then per parameter:
    u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 data.
"""

import struct

import numpy as np

from .optim import ParamSet

MAGIC = b"DZCK"
VERSION = 1


def save_params(path, params: ParamSet):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", MAGIC, VERSION, len(params)))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_arrays(path) -> dict:
    """Read a DZCK file into a name -> float32 ndarray map."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, version, count = struct.unpack("<4sII", head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated data for parameter {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
        return out


def load_params(path) -> ParamSet:
    arrays = load_arrays(path)
    params = ParamSet()
    for name, arr in arrays.items():
        params.add(name, arr)
    return params
