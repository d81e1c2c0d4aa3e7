"""Binary checkpoint format.

Layout: ``b"PRNC"``, version (u32), then records until end of file, each
``name_len u32 | utf-8 name | rank u32 | dims u32 * rank | float32 payload``.
All integers and floats are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PRNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, value in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    state: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated checkpoint: record {name!r} is incomplete")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            if name in state:
                raise CheckpointError(f"duplicate record {name!r}")
            state[name] = arr.astype(np.float32)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return state


def save(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
