"""Binary tensor checkpoints.

Layout (little-endian)::

    b"ACLT" | u32 version | records...
    record := u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f64 payload

Records run to end of file.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ACLT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads_tensors(blob: bytes) -> dict[str, np.ndarray]:
    """Parse a whole checkpoint; nothing is returned unless every record is valid."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not an ACLT checkpoint (bad magic bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader is v{VERSION})")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + nlen > len(blob):
                raise CheckpointError(f"v{version}: truncated name at byte {pos}")
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            if name in out:
                raise CheckpointError(f"v{version}: duplicate record {name!r}")
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(blob):
                raise CheckpointError(f"v{version}: truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"v{version}: truncated record header at byte {pos}") from exc
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"v{version}: record name is not UTF-8") from exc
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return loads_tensors(Path(path).read_bytes())
