"""Binary parameter checkpoints.

Layout (little-endian)::

    b"MADP"                      magic
    u8                           format version
    u32  n                       length of the header JSON
    n bytes                      UTF-8 JSON: {"segments": [...], "model": {...}}
    u64  m                       number of float64 values
    m * f64                      parameter values
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Layout, ParameterVector

MAGIC = b"MADP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(params: ParameterVector, path, model_spec: dict | None = None) -> None:
    header = json.dumps(
        {"segments": params.layout.to_dict(), "model": model_spec or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    values = np.ascontiguousarray(params.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def load_params(path) -> tuple[ParameterVector, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    if len(blob) < 9:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = struct.unpack_from("<I", blob, 5)
    pos = 9 + n
    try:
        header = json.loads(blob[9:pos].decode("utf-8"))
        (m,) = struct.unpack_from("<Q", blob, pos)
    except (ValueError, struct.error) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += 8
    if len(blob) != pos + 8 * m:
        raise CheckpointError(f"{path}: expected {m} values, file size disagrees")
    values = np.frombuffer(blob, dtype="<f8", count=m, offset=pos).astype(np.float64)
    layout = Layout.from_dict(header["segments"])
    return ParameterVector(values, layout), header.get("model", {})
