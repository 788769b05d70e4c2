"""Binary parameter checkpoints.

Layout: magic "ADTS", format version u32, then one record per tensor:
name length u32, UTF-8 name, rank u32, dims u32 x rank, little-endian f32
payload. Values are stored in 32-bit and widened back to 64-bit on load;
records are sorted by name so identical parameter sets serialize
byte-identically.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CheckpointError
from .layers import Params
from .tensor import Tensor

MAGIC = b"ADTS"
VERSION = 1


def save_params(params: Params, path: str) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    for name in sorted(params):
        data = params[name].data.astype("<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_raw(path: str) -> dict[str, np.ndarray]:
    """Read every record as float64 arrays; structural errors carry offsets."""
    blob = open(path, "rb").read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: {what} at byte {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    return out


def load_params(
    path: str,
    expected: dict[str, tuple[int, ...]],
    optional_prefixes: tuple[str, ...] = (),
) -> Params:
    """Load and validate a checkpoint against an expected name->shape map.

    Names in the file that are neither expected nor under an optional
    prefix are rejected; expected names must all be present unless they
    fall under an optional prefix (dropped training-only heads).
    """
    raw = load_raw(path)
    unknown = sorted(
        n for n in raw
        if n not in expected and not any(n.startswith(p) for p in optional_prefixes)
    )
    if unknown:
        raise CheckpointError(f"unknown parameters in {path}: {unknown}")
    missing = sorted(
        n for n in expected
        if n not in raw and not any(n.startswith(p) for p in optional_prefixes)
    )
    if missing:
        raise CheckpointError(f"missing parameters in {path}: {missing}")
    params: Params = {}
    for name, array in raw.items():
        if name in expected and array.shape != expected[name]:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {array.shape} vs expected {expected[name]}"
            )
        params[name] = Tensor(array, requires_grad=True)
    return params
