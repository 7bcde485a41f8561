"""Binary parameter checkpoints.

Layout: magic "PSIFT1", then for each parameter sorted by name:
u32 name length, UTF-8 name bytes, u32 rank, u32 extents, then the values as
row-major little-endian float64.
"""
from __future__ import annotations

import struct

import numpy as np

from .autodiff import Parameter

MAGIC = b"PSIFT1"


class CheckpointError(Exception):
    pass


class MagicError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(parameters: list[Parameter], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for p in sorted(parameters, key=lambda p: p.name):
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse a checkpoint into name -> array, validating framing."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise MagicError(f"bad magic in {path}")
    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TruncationError(f"truncated checkpoint {path} at byte {off}")
        chunk = blob[off: off + n]
        off += n
        return chunk

    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        out[name] = values.astype(np.float64)
    return out


def load_checkpoint(parameters: list[Parameter], path) -> None:
    """Load values into existing parameters, validating every shape."""
    stored = read_checkpoint(path)
    named = {p.name: p for p in parameters}
    missing = sorted(set(named) - set(stored))
    extra = sorted(set(stored) - set(named))
    if missing or extra:
        raise ShapeMismatchError(
            f"parameter set mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}")
    for name, p in named.items():
        if stored[name].shape != p.data.shape:
            raise ShapeMismatchError(
                f"parameter {name}: checkpoint shape {stored[name].shape} != {p.data.shape}")
        p.data[...] = stored[name]
