"""Tensor files: the STF binary format and 8-bit PGM/PPM previews.

A tensor is a float ``numpy`` array of shape ``(channels, height, width)``.

STF layout (all little-endian)::

    b"STF1" | rank: u8 | dims: rank x u32 | data: prod(dims) x f32, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

STF_MAGIC = b"STF1"


def encode_stf(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim > 255:
        raise FormatError("rank does not fit in a u8")
    header = STF_MAGIC + struct.pack("<B", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_stf(buf: bytes) -> np.ndarray:
    if len(buf) < 5 or buf[:4] != STF_MAGIC:
        raise FormatError("not an STF1 tensor")
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated STF header")
    dims = struct.unpack(f"<{rank}I", buf[5:off])
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise FormatError(f"payload size mismatch for shape {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_stf(path: str | Path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_stf(x))


def read_stf(path: str | Path) -> np.ndarray:
    return decode_stf(Path(path).read_bytes())


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto [0, 255] with clamping and round-half-even."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def write_pnm(path: str | Path, x: np.ndarray) -> None:
    """Write a (1, H, W) tensor as binary PGM or a (3, H, W) tensor as PPM."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise FormatError(f"PNM export needs 1 or 3 channels, got shape {x.shape}")
    c, h, w = x.shape
    pixels = to_uint8(x)
    if c == 1:
        header, body = b"P5", pixels[0]
    else:
        header, body = b"P6", np.transpose(pixels, (1, 2, 0))
    Path(path).write_bytes(header + f"\n{w} {h}\n255\n".encode() + body.tobytes())
