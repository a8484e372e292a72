"""Frame container and the ULMF raw frame format.

ULMF layout (all little-endian)::

    b"ULMF" | u32 width | u32 height | width*height float32, row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ULMF_MAGIC = b"ULMF"
_HEADER = struct.Struct("<4sII")


class FrameFormatError(ValueError):
    """Raised when a ULMF file is truncated or has a bad header."""


@dataclass
class Frame:
    """Single-channel image; ``pixels[y, x]`` with pixel centers at integer coordinates."""

    pixels: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError(f"frame pixels must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("frame contains non-finite intensities")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.pixels, other.pixels)


def encode_ulmf(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype="<f4")
    h, w = pixels.shape
    return _HEADER.pack(ULMF_MAGIC, w, h) + pixels.tobytes(order="C")


def decode_ulmf(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise FrameFormatError("ULMF data shorter than its header")
    magic, w, h = _HEADER.unpack_from(data)
    if magic != ULMF_MAGIC:
        raise FrameFormatError(f"bad ULMF magic {magic!r}")
    expected = _HEADER.size + 4 * w * h
    if len(data) != expected:
        raise FrameFormatError(f"ULMF payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)


def save_ulmf(pixels: np.ndarray | Frame, path) -> None:
    if isinstance(pixels, Frame):
        pixels = pixels.pixels
    Path(path).write_bytes(encode_ulmf(pixels))


def load_ulmf(path, frame_id: int = 0) -> Frame:
    return Frame(decode_ulmf(Path(path).read_bytes()), frame_id=frame_id)


def save_png8(pixels: np.ndarray | Frame, path) -> None:
    """Min-max scaled 8-bit grayscale preview. Lossy; for viewing only."""
    from PIL import Image

    if isinstance(pixels, Frame):
        pixels = pixels.pixels
    arr = np.asarray(pixels, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
