"""Binary netpbm (P5 / P6, 8-bit) rasters and segmentation masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, RasterParseError

_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}


@dataclass
class Raster:
    width: int
    height: int
    channels: int
    data: np.ndarray  # uint8 [height, width, channels]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8).reshape(
            self.height, self.width, self.channels)
        if self.channels not in (1, 3):
            raise InputError(f"rasters have 1 or 3 channels, got {self.channels}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Raster":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[..., None]
        return cls(arr.shape[1], arr.shape[0], arr.shape[2], arr)

    def to_float(self) -> np.ndarray:
        """[channels, H, W] float64 in [-1, 1]."""
        return self.data.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0

    def __eq__(self, other):
        return (isinstance(other, Raster) and self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data))


@dataclass
class SegmentationMask:
    width: int
    height: int
    indices: np.ndarray  # uint8 [height, width]

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint8).reshape(self.height, self.width)

    @classmethod
    def from_array(cls, arr) -> "SegmentationMask":
        arr = np.asarray(arr)
        return cls(arr.shape[1], arr.shape[0], arr)


def float_to_raster(img: np.ndarray) -> Raster:
    """Inverse of :meth:`Raster.to_float` with rounding and clipping."""
    arr = np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Raster.from_array(arr.transpose(1, 2, 0))


def _token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise RasterParseError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> Raster:
    magic = buf[:2]
    if magic not in _MAGIC_CHANNELS:
        raise RasterParseError(f"unsupported magic {magic!r}", 0)
    channels = _MAGIC_CHANNELS[magic]
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        tok, end = _token(buf, pos)
        if not tok.isdigit():
            raise RasterParseError(f"bad {label} {tok!r}", end - len(tok))
        fields.append(int(tok))
        pos = end
    width, height, maxval = fields
    if width == 0 or height == 0:
        raise RasterParseError("zero image dimension", pos)
    if not 0 < maxval < 256:
        raise RasterParseError(f"only 8-bit rasters are supported (maxval {maxval})", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise RasterParseError("missing whitespace after maxval", pos)
    pos += 1
    count = width * height * channels
    if len(buf) - pos < count:
        raise RasterParseError(f"truncated payload: need {count} bytes, have {len(buf) - pos}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=pos)
    return Raster(width, height, channels, data.copy())


def encode_netpbm(r: Raster) -> bytes:
    magic = b"P6" if r.channels == 3 else b"P5"
    return magic + f"\n{r.width} {r.height}\n255\n".encode("ascii") + r.data.tobytes()


def load_raster(path) -> Raster:
    return decode_netpbm(Path(path).read_bytes())


def save_raster(path, r: Raster) -> None:
    Path(path).write_bytes(encode_netpbm(r))


def load_mask(path) -> SegmentationMask:
    r = load_raster(path)
    if r.channels != 1:
        raise InputError(f"{path}: masks must be single-channel P5")
    return SegmentationMask(r.width, r.height, r.data[..., 0])


def save_mask(path, mask: SegmentationMask) -> None:
    save_raster(path, Raster(mask.width, mask.height, 1, mask.indices))


def colorize(mask: SegmentationMask, seed: int = 7) -> Raster:
    """Fixed pseudo-random palette, index 255 (ignore) drawn black."""
    palette = np.random.default_rng(seed).integers(40, 256, (256, 3), dtype=np.uint8)
    palette[255] = 0
    return Raster.from_array(palette[mask.indices])
