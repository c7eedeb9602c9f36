"""Shared image/series types and their on-disk formats.

All binary formats are little-endian with an 8-byte magic and a u32
version.  Arrays are written in C order and read back bit-exactly.

Series file (``.ctp``)::

    0    8      magic b"SDCCTPSR"
    8    4      u32 version (1)
    12   4      u32 height H
    16   4      u32 width W
    20   4      u32 frame count T
    24   8      f64 frame spacing dt (seconds)
    32   4      u32 AIF length A (0 when absent, otherwise T)
    36   8*T*H*W  f64 frames, frame-major
    ..   H*W    u8 brain mask (0/1)
    ..   8*A    f64 arterial input function samples

Maps file (``.maps``)::

    0    8      magic b"SDCPMAPS"
    8    4      u32 version (1)
    12   4      u32 height H
    16   4      u32 width W
    20   8*H*W  f64 CBF
    ..   8*H*W  f64 CBV
    ..   H*W    u8 mask

Patch dataset file (``.patches``)::

    0    8      magic b"SDCPATCH"
    8    4      u32 version (1)
    12   4      u32 patch side P
    16   4      u32 pair count N
    20   8      u64 sampling seed
    28   N records of
              6 x u32  series index, frame index, crop row, crop col,
                       patch row, patch col (patch origin inside the crop)
              4*P*P    f32 low-dose patch
              4*P*P    f32 high-dose patch

PGM export is binary 16-bit (``P5``, maxval 65535, big-endian samples as
the PGM format requires).  Map CSV export has the header
``row,col,cbf,cbv`` and one line per masked pixel in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """File does not match the expected layout."""


@dataclass
class CtFrame:
    pixels: np.ndarray
    mask: np.ndarray
    frame_time: float = 0.0

    def __post_init__(self):
        if self.pixels.shape != self.mask.shape:
            raise ValueError(f"pixels {self.pixels.shape} and mask {self.mask.shape} differ in shape")


@dataclass
class CtpSeries:
    """Time-ordered frames of one slice, ``frames`` has shape ``(t, h, w)``."""

    frames: np.ndarray
    mask: np.ndarray
    dt: float
    aif: np.ndarray | None = None

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (t, h, w), got {self.frames.shape}")
        if len(self.frames) < 3:
            raise ValueError("a series needs at least 3 frames")
        if self.frames.shape[1:] != self.mask.shape:
            raise ValueError("mask shape does not match frame shape")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.aif is not None and len(self.aif) != len(self.frames):
            raise ValueError("AIF length must equal the frame count")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.frames)) * self.dt

    def frame(self, i: int) -> CtFrame:
        return CtFrame(self.frames[i], self.mask, i * self.dt)

    def with_frames(self, frames: np.ndarray) -> "CtpSeries":
        return CtpSeries(np.asarray(frames, dtype=np.float64), self.mask, self.dt, self.aif)


@dataclass
class PerfusionMaps:
    cbf: np.ndarray
    cbv: np.ndarray
    mask: np.ndarray

    def equal(self, other: "PerfusionMaps") -> bool:
        return all(a.tobytes() == b.tobytes() and a.shape == b.shape
                   for a, b in ((self.cbf, other.cbf), (self.cbv, other.cbv), (self.mask, other.mask)))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what} file truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    def header(self, magic: bytes, version: int) -> None:
        if self.take(8) != magic:
            raise FormatError(f"not a {self.what} file (bad magic)")
        (v,) = self.unpack("<I")
        if v != version:
            raise FormatError(f"unsupported {self.what} version {v}")

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"trailing bytes in {self.what} file")


SERIES_MAGIC = b"SDCCTPSR"
MAPS_MAGIC = b"SDCPMAPS"
DATASET_MAGIC = b"SDCPATCH"


def series_to_bytes(series: CtpSeries) -> bytes:
    t, h, w = series.frames.shape
    aif = np.zeros(0) if series.aif is None else np.asarray(series.aif)
    return b"".join([
        SERIES_MAGIC, struct.pack("<IIIIdI", 1, h, w, t, float(series.dt), len(aif)),
        np.ascontiguousarray(series.frames, dtype="<f8").tobytes(),
        np.ascontiguousarray(series.mask, dtype="u1").tobytes(),
        np.ascontiguousarray(aif, dtype="<f8").tobytes(),
    ])


def series_from_bytes(data: bytes) -> CtpSeries:
    r = _Reader(data, "series")
    r.header(SERIES_MAGIC, 1)
    h, w, t, dt, n_aif = r.unpack("<IIIdI")
    frames = r.array("<f8", (t, h, w))
    mask = r.array("u1", (h, w)).astype(bool)
    aif = r.array("<f8", (n_aif,)) if n_aif else None
    r.finish()
    return CtpSeries(frames, mask, dt, aif)


def save_series(path, series: CtpSeries) -> None:
    Path(path).write_bytes(series_to_bytes(series))


def load_series(path) -> CtpSeries:
    return series_from_bytes(Path(path).read_bytes())


def maps_to_bytes(maps: PerfusionMaps) -> bytes:
    h, w = maps.cbf.shape
    return b"".join([
        MAPS_MAGIC, struct.pack("<III", 1, h, w),
        np.ascontiguousarray(maps.cbf, dtype="<f8").tobytes(),
        np.ascontiguousarray(maps.cbv, dtype="<f8").tobytes(),
        np.ascontiguousarray(maps.mask, dtype="u1").tobytes(),
    ])


def maps_from_bytes(data: bytes) -> PerfusionMaps:
    r = _Reader(data, "maps")
    r.header(MAPS_MAGIC, 1)
    h, w = r.unpack("<II")
    cbf = r.array("<f8", (h, w))
    cbv = r.array("<f8", (h, w))
    mask = r.array("u1", (h, w)).astype(bool)
    r.finish()
    return PerfusionMaps(cbf, cbv, mask)


def save_maps(path, maps: PerfusionMaps) -> None:
    Path(path).write_bytes(maps_to_bytes(maps))


def load_maps(path) -> PerfusionMaps:
    return maps_from_bytes(Path(path).read_bytes())


def maps_to_csv(maps: PerfusionMaps) -> str:
    lines = ["row,col,cbf,cbv"]
    for r, c in zip(*np.nonzero(maps.mask)):
        lines.append(f"{r},{c},{maps.cbf[r, c]:.10g},{maps.cbv[r, c]:.10g}")
    return "\n".join(lines) + "\n"


def write_pgm(path, image: np.ndarray, vmin: float = 0.0, vmax: float = 1.0) -> None:
    """Write a 2-D image as 16-bit binary PGM, mapping [vmin, vmax] to [0, 65535]."""
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    if not vmax > vmin:
        raise ValueError("vmax must exceed vmin")
    scaled = np.clip((np.asarray(image, dtype=np.float64) - vmin) / (vmax - vmin), 0.0, 1.0)
    values = np.round(scaled * 65535).astype(">u2")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + values.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    pixels = data[len(data) - h * w * np.dtype(dtype).itemsize:]
    return np.frombuffer(pixels, dtype=dtype).reshape(h, w).astype(np.uint16)
