"""Synthetic CT perfusion phantoms and the paired-patch training set.

Phantom anatomy is a head ellipse of white matter with a gray-matter ring
and a few vessel disks.  Each tissue pixel enhances over time by

    c(t) = (cbf / 6000) * integral AIF(s) R(t - s) ds,   R(t) = exp(-t / mtt)

with CBF in ml/100g/min and CBV in ml/100g, so that ``100 * int c / int AIF``
equals the compartment CBV.  The convolution is evaluated on a fine time
grid with the trapezoid rule and then sampled at the frame spacing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .formats import DATASET_MAGIC, CtFrame, CtpSeries, FormatError, PerfusionMaps, _Reader

# ml/100g/min -> fraction per second, and ml/100g -> fraction
CBF_SCALE = 6000.0
CBV_SCALE = 100.0

BACKGROUND, WHITE_MATTER, GRAY_MATTER, VESSEL = 0, 1, 2, 3
COMPARTMENT_LABELS = {"white_matter": WHITE_MATTER, "gray_matter": GRAY_MATTER, "vessel": VESSEL}


@dataclass(frozen=True)
class Compartment:
    name: str
    cbf: float  # ml/100g/min
    cbv: float  # ml/100g
    intensity: float  # static (pre-contrast) pixel value

    @property
    def mtt(self) -> float:
        return 60.0 * self.cbv / self.cbf if self.cbf > 0 else 0.0


@dataclass(frozen=True)
class AifParams:
    """Gamma variate ``peak * ((t - t0) / (alpha*beta))**alpha * exp(alpha - (t - t0)/beta)``."""

    t0: float = 3.0
    alpha: float = 3.0
    beta: float = 0.5
    peak: float = 4.0


def _default_compartments() -> tuple[Compartment, ...]:
    return (
        Compartment("white_matter", cbf=22.0, cbv=2.0, intensity=0.30),
        Compartment("gray_matter", cbf=60.0, cbv=4.0, intensity=0.38),
        Compartment("vessel", cbf=100.0, cbv=8.0, intensity=0.45),
    )


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 200
    frames: int = 80
    dt: float = 0.5
    compartments: tuple[Compartment, ...] = field(default_factory=_default_compartments)
    aif: AifParams = field(default_factory=AifParams)
    seed: int = 0
    vessels: int = 4
    substeps: int = 50

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("phantom size must be at least 64")
        if self.frames < 3 or not self.dt > 0:
            raise ValueError("need at least 3 frames and dt > 0")
        for c in self.compartments:
            if c.name not in COMPARTMENT_LABELS:
                raise ValueError(f"unknown compartment {c.name!r}; expected {sorted(COMPARTMENT_LABELS)}")
            if not (c.cbf > 0 and c.cbv > 0):
                raise ValueError(f"compartment {c.name} needs positive cbf and cbv")

    def compartment(self, name: str) -> Compartment:
        for c in self.compartments:
            if c.name == name:
                return c
        raise KeyError(name)


def gamma_variate(t: np.ndarray, params: AifParams) -> np.ndarray:
    s = np.asarray(t, dtype=np.float64) - params.t0
    peak_time = params.alpha * params.beta
    out = np.zeros_like(s)
    pos = s > 0
    x = s[pos] / peak_time
    out[pos] = params.peak * x ** params.alpha * np.exp(params.alpha * (1.0 - x))
    return out


def tissue_curve(times: np.ndarray, aif: AifParams, cbf: float, mtt: float, substeps: int = 50) -> np.ndarray:
    """Enhancement of a compartment sampled at ``times`` (uniform, starting at 0)."""
    if cbf <= 0:
        return np.zeros(len(times))
    dt = times[1] - times[0]
    h = dt / substeps
    fine = np.arange((len(times) - 1) * substeps + 1) * h
    a = gamma_variate(fine, aif)
    r = np.exp(-fine / mtt)
    conv = np.convolve(a, r)[:len(fine)]
    conv -= 0.5 * (a * r[0] + a[0] * r)  # trapezoid end corrections
    return (cbf / CBF_SCALE) * h * conv[::substeps]


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    """Label image: background, white matter, gray-matter ring, vessel disks."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n / 2 + rng.uniform(-4, 4)
    cx = n / 2 + rng.uniform(-4, 4)
    reach = min(n, 180) / 2 - 4
    ay = rng.uniform(0.85, 0.97) * reach
    ax = rng.uniform(0.75, 0.90) * reach
    theta = rng.uniform(-0.2, 0.2)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    rho = np.sqrt((u / ay) ** 2 + (v / ax) ** 2)

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[rho <= 1.0] = GRAY_MATTER
    labels[rho <= rng.uniform(0.72, 0.80)] = WHITE_MATTER
    # deep gray-matter nuclei
    for side in (-1, 1):
        gy = cy + rng.uniform(-0.1, 0.1) * ay
        gx = cx + side * rng.uniform(0.25, 0.35) * ax
        labels[((yy - gy) / (0.18 * ay)) ** 2 + ((xx - gx) / (0.12 * ax)) ** 2 <= 1.0] = GRAY_MATTER
    for _ in range(spec.vessels):
        rr = rng.uniform(0.0, 0.6)
        phi = rng.uniform(0, 2 * np.pi)
        vy = cy + rr * ay * np.sin(phi)
        vx = cx + rr * ax * np.cos(phi)
        radius = rng.uniform(3.0, 6.0)
        labels[(yy - vy) ** 2 + (xx - vx) ** 2 <= radius ** 2] = VESSEL
    return labels


def generate_phantom_series(spec: PhantomSpec) -> tuple[CtpSeries, PerfusionMaps]:
    """Noise-free phantom series (AIF attached) and its exact CBF/CBV maps."""
    labels = phantom_labels(spec)
    mask = labels != BACKGROUND
    times = np.arange(spec.frames) * spec.dt
    anatomy = np.zeros(labels.shape)
    cbf = np.zeros(labels.shape)
    cbv = np.zeros(labels.shape)
    frames = np.zeros((spec.frames,) + labels.shape)
    for comp in spec.compartments:
        region = labels == COMPARTMENT_LABELS[comp.name]
        anatomy[region] = comp.intensity
        cbf[region] = comp.cbf
        cbv[region] = comp.cbv
        curve = tissue_curve(times, spec.aif, comp.cbf, comp.mtt, spec.substeps)
        frames[:, region] = curve[:, None]
    frames += anatomy[None]
    if frames.max() > 1.0:
        raise ValueError("phantom intensities exceed 1; lower the AIF peak or tissue intensities")
    aif = gamma_variate(times, spec.aif)
    return CtpSeries(frames, mask, spec.dt, aif), PerfusionMaps(cbf, cbv, mask)


# -- noise ---------------------------------------------------------------------

# (sigma_g, sigma_m); chosen so the noisy-frame PSNR of default phantoms lands
# near the 18 dB low-dose level.
NOISE_PRESETS: dict[str, tuple[float, float]] = {
    "dose20": (0.17, 0.14),
    "dose8": (0.24, 0.20),
    "none": (0.0, 0.0),
}


def inject_low_dose_noise(frame: CtFrame, sigma_g: float, sigma_m: float, seed) -> CtFrame:
    """Mixed Gaussian and multiplicative noise inside the brain mask.

    ``out = clip(x * (1 + m) + g, 0, 1)`` with ``g ~ N(0, sigma_g^2)`` and
    ``m ~ N(0, sigma_m^2)`` drawn independently per pixel.  Pixels outside
    the mask are left untouched.
    """
    if sigma_g < 0 or sigma_m < 0:
        raise ValueError("noise levels must be non-negative")
    if sigma_g == 0 and sigma_m == 0:
        return CtFrame(frame.pixels.copy(), frame.mask, frame.frame_time)
    rng = np.random.default_rng(seed)
    shape = frame.pixels.shape
    g = rng.normal(0.0, sigma_g, shape) if sigma_g > 0 else 0.0
    m = rng.normal(0.0, sigma_m, shape) if sigma_m > 0 else 0.0
    noisy = np.clip(frame.pixels * (1.0 + m) + g, 0.0, 1.0)
    out = np.where(frame.mask, noisy, frame.pixels)
    return CtFrame(out, frame.mask, frame.frame_time)


def corrupt_series(series: CtpSeries, sigma_g: float, sigma_m: float, seed: int) -> CtpSeries:
    """Apply :func:`inject_low_dose_noise` to every frame with per-frame seeds ``[seed, i]``."""
    frames = np.stack([
        inject_low_dose_noise(series.frame(i), sigma_g, sigma_m, [seed, i]).pixels
        for i in range(len(series))
    ])
    return series.with_frames(frames)


def estimate_brain_mask(image: np.ndarray, threshold: float = 0.1) -> np.ndarray:
    """Threshold then keep the largest connected component, holes filled."""
    labels, count = ndimage.label(image > threshold)
    if count == 0:
        return np.zeros(image.shape, dtype=bool)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    largest = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(largest)


# -- cropping and patches ------------------------------------------------------

def crop_window(mask: np.ndarray, size: int = 180) -> tuple[int, int]:
    """Top-left corner of a ``size`` window centred on the mask centroid, clamped in-bounds."""
    h, w = mask.shape
    if h < size or w < size:
        raise ValueError(f"image {mask.shape} is smaller than the {size}x{size} crop")
    if not mask.any():
        raise ValueError("cannot crop: brain mask is empty")
    rows, cols = np.nonzero(mask)
    cy = int(np.floor(rows.mean() + 0.5))
    cx = int(np.floor(cols.mean() + 0.5))
    r0 = min(max(cy - size // 2, 0), h - size)
    c0 = min(max(cx - size // 2, 0), w - size)
    return r0, c0


def crop_brain_region(frame: CtFrame, size: int = 180) -> tuple[np.ndarray, tuple[int, int]]:
    """Brain block of ``size x size`` with non-brain pixels zeroed, plus its origin."""
    r0, c0 = crop_window(frame.mask, size)
    sl = (slice(r0, r0 + size), slice(c0, c0 + size))
    block = np.where(frame.mask[sl], frame.pixels[sl], 0.0)
    return block, (r0, c0)


def patch_origins(rows: int, cols: int, patch: int = 40, stride: int = 11) -> list[tuple[int, int]]:
    if patch > rows or patch > cols:
        raise ValueError(f"patch {patch} larger than block {rows}x{cols}")
    return [(i, j) for i in range(0, rows - patch + 1, stride) for j in range(0, cols - patch + 1, stride)]


def extract_patches(block: np.ndarray, patch: int = 40, stride: int = 11):
    """Sliding-window patches; returns ``(origins, patches)`` with patches ``(k, patch, patch)``."""
    origins = patch_origins(block.shape[0], block.shape[1], patch, stride)
    patches = np.stack([block[i:i + patch, j:j + patch] for i, j in origins])
    return origins, patches


@dataclass
class PatchDataset:
    """Paired (low-dose, high-dose) patches with their provenance.

    ``sources`` holds ``(series, frame, crop_row, crop_col, row, col)`` per pair.
    """

    low: np.ndarray
    high: np.ndarray
    sources: np.ndarray
    patch: int
    seed: int

    def __len__(self) -> int:
        return len(self.low)

    def pair(self, i: int):
        return self.low[i], self.high[i], tuple(int(v) for v in self.sources[i, 4:6])

    def subset(self, indices) -> "PatchDataset":
        idx = np.asarray(indices)
        return replace(self, low=self.low[idx], high=self.high[idx], sources=self.sources[idx])


def build_dataset(
    series_pairs: list[tuple[CtpSeries, CtpSeries]],
    target_count: int,
    seed: int,
    patch: int = 40,
    stride: int = 11,
    crop: int = 180,
    replace: bool = False,
) -> PatchDataset:
    """Uniform seeded sample of aligned patches.

    ``series_pairs`` holds ``(clean, noisy)`` series that share geometry.
    Every candidate (series, frame, origin) is equally likely.
    """
    empty = np.zeros((0, patch, patch), dtype=np.float32)
    if target_count < 0:
        raise ValueError("target_count must be non-negative")
    windows = []
    for clean, noisy in series_pairs:
        if clean.frames.shape != noisy.frames.shape:
            raise ValueError("clean and noisy series differ in shape")
        windows.append(crop_window(clean.mask, crop))
    origins = patch_origins(crop, crop, patch, stride)
    per_frame = len(origins)
    frame_counts = [len(c) for c, _ in series_pairs]
    total = sum(frame_counts) * per_frame
    if target_count > total and not replace:
        raise ValueError(f"requested {target_count} patches but only {total} are available")
    if target_count == 0:
        return PatchDataset(empty, empty.copy(), np.zeros((0, 6), dtype=np.uint32), patch, seed)

    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=target_count, replace=replace)
    starts = np.cumsum([0] + [n * per_frame for n in frame_counts])
    low = np.empty((target_count, patch, patch), dtype=np.float32)
    high = np.empty_like(low)
    sources = np.empty((target_count, 6), dtype=np.uint32)
    for k, flat in enumerate(picks):
        s = int(np.searchsorted(starts, flat, side="right") - 1)
        frame_idx, origin_idx = divmod(int(flat - starts[s]), per_frame)
        clean, noisy = series_pairs[s]
        r0, c0 = windows[s]
        i, j = origins[origin_idx]
        rows = slice(r0 + i, r0 + i + patch)
        cols = slice(c0 + j, c0 + j + patch)
        m = clean.mask[rows, cols]
        high[k] = np.where(m, clean.frames[frame_idx, rows, cols], 0.0)
        low[k] = np.where(m, noisy.frames[frame_idx, rows, cols], 0.0)
        sources[k] = (s, frame_idx, r0, c0, i, j)
    return PatchDataset(low, high, sources, patch, seed)


def dataset_to_bytes(ds: PatchDataset) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<IIIQ", 1, ds.patch, len(ds), ds.seed)]
    for k in range(len(ds)):
        parts.append(struct.pack("<6I", *(int(v) for v in ds.sources[k])))
        parts.append(np.ascontiguousarray(ds.low[k], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ds.high[k], dtype="<f4").tobytes())
    return b"".join(parts)


def dataset_from_bytes(data: bytes) -> PatchDataset:
    r = _Reader(data, "dataset")
    r.header(DATASET_MAGIC, 1)
    patch, count, seed = r.unpack("<IIQ")
    low = np.empty((count, patch, patch), dtype=np.float32)
    high = np.empty_like(low)
    sources = np.empty((count, 6), dtype=np.uint32)
    for k in range(count):
        sources[k] = r.unpack("<6I")
        low[k] = r.array("<f4", (patch, patch))
        high[k] = r.array("<f4", (patch, patch))
    r.finish()
    return PatchDataset(low, high, sources, patch, seed)


def save_dataset(path, ds: PatchDataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> PatchDataset:
    try:
        return dataset_from_bytes(Path(path).read_bytes())
    except struct.error as exc:
        raise FormatError(str(exc)) from exc
