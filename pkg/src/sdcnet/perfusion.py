"""CBF/CBV quantification by block-circulant truncated-SVD deconvolution.

The tissue enhancement curve is modelled as ``c = A r`` where ``A`` is the
block-circulant matrix of the arterial input function (zero-padded to
``L >= 2T`` samples, scaled by ``dt``) and ``r`` is the flow-scaled residue
function.  Small singular values of ``A`` are discarded before inversion.
CBF is the peak of the recovered residue, CBV the ratio of curve areas.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import CBF_SCALE, CBV_SCALE
from .formats import CtpSeries, PerfusionMaps


class DeconvolutionWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Aif:
    samples: np.ndarray
    dt: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or len(s) == 0:
            raise ValueError("AIF must be a non-empty 1-D array")
        if not np.all(np.isfinite(s)):
            raise ValueError("AIF contains non-finite samples")
        if np.any(s < 0) or not np.any(s > 0):
            raise ValueError("AIF must be non-negative with at least one positive sample")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class DeconvolutionConfig:
    svd_threshold: float = 0.15  # fraction of the largest singular value
    padding_factor: int = 2  # L = padding_factor * T
    cbf_calibration: float = CBF_SCALE
    cbv_calibration: float = CBV_SCALE
    baseline_frames: int | None = None  # None: frames before the AIF reaches 10% of its peak

    def __post_init__(self):
        if not 0.0 < self.svd_threshold < 1.0:
            raise ValueError("svd_threshold must lie in (0, 1)")
        if self.padding_factor < 2:
            raise ValueError("padding_factor must be at least 2 to avoid time aliasing")


def build_block_circulant(aif: Aif, length: int) -> np.ndarray:
    """``A[i, j] = dt * a[(i - j) mod L]`` with ``a`` the zero-padded AIF."""
    t = len(aif)
    if length < 2 * t:
        raise ValueError(f"circulant length {length} < 2T = {2 * t} would alias in time")
    padded = np.zeros(length)
    padded[:t] = aif.samples
    i, j = np.indices((length, length))
    return aif.dt * padded[(i - j) % length]


def truncated_pseudoinverse(matrix: np.ndarray, threshold: float) -> np.ndarray:
    """``V diag(1/s_i if s_i >= threshold * s_max else 0) U^T``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    u, s, vt = np.linalg.svd(matrix)
    if s[0] <= 0:
        warnings.warn("all singular values are zero; returning a zero operator", DeconvolutionWarning,
                      stacklevel=2)
        return np.zeros(matrix.T.shape)
    keep = s >= threshold * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def truncated_svd_deconvolve(matrix: np.ndarray, curve: np.ndarray, threshold: float) -> np.ndarray:
    """Residue estimate for one curve, zero-padded to the matrix size if needed.

    Emits :class:`DeconvolutionWarning` and returns zeros when no singular
    value survives the threshold.
    """
    curve = np.asarray(curve, dtype=np.float64)
    length = matrix.shape[0]
    if len(curve) > length:
        raise ValueError("curve is longer than the deconvolution matrix")
    padded = np.zeros(length)
    padded[:len(curve)] = curve
    return truncated_pseudoinverse(matrix, threshold) @ padded


def compute_cbf(residue: np.ndarray, calibration: float = CBF_SCALE, samples: int | None = None) -> float:
    """Calibrated residue peak over the first ``samples`` entries (default: half, i.e. ``T``)."""
    residue = np.asarray(residue)
    n = len(residue) // 2 if samples is None else samples
    return max(0.0, calibration * float(np.max(residue[:n])))


def compute_cbv(tissue_curve: np.ndarray, aif: Aif, calibration: float = CBV_SCALE) -> float:
    aif_area = np.trapezoid(aif.samples, dx=aif.dt)
    if not aif_area > 0:
        raise ValueError("AIF has zero area")
    return max(0.0, calibration * float(np.trapezoid(tissue_curve, dx=aif.dt)) / aif_area)


def baseline_frame_count(aif: Aif, fraction: float = 0.1) -> int:
    """Number of leading frames before the AIF first reaches ``fraction`` of its peak."""
    return int(np.argmax(aif.samples >= fraction * aif.samples.max()))


def quantify_series(series: CtpSeries, aif: Aif, config: DeconvolutionConfig = DeconvolutionConfig()) -> PerfusionMaps:
    """Per-pixel CBF and CBV inside the series mask; zero elsewhere.

    Each masked pixel's curve is baseline-subtracted with the mean of the
    pre-contrast frames, then deconvolved with one shared truncated
    pseudo-inverse.
    """
    t = len(series)
    if len(aif) != t:
        raise ValueError(f"AIF has {len(aif)} samples but the series has {t} frames")
    if not np.isclose(aif.dt, series.dt):
        raise ValueError(f"AIF dt {aif.dt} differs from series dt {series.dt}")
    n_base = baseline_frame_count(aif) if config.baseline_frames is None else config.baseline_frames
    if n_base < 1 or n_base >= t:
        raise ValueError(f"need at least one pre-contrast frame for the baseline, have {n_base}")

    curves = series.frames[:, series.mask].astype(np.float64)
    curves = curves - curves[:n_base].mean(axis=0)
    length = config.padding_factor * t
    pinv = truncated_pseudoinverse(build_block_circulant(aif, length), config.svd_threshold)
    residues = pinv[:, :t] @ curves  # remaining columns would multiply zero padding

    cbf = np.zeros(series.mask.shape)
    cbv = np.zeros(series.mask.shape)
    cbf[series.mask] = np.maximum(0.0, config.cbf_calibration * residues[:t].max(axis=0))
    aif_area = np.trapezoid(aif.samples, dx=aif.dt)
    cbv[series.mask] = np.maximum(0.0, config.cbv_calibration * np.trapezoid(curves, dx=aif.dt, axis=0) / aif_area)
    return PerfusionMaps(cbf, cbv, series.mask.copy())


def masked_rmse(estimate: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    diff = (estimate - truth)[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def compartment_means(maps: PerfusionMaps, labels: np.ndarray) -> dict[int, tuple[float, float]]:
    """Mean (CBF, CBV) per non-zero label."""
    out = {}
    for label in np.unique(labels[maps.mask]):
        region = (labels == label) & maps.mask
        out[int(label)] = (float(maps.cbf[region].mean()), float(maps.cbv[region].mean()))
    return out
