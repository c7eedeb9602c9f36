"""Dense 4-D tensor primitives with hand-written backward passes.

A tensor here is a plain ``numpy.ndarray`` of shape ``(n, c, h, w)``.
Gradients are returned explicitly by the ``*_backward`` functions rather
than stored on the array, so every primitive is a pure function.

Convolutions are stride-1 cross-correlations with zero padding.  The
reduction over kernel taps runs in a fixed row-major order ``(i, j)`` so
results are reproducible for a given numpy/BLAS build and thread count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.dtype(_DTYPES[os.environ.get("SDCNET_DTYPE", "float64")])


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch the precision used for newly built parameters.

    Accepts ``"float32"``/``"float64"`` or a numpy dtype.  Tests and
    gradient checks run in double precision; training may use single.
    """
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; choose from {sorted(_DTYPES)}")
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ValueError(f"{name} must be a 4-D (n, c, h, w) array, got shape {shape}")
    return x


@dataclass
class ConvParams:
    """Weights ``(c_out, c_in, k, k)``, bias ``(c_out,)`` and zero padding."""

    weight: np.ndarray
    bias: np.ndarray
    padding: int

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"weight must have shape (c_out, c_in, k, k), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}"
            )
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def same(cls, weight: np.ndarray, bias: np.ndarray) -> "ConvParams":
        """Padding ``(k - 1) // 2``, which preserves spatial size for odd ``k``."""
        k = weight.shape[2]
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        return cls(weight, bias, (k - 1) // 2)


def conv_output_hw(h: int, w: int, k: int, padding: int) -> tuple[int, int]:
    return h + 2 * padding - k + 1, w + 2 * padding - k + 1


def _check_conv(x: np.ndarray, params: ConvParams) -> tuple[int, int]:
    check_tensor(x, "input")
    if x.shape[1] != params.c_in:
        raise ValueError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{params.weight.shape} expects {params.c_in}"
        )
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], params.kernel, params.padding)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"input shape {x.shape} is smaller than kernel shape {params.weight.shape} "
            f"with padding {params.padding}"
        )
    return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Stride-1, zero-padded 2-D cross-correlation.

    Output shape is ``(n, c_out, h + 2p - k + 1, w + 2p - k + 1)``.
    """
    ho, wo = _check_conv(x, params)
    w, k = params.weight, params.kernel
    if k == 1 and params.padding == 0:
        out = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1]))
    else:
        xp = _pad(x, params.padding)
        out = np.zeros((params.c_out, x.shape[0], ho, wo), dtype=np.result_type(x, w))
        for i in range(k):
            for j in range(k):
                out += np.tensordot(w[:, :, i, j], xp[:, :, i:i + ho, j:j + wo], axes=([1], [1]))
    out += params.bias[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_backward(
    x: np.ndarray, params: ConvParams, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a convolution w.r.t. its input, weight and bias.

    Returns ``(input_grad, weight_grad, bias_grad)``.
    """
    ho, wo = _check_conv(x, params)
    expected = (x.shape[0], params.c_out, ho, wo)
    if upstream.shape != expected:
        raise ValueError(f"upstream gradient shape {upstream.shape} != forward output shape {expected}")
    w, k, p = params.weight, params.kernel, params.padding
    bias_grad = upstream.sum(axis=(0, 2, 3))
    if k == 1 and p == 0:
        weight_grad = np.tensordot(upstream, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        input_grad = np.tensordot(w[:, :, 0, 0], upstream, axes=([0], [1])).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(input_grad), weight_grad, bias_grad

    xp = _pad(x, p)
    weight_grad = np.empty_like(w)
    gxp = np.zeros((x.shape[1], x.shape[0]) + xp.shape[2:], dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i:i + ho, j:j + wo]
            weight_grad[:, :, i, j] = np.tensordot(upstream, window, axes=([0, 2, 3], [0, 2, 3]))
            gxp[:, :, i:i + ho, j:j + wo] += np.tensordot(w[:, :, i, j], upstream, axes=([0], [1]))
    input_grad = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(input_grad), weight_grad, bias_grad


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky ReLU slope must lie in (0, 1), got {slope}")
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, upstream: np.ndarray, slope: float = 0.01) -> np.ndarray:
    """``x`` is the forward input (pre-activation)."""
    return np.where(x >= 0, upstream, slope * upstream)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0)


def elementwise_add(*operands: np.ndarray) -> np.ndarray:
    if not operands:
        raise ValueError("elementwise_add needs at least one operand")
    shape = operands[0].shape
    for idx, op in enumerate(operands[1:], start=1):
        if op.shape != shape:
            raise ValueError(f"operand {idx} has shape {op.shape}, expected {shape}")
    out = operands[0].copy()
    for op in operands[1:]:
        out += op
    return out


def elementwise_add_backward(upstream: np.ndarray, count: int) -> list[np.ndarray]:
    """The sum rule: every operand receives the upstream gradient unchanged."""
    return [upstream] * count


def differential_loss(
    prediction: np.ndarray, noisy: np.ndarray, clean: np.ndarray
) -> tuple[float, np.ndarray]:
    """Half mean squared Frobenius error between predicted and true noise.

    The target is the residual ``noisy - clean``.  Returns the loss value and
    its gradient with respect to ``prediction``.
    """
    if not (prediction.shape == noisy.shape == clean.shape):
        raise ValueError(
            f"shape mismatch: prediction {prediction.shape}, noisy {noisy.shape}, clean {clean.shape}"
        )
    n = prediction.shape[0]
    if n < 1:
        raise ValueError("batch must contain at least one sample")
    diff = prediction - (noisy - clean)
    value = 0.5 * float(np.sum(diff * diff)) / n
    return value, diff / n


@dataclass
class GradcheckResult:
    max_error: float
    checked: int
    reduced_step: int = 0  # coordinates re-checked with a smaller step to avoid a kink
    skipped: int = 0  # coordinates where no smooth step >= min_epsilon was found


def gradcheck(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-5,
    indices: Sequence[int] | None = None,
    pattern: Callable[[np.ndarray], np.ndarray] | None = None,
    min_epsilon: float = 1e-9,
) -> GradcheckResult:
    """Central-difference check of ``analytic`` against ``f`` at ``x``.

    ``indices`` restricts the check to a subset of flat coordinates.  The
    error per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.

    ``pattern`` maps ``x`` to the activation sign pattern of the computation.
    When the pattern at ``x +/- eps`` differs from the one at ``x`` the
    difference quotient straddles a kink and is not a derivative estimate;
    the step is then shrunk tenfold until both sides match (down to
    ``min_epsilon``).  ``x`` is perturbed in place and restored on return.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if analytic.shape != x.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != input shape {x.shape}")
    if not x.flags.c_contiguous:
        raise ValueError("x must be C-contiguous so it can be perturbed in place")
    flat = x.reshape(-1)
    agrad = analytic.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    base = pattern(x) if pattern is not None else None
    result = GradcheckResult(0.0, 0)

    for idx in coords:
        orig = flat[idx]
        eps = epsilon
        while True:
            flat[idx] = orig + eps
            fp = f(x)
            smooth = base is None or np.array_equal(pattern(x), base)
            flat[idx] = orig - eps
            fm = f(x)
            smooth = smooth and (base is None or np.array_equal(pattern(x), base))
            flat[idx] = orig
            if smooth or eps / 10 < min_epsilon:
                break
            eps /= 10
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {idx}")
        a = float(agrad[idx])
        if not np.isfinite(a):
            raise FloatingPointError(f"non-finite analytic gradient at coordinate {idx}")
        if not smooth:
            result.skipped += 1
            continue
        result.reduced_step += eps != epsilon
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
        result.max_error = max(result.max_error, err)
        result.checked += 1
    return result


def finite_difference_gradcheck(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Maximum relative error between ``analytic`` and central differences."""
    return gradcheck(f, x, analytic, epsilon, indices).max_error
