"""Finite-difference checks of every differentiable primitive and the network.

All checks run in float64.  Each primitive is reduced to a scalar by an
inner product with a fixed random weight tensor, so the analytic gradient of
that scalar is simply the primitive's backward applied to the weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import NetworkSpec, Tape, activation_pattern, build_network, network_backward, network_forward
from .tensor import (
    ConvParams,
    GradcheckResult,
    conv2d_backward,
    conv2d_forward,
    differential_loss,
    elementwise_add,
    elementwise_add_backward,
    gradcheck,
    leaky_relu,
    leaky_relu_backward,
    relu,
    relu_backward,
)

TOLERANCE = 1e-4
EPSILON = 1e-5


@dataclass
class SuiteEntry:
    name: str
    result: GradcheckResult

    @property
    def passed(self) -> bool:
        return self.result.checked > 0 and self.result.max_error < TOLERANCE

    def line(self) -> str:
        r = self.result
        status = "ok" if self.passed else "FAIL"
        return (f"{status} {self.name}: max_rel_error={r.max_error:.3e} checked={r.checked} "
                f"reduced_step={r.reduced_step} skipped={r.skipped}")


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _sample(rng, size: int, limit: int):
    return None if size <= limit else rng.choice(size, limit, replace=False)


def primitive_checks(seed: int = 0, epsilon: float = EPSILON) -> list[SuiteEntry]:
    rng = np.random.default_rng(seed)
    out: list[SuiteEntry] = []

    x = rng.normal(size=(2, 3, 6, 5))
    params = ConvParams.same(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4))
    up = rng.normal(size=(2, 4, 6, 5))
    gx, gw, gb = conv2d_backward(x, params, up)

    def conv_scalar(_):
        return float(np.sum(conv2d_forward(x, params) * up))

    out.append(SuiteEntry("conv2d/input", gradcheck(conv_scalar, x, gx, epsilon)))
    out.append(SuiteEntry("conv2d/weight", gradcheck(conv_scalar, params.weight, gw, epsilon)))
    out.append(SuiteEntry("conv2d/bias", gradcheck(conv_scalar, params.bias, gb, epsilon)))

    z = _away_from_zero(rng, (3, 4, 5))
    up = rng.normal(size=z.shape)
    out.append(SuiteEntry("leaky_relu", gradcheck(
        lambda v: float(np.sum(leaky_relu(v, 0.01) * up)), z, leaky_relu_backward(z, up, 0.01), epsilon)))
    out.append(SuiteEntry("relu", gradcheck(
        lambda v: float(np.sum(relu(v) * up)), z, relu_backward(z, up), epsilon)))

    a, b, c = (rng.normal(size=(2, 3, 4)) for _ in range(3))
    up = rng.normal(size=a.shape)
    grads = elementwise_add_backward(up, 3)
    for k, operand in enumerate((a, b, c)):
        out.append(SuiteEntry(f"elementwise_add/operand{k}", gradcheck(
            lambda _: float(np.sum(elementwise_add(a, b, c) * up)), operand, grads[k], epsilon)))

    pred = rng.normal(size=(3, 1, 5, 5))
    noisy = rng.uniform(size=pred.shape)
    clean = rng.uniform(size=pred.shape)
    _, g = differential_loss(pred, noisy, clean)
    out.append(SuiteEntry("differential_loss", gradcheck(
        lambda p: differential_loss(p, noisy, clean)[0], pred, g, epsilon)))
    return out


def network_checks(spec: NetworkSpec | None = None, seed: int = 0, per_array: int = 8,
                   epsilon: float = EPSILON, size: int = 8) -> list[SuiteEntry]:
    """End-to-end check of a (by default width-reduced) network.

    Samples ``per_array`` coordinates from every weight and bias array plus
    the input.  Steps that would cross an activation kink are shrunk.
    """
    spec = NetworkSpec.reduced(8) if spec is None else spec
    rng = np.random.default_rng(seed)
    params = build_network(spec, seed, np.float64)
    x = rng.uniform(0.0, 1.0, (1, spec.in_channels, size, size))
    clean = rng.uniform(0.0, 1.0, x.shape)
    tape = Tape()
    _, g = differential_loss(network_forward(x, params, tape), x, clean)
    grads, input_grad = network_backward(g, params, tape)

    def loss(_):
        return differential_loss(network_forward(x, params), x, clean)[0]

    def pattern(_):
        return activation_pattern(x, params)

    total = GradcheckResult(0.0, 0)
    for name in params:
        for attr in ("weight", "bias"):
            arr = getattr(params[name], attr)
            r = gradcheck(loss, arr, getattr(grads[name], attr), epsilon,
                          _sample(rng, arr.size, per_array), pattern)
            _merge(total, r)
    entries = [SuiteEntry(f"network{_label(spec)}/parameters", total)]
    # the target y - x also depends on the input, hence the extra -g
    r = gradcheck(loss, x, input_grad - g, epsilon, _sample(rng, x.size, per_array), pattern)
    entries.append(SuiteEntry(f"network{_label(spec)}/input", r))
    return entries


def _label(spec: NetworkSpec) -> str:
    return f"[{spec.initial_channels}ch]"


def _merge(total: GradcheckResult, r: GradcheckResult) -> None:
    total.max_error = max(total.max_error, r.max_error)
    total.checked += r.checked
    total.reduced_step += r.reduced_step
    total.skipped += r.skipped


def run_suite(spec: NetworkSpec | None = None, seed: int = 0,
              report: Callable[[str], None] | None = None) -> list[SuiteEntry]:
    entries = primitive_checks(seed) + network_checks(spec, seed)
    if report is not None:
        for e in entries:
            report(e.line())
    return entries
