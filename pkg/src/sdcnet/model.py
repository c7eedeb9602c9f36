"""SDCNet topology, parameters, and forward/backward passes.

The network predicts the noise map of a single-channel image; ``denoise``
subtracts that estimate from its input.  Layout, from input to output::

    initial  Conv7x7 -> act
    block 1, 2   (SDC block, wide)
    transition  Conv7x7 -> act
    block 3, 4   (SDC block, narrow)
    end      Conv3x3 -> act

An SDC block computes ``u = act(conv1x1(x))``, ``d = act(conv7x7(u))``,
``s = act(conv3x3(act(conv1x1(d))))`` and returns ``d + s + x``.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from .tensor import (
    ConvParams,
    check_tensor,
    conv2d_backward,
    conv2d_forward,
    elementwise_add,
    get_default_dtype,
    leaky_relu,
    leaky_relu_backward,
    relu,
    relu_backward,
)

BLOCK_STAGES = ("expand", "dense", "reduce", "smooth")
END_ACTIVATIONS = ("leaky", "relu", "linear")


@dataclass(frozen=True)
class SdcBlockSpec:
    in_channels: int
    expand_channels: int
    dense_channels: int
    smooth_channels: int
    reduce_channels: int | None = None  # 1x1 stage before the 3x3; defaults to dense_channels
    kernel_large: int = 7
    kernel_small: int = 3

    @property
    def reduce(self) -> int:
        return self.dense_channels if self.reduce_channels is None else self.reduce_channels


@dataclass(frozen=True)
class NetworkSpec:
    initial_channels: int = 128
    initial_kernel: int = 7
    blocks_1_2: SdcBlockSpec = field(default_factory=lambda: SdcBlockSpec(128, 256, 128, 128))
    transition_channels: int = 64
    transition_kernel: int = 7
    blocks_3_4: SdcBlockSpec = field(default_factory=lambda: SdcBlockSpec(64, 128, 64, 64))
    end_channels: int = 1
    end_kernel: int = 3
    slope: float = 0.01
    end_activation: str = "linear"  # identity; "leaky" and "relu" available
    in_channels: int = 1

    @classmethod
    def full(cls) -> "NetworkSpec":
        return cls()

    @classmethod
    def reduced(cls, factor: int = 8, **overrides) -> "NetworkSpec":
        """Same topology with every hidden channel count divided by ``factor``."""
        base = cls()

        def shrink(c: int) -> int:
            if c % factor:
                raise ValueError(f"channel count {c} not divisible by {factor}")
            return c // factor

        def block(b: SdcBlockSpec) -> SdcBlockSpec:
            return replace(
                b,
                in_channels=shrink(b.in_channels),
                expand_channels=shrink(b.expand_channels),
                dense_channels=shrink(b.dense_channels),
                smooth_channels=shrink(b.smooth_channels),
                reduce_channels=None if b.reduce_channels is None else shrink(b.reduce_channels),
            )

        spec = replace(
            base,
            initial_channels=shrink(base.initial_channels),
            blocks_1_2=block(base.blocks_1_2),
            transition_channels=shrink(base.transition_channels),
            blocks_3_4=block(base.blocks_3_4),
        )
        return replace(spec, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        d = dict(d)
        d["blocks_1_2"] = SdcBlockSpec(**d["blocks_1_2"])
        d["blocks_3_4"] = SdcBlockSpec(**d["blocks_3_4"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


@dataclass(frozen=True)
class LayerSpec:
    name: str
    c_in: int
    c_out: int
    kernel: int
    activation: str = "leaky"

    @property
    def parameter_count(self) -> int:
        return self.c_out * self.c_in * self.kernel * self.kernel + self.c_out


def block_names() -> list[str]:
    return [f"block{i}" for i in range(1, 5)]


def _block_layers(prefix: str, c_in: int, b: SdcBlockSpec) -> list[LayerSpec]:
    return [
        LayerSpec(f"{prefix}.expand", c_in, b.expand_channels, 1),
        LayerSpec(f"{prefix}.dense", b.expand_channels, b.dense_channels, b.kernel_large),
        LayerSpec(f"{prefix}.reduce", b.dense_channels, b.reduce, 1),
        LayerSpec(f"{prefix}.smooth", b.reduce, b.smooth_channels, b.kernel_small),
    ]


def layer_sequence(spec: NetworkSpec) -> list[LayerSpec]:
    """All conv layers from input to output, named with stable ids."""
    layers = [LayerSpec("initial", spec.in_channels, spec.initial_channels, spec.initial_kernel)]
    c = spec.initial_channels
    for name in ("block1", "block2"):
        layers += _block_layers(name, c, spec.blocks_1_2)
    layers.append(LayerSpec("transition", spec.blocks_1_2.in_channels, spec.transition_channels,
                            spec.transition_kernel))
    c = spec.transition_channels
    for name in ("block3", "block4"):
        layers += _block_layers(name, c, spec.blocks_3_4)
    layers.append(LayerSpec("end", spec.blocks_3_4.in_channels, spec.end_channels, spec.end_kernel,
                            spec.end_activation))
    return layers


def validate_spec(spec: NetworkSpec) -> None:
    """Reject topologies whose channel chain or kernels do not type-check."""
    if spec.end_activation not in END_ACTIVATIONS:
        raise ValueError(f"end_activation must be one of {END_ACTIVATIONS}, got {spec.end_activation!r}")
    if not 0.0 < spec.slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {spec.slope}")
    for layer in layer_sequence(spec):
        if layer.c_in < 1 or layer.c_out < 1:
            raise ValueError(f"layer {layer.name} has a non-positive channel count")
        if layer.kernel < 1 or layer.kernel % 2 == 0:
            raise ValueError(f"layer {layer.name} kernel {layer.kernel} must be odd and positive")

    # channel flow: (producer name, produced channels, consumer name, consumed channels)
    pairs = [("initial", spec.initial_channels, "block1", spec.blocks_1_2.in_channels)]
    for name, b in (("block1", spec.blocks_1_2), ("block3", spec.blocks_3_4)):
        pairs += [
            (f"{name}.dense", b.dense_channels, f"{name} skip", b.in_channels),
            (f"{name}.smooth", b.smooth_channels, f"{name} skip", b.in_channels),
        ]
    pairs.append(("transition", spec.transition_channels, "block3", spec.blocks_3_4.in_channels))
    for producer, c_out, consumer, c_in in pairs:
        if c_out != c_in:
            raise ValueError(
                f"inconsistent channel chain: {producer} produces {c_out} channels "
                f"but {consumer} expects {c_in}"
            )


def parameter_count(spec: NetworkSpec) -> int:
    validate_spec(spec)
    return sum(layer.parameter_count for layer in layer_sequence(spec))


class ParameterStore:
    """Ordered mapping of layer id to :class:`ConvParams`.

    Also used to hold gradients and momentum buffers, which share the same
    layout as the weights they belong to.
    """

    def __init__(self, spec: NetworkSpec, layers: "OrderedDict[str, ConvParams]", seed: int | None = None):
        self.spec = spec
        self.layers = layers
        self.seed = seed

    def __getitem__(self, name: str) -> ConvParams:
        return self.layers[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def items(self):
        return self.layers.items()

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``("<layer>.weight", w)``, ``("<layer>.bias", b)`` in layer order."""
        for name, p in self.layers.items():
            yield f"{name}.weight", p.weight
            yield f"{name}.bias", p.bias

    def count(self) -> int:
        return sum(a.size for _, a in self.arrays())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.layers.values())).weight.dtype

    def map(self, fn) -> "ParameterStore":
        layers = OrderedDict(
            (name, ConvParams(fn(p.weight), fn(p.bias), p.padding)) for name, p in self.layers.items()
        )
        return ParameterStore(self.spec, layers, self.seed)

    def copy(self) -> "ParameterStore":
        return self.map(np.copy)

    def zeros_like(self) -> "ParameterStore":
        return self.map(np.zeros_like)

    def astype(self, dtype) -> "ParameterStore":
        return self.map(lambda a: a.astype(dtype))

    def block(self, name: str) -> dict[str, ConvParams]:
        return {stage: self.layers[f"{name}.{stage}"] for stage in BLOCK_STAGES}

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of every array, names and dtypes included."""
        mine, theirs = list(self.arrays()), list(other.arrays())
        if [n for n, _ in mine] != [n for n, _ in theirs]:
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for (_, a), (_, b) in zip(mine, theirs)
        )


def build_network(spec: NetworkSpec, seed: int = 0, dtype=None) -> ParameterStore:
    """Initialise weights with a seeded fan-based uniform scheme, biases at zero.

    The bound for a layer is ``sqrt(6 / (c_in*k^2 + c_out*k^2))``.  Draws are
    made in float64 in layer order and then cast, so the float32 and float64
    networks built from one seed agree up to rounding.
    """
    validate_spec(spec)
    dtype = get_default_dtype() if dtype is None else np.dtype(dtype)
    rng = np.random.default_rng(seed)
    layers: OrderedDict[str, ConvParams] = OrderedDict()
    for layer in layer_sequence(spec):
        k = layer.kernel
        bound = np.sqrt(6.0 / (layer.c_in * k * k + layer.c_out * k * k))
        w = rng.uniform(-bound, bound, size=(layer.c_out, layer.c_in, k, k)).astype(dtype)
        b = np.zeros(layer.c_out, dtype=dtype)
        layers[layer.name] = ConvParams.same(w, b)
    return ParameterStore(spec, layers, seed)


def zero_network(spec: NetworkSpec, dtype=None) -> ParameterStore:
    return build_network(spec, 0, dtype).zeros_like()


# -- forward / backward ------------------------------------------------------

def _activate(z: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "leaky":
        return leaky_relu(z, slope)
    if kind == "relu":
        return relu(z)
    return z


def _activate_backward(z: np.ndarray, g: np.ndarray, kind: str, slope: float) -> np.ndarray:
    if kind == "leaky":
        return leaky_relu_backward(z, g, slope)
    if kind == "relu":
        return relu_backward(z, g)
    return g


class Tape:
    """Inputs and pre-activations recorded during a forward pass."""

    def __init__(self):
        self.records: dict[str, tuple[np.ndarray, np.ndarray]] = {}


def _conv_act(name, x, p: ConvParams, kind, slope, tape: Tape | None):
    z = conv2d_forward(x, p)
    if tape is not None:
        tape.records[name] = (x, z)
    return _activate(z, kind, slope)


def _conv_act_backward(name, g, p: ConvParams, kind, slope, tape: Tape, grads):
    x, z = tape.records[name]
    g = _activate_backward(z, g, kind, slope)
    gx, gw, gb = conv2d_backward(x, p, g)
    grads[name] = ConvParams(gw, gb, p.padding)
    return gx


def sdc_block_forward(
    x: np.ndarray,
    block: Mapping[str, ConvParams],
    slope: float = 0.01,
    tape: Tape | None = None,
    prefix: str = "block",
) -> np.ndarray:
    """One SDC block; output has the same shape as ``x``."""
    check_tensor(x, "block input")
    if x.shape[1] != block["expand"].c_in:
        raise ValueError(
            f"block input has {x.shape[1]} channels, expand stage expects {block['expand'].c_in}"
        )
    u = _conv_act(f"{prefix}.expand", x, block["expand"], "leaky", slope, tape)
    d = _conv_act(f"{prefix}.dense", u, block["dense"], "leaky", slope, tape)
    r = _conv_act(f"{prefix}.reduce", d, block["reduce"], "leaky", slope, tape)
    s = _conv_act(f"{prefix}.smooth", r, block["smooth"], "leaky", slope, tape)
    return elementwise_add(d, s, x)


def _sdc_block_backward(g, block, slope, tape, grads, prefix):
    g_dense_skip, g_smooth, g_input = g, g, g
    g_r = _conv_act_backward(f"{prefix}.smooth", g_smooth, block["smooth"], "leaky", slope, tape, grads)
    g_d = _conv_act_backward(f"{prefix}.reduce", g_r, block["reduce"], "leaky", slope, tape, grads)
    g_d = g_d + g_dense_skip
    g_u = _conv_act_backward(f"{prefix}.dense", g_d, block["dense"], "leaky", slope, tape, grads)
    g_x = _conv_act_backward(f"{prefix}.expand", g_u, block["expand"], "leaky", slope, tape, grads)
    return g_x + g_input


def _check_network_input(noisy: np.ndarray, params: ParameterStore) -> None:
    check_tensor(noisy, "network input")
    if noisy.shape[1] != params.spec.in_channels:
        raise ValueError(f"network expects {params.spec.in_channels} input channel(s), got shape {noisy.shape}")
    if noisy.shape[2] < 7 or noisy.shape[3] < 7:
        raise ValueError(f"input spatial size {noisy.shape[2:]} is smaller than one 7x7 window")


def network_forward(noisy: np.ndarray, params: ParameterStore, tape: Tape | None = None) -> np.ndarray:
    """Noise estimate ``T(y)``; pass a :class:`Tape` to enable :func:`network_backward`."""
    _check_network_input(noisy, params)
    spec = params.spec
    slope = spec.slope
    h = _conv_act("initial", noisy, params["initial"], "leaky", slope, tape)
    for name in ("block1", "block2"):
        h = sdc_block_forward(h, params.block(name), slope, tape, name)
    h = _conv_act("transition", h, params["transition"], "leaky", slope, tape)
    for name in ("block3", "block4"):
        h = sdc_block_forward(h, params.block(name), slope, tape, name)
    return _conv_act("end", h, params["end"], spec.end_activation, slope, tape)


def network_backward(
    upstream: np.ndarray, params: ParameterStore, tape: Tape
) -> tuple[ParameterStore, np.ndarray]:
    """Gradients of every layer plus the gradient w.r.t. the network input."""
    spec = params.spec
    slope = spec.slope
    grads: dict[str, ConvParams] = {}
    g = _conv_act_backward("end", upstream, params["end"], spec.end_activation, slope, tape, grads)
    for name in ("block4", "block3"):
        g = _sdc_block_backward(g, params.block(name), slope, tape, grads, name)
    g = _conv_act_backward("transition", g, params["transition"], "leaky", slope, tape, grads)
    for name in ("block2", "block1"):
        g = _sdc_block_backward(g, params.block(name), slope, tape, grads, name)
    g = _conv_act_backward("initial", g, params["initial"], "leaky", slope, tape, grads)
    ordered = OrderedDict((name, grads[name]) for name in params)
    return ParameterStore(spec, ordered, params.seed), g


def denoise(noisy: np.ndarray, params: ParameterStore) -> np.ndarray:
    """Clean estimate ``y - T(y)``."""
    return noisy - network_forward(noisy, params)


def denoise_frames(frames: np.ndarray, params: ParameterStore, batch: int = 4) -> np.ndarray:
    """Denoise a stack of 2-D frames ``(t, h, w)`` in mini-batches.

    Frames are cast to the parameter dtype for the forward pass; the result
    keeps that dtype.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError(f"expected (t, h, w) frames, got shape {frames.shape}")
    x = frames.astype(params.dtype, copy=False)
    out = np.empty_like(x)
    for start in range(0, len(x), batch):
        chunk = x[start:start + batch, None]
        out[start:start + batch] = denoise(chunk, params)[:, 0]
    return out


def activation_pattern(noisy: np.ndarray, params: ParameterStore) -> np.ndarray:
    """Sign of every pre-activation, flattened in layer order.

    Two points with equal patterns lie in the same linear region of the
    network, which is what a finite-difference check needs.
    """
    tape = Tape()
    network_forward(noisy, params, tape)
    return np.concatenate([(z >= 0).ravel() for _, z in tape.records.values()])
