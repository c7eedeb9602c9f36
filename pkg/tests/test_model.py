import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdcnet.model import (
    LayerSpec,
    NetworkSpec,
    SdcBlockSpec,
    Tape,
    activation_pattern,
    build_network,
    denoise,
    denoise_frames,
    layer_sequence,
    network_backward,
    network_forward,
    parameter_count,
    validate_spec,
    zero_network,
)
from sdcnet.tensor import differential_loss, gradcheck

# (c_out, c_in, k) for the full-width network, written out by hand.
FULL_LAYERS = (
    [(128, 1, 7)]
    + [(256, 128, 1), (128, 256, 7), (128, 128, 1), (128, 128, 3)] * 2
    + [(64, 128, 7)]
    + [(128, 64, 1), (64, 128, 7), (64, 64, 1), (64, 64, 3)] * 2
    + [(1, 64, 3)]
)
FULL_PARAMETER_COUNT = 4_915_969  # sum of c_out*c_in*k*k + c_out over FULL_LAYERS


def test_hand_count_matches_frozen_total():
    assert sum(o * i * k * k + o for o, i, k in FULL_LAYERS) == FULL_PARAMETER_COUNT


def test_layer_sequence_matches_architecture():
    layers = layer_sequence(NetworkSpec.full())
    assert [(l.c_out, l.c_in, l.kernel) for l in layers] == FULL_LAYERS
    assert [l.name for l in layers][:3] == ["initial", "block1.expand", "block1.dense"]
    assert layers[-1].name == "end"
    assert sum(1 for l in layers if l.name.endswith(".expand")) == 4


def test_parameter_count():
    assert parameter_count(NetworkSpec.full()) == FULL_PARAMETER_COUNT
    assert build_network(NetworkSpec.reduced(8)).count() == parameter_count(NetworkSpec.reduced(8))


def test_single_bottleneck_layer_count():
    assert LayerSpec("x", 128, 256, 1).parameter_count == 33_024


def test_bottlenecks_reduce_parameters():
    direct = NetworkSpec(blocks_1_2=SdcBlockSpec(128, 256, 128, 128, kernel_small=7))
    assert parameter_count(direct) > parameter_count(NetworkSpec.full())


def test_reduced_widths():
    spec = NetworkSpec.reduced(8)
    widths = {l.c_out for l in layer_sequence(spec)} - {1}
    assert widths == {8, 16, 32}


def test_inconsistent_chain_rejected():
    bad = NetworkSpec(transition_channels=32)
    with pytest.raises(ValueError, match="inconsistent channel chain: transition produces 32 channels"):
        validate_spec(bad)


def test_bad_end_activation_rejected():
    with pytest.raises(ValueError):
        validate_spec(NetworkSpec(end_activation="tanh"))


def test_spec_json_roundtrip():
    spec = NetworkSpec.reduced(4, slope=0.2)
    again = NetworkSpec.from_dict(json.loads(spec.to_json()))
    assert again == spec and again.digest() == spec.digest()
    assert NetworkSpec.reduced(8).digest() != NetworkSpec.reduced(4).digest()


def test_init_bounds_and_zero_bias():
    params = build_network(NetworkSpec.reduced(8), seed=3, dtype=np.float64)
    for layer in layer_sequence(params.spec):
        p = params[layer.name]
        k = layer.kernel
        bound = np.sqrt(6.0 / (layer.c_in * k * k + layer.c_out * k * k))
        assert np.abs(p.weight).max() <= bound
        assert not p.bias.any()


def test_build_is_seeded():
    spec = NetworkSpec.reduced(8)
    assert build_network(spec, 1).equal(build_network(spec, 1))
    assert not build_network(spec, 1).equal(build_network(spec, 2))


@settings(max_examples=10, deadline=None)
@given(st.integers(7, 20), st.integers(7, 20), st.integers(1, 3))
def test_shape_preservation(h, w, n):
    params = build_network(NetworkSpec.reduced(16), seed=0, dtype=np.float64)
    x = np.random.default_rng(h * w).uniform(size=(n, 1, h, w))
    assert network_forward(x, params).shape == x.shape


@settings(max_examples=10, deadline=None)
@given(st.integers(7, 24), st.integers(0, 2**32 - 1))
def test_zero_network_is_identity(size, seed):
    params = zero_network(NetworkSpec.reduced(8), np.float64)
    y = np.random.default_rng(seed).uniform(size=(1, 1, size, size))
    assert np.array_equal(denoise(y, params), y)


def test_too_small_input_rejected():
    params = zero_network(NetworkSpec.reduced(16))
    with pytest.raises(ValueError):
        network_forward(np.zeros((1, 1, 6, 9)), params)


def test_forward_is_deterministic():
    params = build_network(NetworkSpec.reduced(8), seed=5, dtype=np.float32)
    x = np.random.default_rng(0).uniform(size=(2, 1, 12, 12)).astype(np.float32)
    assert np.array_equal(network_forward(x, params), network_forward(x.copy(), params))


def test_gradient_flow():
    params = build_network(NetworkSpec.reduced(8), seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(2, 1, 12, 12))
    clean = rng.uniform(size=x.shape)
    tape = Tape()
    _, g = differential_loss(network_forward(x, params, tape), x, clean)
    grads, _ = network_backward(g, params, tape)
    total = sum(a.size for _, a in grads.arrays())
    nonzero = sum(int(np.count_nonzero(a)) for _, a in grads.arrays())
    assert nonzero / total >= 0.99


def test_network_gradient_spot_check():
    spec = NetworkSpec.reduced(16)
    params = build_network(spec, seed=2, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(1, 1, 8, 8))
    clean = rng.uniform(size=x.shape)
    tape = Tape()
    _, g = differential_loss(network_forward(x, params, tape), x, clean)
    grads, _ = network_backward(g, params, tape)

    def loss(_):
        return differential_loss(network_forward(x, params), x, clean)[0]

    for name in ("initial", "block2.smooth", "end"):
        res = gradcheck(loss, params[name].weight, grads[name].weight, 1e-5,
                        range(4), lambda _: activation_pattern(x, params))
        assert res.max_error < 1e-4


@pytest.mark.parametrize("kind", ["leaky", "relu", "linear"])
def test_end_activations(kind):
    spec = NetworkSpec.reduced(16, end_activation=kind)
    params = build_network(spec, seed=0, dtype=np.float64)
    out = network_forward(np.random.default_rng(0).uniform(size=(1, 1, 9, 9)), params)
    if kind == "relu":
        assert out.min() >= 0


def test_denoise_frames_matches_denoise():
    params = build_network(NetworkSpec.reduced(16), seed=0, dtype=np.float64)
    frames = np.random.default_rng(0).uniform(size=(5, 10, 10))
    batched = denoise_frames(frames, params, batch=2)
    single = np.stack([denoise(f[None, None], params)[0, 0] for f in frames])
    np.testing.assert_allclose(batched, single, rtol=1e-12, atol=1e-12)
