import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdcnet.data import PatchDataset
from sdcnet.model import NetworkSpec, build_network
from sdcnet.trainer import (
    TrainConfig,
    TrainState,
    TrainingDiverged,
    clip_gradients,
    epoch_permutation,
    global_norm,
    load_state,
    lr_at,
    read_log,
    save_state,
    sgd_step,
    train,
)

SPEC = NetworkSpec.reduced(16)


def _grads(params, value):
    return params.map(lambda a: np.full_like(a, value))


def _dataset(n=6, size=9, seed=0):
    rng = np.random.default_rng(seed)
    high = rng.uniform(0.2, 0.6, (n, size, size)).astype(np.float32)
    low = np.clip(high + rng.normal(0, 0.1, high.shape), 0, 1).astype(np.float32)
    return PatchDataset(low, high, np.zeros((n, 6), dtype=np.uint32), size, seed)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.1
    assert lr_at(19, cfg) == 0.1
    assert lr_at(20, cfg) == pytest.approx(0.01)
    assert lr_at(45, TrainConfig(lr_step_period=10, lr_step_factor=0.5)) == pytest.approx(0.1 / 16)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_step_factor=1.5)


def test_clip_leaves_small_gradients():
    params = build_network(SPEC, dtype=np.float64)
    g = params.map(lambda a: np.zeros_like(a))
    g["end"].bias[0] = 0.05
    clipped = clip_gradients(g, 0.1)
    assert clipped is g and global_norm(clipped) == pytest.approx(0.05)


def test_clip_scales_large_gradients():
    params = build_network(SPEC, dtype=np.float64)
    g = params.map(lambda a: np.zeros_like(a))
    g["end"].bias[0] = 1.0
    clipped = clip_gradients(g, 0.1)
    assert clipped["end"].bias[0] == pytest.approx(0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10))
def test_clip_bounds_global_norm(seed, threshold):
    rng = np.random.default_rng(seed)
    params = build_network(SPEC, dtype=np.float64)
    g = params.map(lambda a: rng.normal(size=a.shape))
    assert global_norm(clip_gradients(g, threshold)) <= threshold + 1e-12


def test_clip_value_mode():
    params = build_network(SPEC, dtype=np.float64)
    g = _grads(params, 3.0)
    assert all(np.all(a == 0.5) for _, a in clip_gradients(g, 0.5, "value").arrays())


def test_clip_rejects_non_finite():
    params = build_network(SPEC, dtype=np.float64)
    g = _grads(params, 0.0)
    g["block2.dense"].weight[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="block2.dense"):
        clip_gradients(g, 0.1)


def test_sgd_plain_step():
    params = build_network(SPEC, dtype=np.float64)
    before = params.copy()
    state = TrainState.fresh(params)
    sgd_step(state, _grads(params, 2.0), 0.1, TrainConfig(momentum=0, weight_decay=0))
    for (_, a), (_, b) in zip(state.params.arrays(), before.arrays()):
        np.testing.assert_allclose(a, b - 0.2, rtol=0, atol=1e-15)


def test_momentum_hand_unrolled():
    params = build_network(SPEC, dtype=np.float64).zeros_like()
    state = TrainState.fresh(params)
    cfg = TrainConfig(momentum=0.9, weight_decay=0)
    g = _grads(params, 1.0)
    sgd_step(state, g, 0.1, cfg)
    sgd_step(state, g, 0.1, cfg)
    # v1 = g, v2 = 0.9 g + g = 1.9 g; w2 = -0.1 (g + 1.9 g) = -0.29 g
    assert state.velocity["end"].bias[0] == pytest.approx(1.9)
    assert state.params["end"].bias[0] == pytest.approx(-0.29)
    assert state.step == 2


def test_weight_decay_enters_velocity():
    params = build_network(SPEC, dtype=np.float64)
    w0 = params["initial"].weight.copy()
    state = TrainState.fresh(params)
    sgd_step(state, _grads(params, 0.0), 1.0, TrainConfig(momentum=0, weight_decay=0.5))
    np.testing.assert_allclose(state.params["initial"].weight, 0.5 * w0)


def test_zero_gradient_no_decay_is_noop():
    params = build_network(SPEC, dtype=np.float64)
    before = params.copy()
    state = TrainState.fresh(params)
    sgd_step(state, _grads(params, 0.0), 0.1, TrainConfig(weight_decay=0))
    assert state.params.equal(before)


def test_sgd_shape_mismatch():
    params = build_network(SPEC, dtype=np.float64)
    other = build_network(NetworkSpec.reduced(8), dtype=np.float64)
    state = TrainState.fresh(params)
    with pytest.raises((ValueError, KeyError)):
        sgd_step(state, other, 0.1, TrainConfig())


def test_epoch_permutation_is_seeded():
    a = epoch_permutation(0, 3, 50)
    assert np.array_equal(a, epoch_permutation(0, 3, 50))
    assert sorted(a) == list(range(50))
    assert not np.array_equal(a, epoch_permutation(0, 4, 50))


def test_training_reduces_loss_and_logs():
    ds = _dataset()
    buf = io.StringIO()
    state = train(ds, SPEC, TrainConfig(batch_size=3, epochs=4, lr_step_period=100), log_file=buf)
    assert state.step == 8 and state.epoch == 4
    assert len(state.epoch_losses) == 4 and all(math.isfinite(v) for v in state.epoch_losses)
    assert state.epoch_losses[-1] < state.epoch_losses[0]
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("#") and len(lines) == 9


def test_resume_matches_uninterrupted(tmp_path):
    ds = _dataset()
    cfg = TrainConfig(batch_size=4, epochs=4, lr_step_period=2, seed=7)
    full = train(ds, SPEC, cfg)

    half = TrainConfig(batch_size=4, epochs=2, lr_step_period=2, seed=7)
    path = tmp_path / "state.ck"
    train(ds, SPEC, half, checkpoint_path=path)
    state, saved = load_state(path, SPEC)
    assert saved == half and state.epoch == 2
    resumed = train(ds, SPEC, cfg, state)
    assert resumed.params.equal(full.params)
    assert resumed.velocity.equal(full.velocity)
    assert resumed.step_losses == full.step_losses


def test_training_is_deterministic(tmp_path):
    ds = _dataset()
    cfg = TrainConfig(batch_size=3, epochs=2)
    a, b = tmp_path / "a.ck", tmp_path / "b.ck"
    train(ds, SPEC, cfg, checkpoint_path=a)
    train(ds, SPEC, cfg, checkpoint_path=b)
    assert a.read_bytes() == b.read_bytes()


def test_divergence_raises():
    ds = _dataset()
    ds.low[0, 0, 0] = np.inf
    with pytest.raises(TrainingDiverged):
        train(ds, SPEC, TrainConfig(batch_size=6, epochs=1))


def test_empty_dataset_rejected():
    empty = np.zeros((0, 9, 9), dtype=np.float32)
    with pytest.raises(ValueError):
        train(PatchDataset(empty, empty, np.zeros((0, 6), np.uint32), 9, 0), SPEC, TrainConfig())


def test_read_log(tmp_path):
    path = tmp_path / "log.txt"
    with open(path, "w") as fh:
        train(_dataset(), SPEC, TrainConfig(batch_size=6, epochs=2), log_file=fh)
    records = read_log(path)
    assert [r[1] for r in records] == [1, 2] and records[0][2] == pytest.approx(0.1)


def test_save_state_roundtrip(tmp_path):
    state = train(_dataset(), SPEC, TrainConfig(batch_size=6, epochs=1))
    save_state(tmp_path / "s.ck", state, TrainConfig(batch_size=6, epochs=1))
    again, _ = load_state(tmp_path / "s.ck")
    assert again.params.equal(state.params) and again.epoch_losses == state.epoch_losses
