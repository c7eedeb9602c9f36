import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from sdcnet.data import (
    CBF_SCALE,
    COMPARTMENT_LABELS,
    NOISE_PRESETS,
    AifParams,
    PatchDataset,
    PhantomSpec,
    build_dataset,
    corrupt_series,
    crop_brain_region,
    crop_window,
    dataset_from_bytes,
    dataset_to_bytes,
    estimate_brain_mask,
    extract_patches,
    gamma_variate,
    generate_phantom_series,
    inject_low_dose_noise,
    load_dataset,
    patch_origins,
    phantom_labels,
    save_dataset,
    tissue_curve,
)
from sdcnet.formats import CtFrame, CtpSeries, FormatError
from sdcnet.metrics import psnr


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom_series(PhantomSpec(seed=0))


def test_gamma_variate_peak():
    p = AifParams()
    t = np.array([p.t0 - 1, p.t0, p.t0 + p.alpha * p.beta])
    np.testing.assert_allclose(gamma_variate(t, p), [0.0, 0.0, p.peak])


@pytest.mark.parametrize("cbf,mtt", [(22.0, 60 * 2 / 22), (60.0, 4.0), (100.0, 4.8)])
def test_tissue_curve_matches_quadrature(cbf, mtt):
    aif = AifParams()
    times = np.arange(40) * 0.5
    got = tissue_curve(times, aif, cbf, mtt, substeps=200)
    for k in (8, 15, 30):
        t = times[k]
        val, _ = integrate.quad(lambda s: gamma_variate(np.array([s]), aif)[0] * np.exp(-(t - s) / mtt),
                                0, t, points=[aif.t0], limit=200)
        assert got[k] == pytest.approx(cbf / CBF_SCALE * val, rel=1e-4, abs=1e-9)


def test_phantom_shapes_and_truth(phantom):
    series, truth = phantom
    spec = PhantomSpec()
    assert series.frames.shape == (spec.frames, spec.size, spec.size)
    assert series.aif is not None and len(series.aif) == spec.frames
    assert series.frames.min() >= 0 and series.frames.max() <= 1
    labels = phantom_labels(spec)
    for comp in spec.compartments:
        region = labels == COMPARTMENT_LABELS[comp.name]
        assert region.any()
        assert np.all(truth.cbf[region] == comp.cbf) and np.all(truth.cbv[region] == comp.cbv)
    assert np.array_equal(truth.mask, labels != 0)


def test_phantom_mtt_range():
    for comp in PhantomSpec().compartments:
        assert 4.0 <= comp.mtt <= 6.0


def test_phantom_is_deterministic(phantom):
    again, _ = generate_phantom_series(PhantomSpec(seed=0))
    assert np.array_equal(again.frames, phantom[0].frames)
    other, _ = generate_phantom_series(PhantomSpec(seed=1))
    assert not np.array_equal(other.mask, phantom[0].mask)


def test_phantom_frame_count_option():
    series, _ = generate_phantom_series(PhantomSpec(frames=27))
    assert len(series) == 27


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(size=10)
    with pytest.raises(ValueError):
        PhantomSpec(frames=2)


def test_noise_only_inside_mask(phantom):
    series, _ = phantom
    frame = series.frame(20)
    noisy = inject_low_dose_noise(frame, *NOISE_PRESETS["dose20"], seed=3)
    assert np.array_equal(noisy.pixels[~frame.mask], frame.pixels[~frame.mask])
    assert not np.array_equal(noisy.pixels[frame.mask], frame.pixels[frame.mask])
    assert noisy.pixels.min() >= 0 and noisy.pixels.max() <= 1


def test_zero_noise_is_identity(phantom):
    frame = phantom[0].frame(5)
    assert np.array_equal(inject_low_dose_noise(frame, 0.0, 0.0, 1).pixels, frame.pixels)


def test_noise_rejects_negative_sigma(phantom):
    with pytest.raises(ValueError):
        inject_low_dose_noise(phantom[0].frame(0), -0.1, 0.0, 0)


def test_noise_is_seeded(phantom):
    series = phantom[0]
    a = corrupt_series(series, *NOISE_PRESETS["dose20"], seed=5)
    b = corrupt_series(series, *NOISE_PRESETS["dose20"], seed=5)
    c = corrupt_series(series, *NOISE_PRESETS["dose20"], seed=6)
    assert np.array_equal(a.frames, b.frames) and not np.array_equal(a.frames, c.frames)


def test_dose20_calibration(phantom):
    series = phantom[0]
    noisy = corrupt_series(series, *NOISE_PRESETS["dose20"], seed=1)
    value = np.mean([psnr(n, c) for n, c in zip(noisy.frames, series.frames)])
    assert 15.0 <= value <= 21.0
    heavier = corrupt_series(series, *NOISE_PRESETS["dose8"], seed=1)
    assert np.mean([psnr(n, c) for n, c in zip(heavier.frames, series.frames)]) < value


def test_brain_mask_estimate(phantom):
    series, _ = phantom
    est = estimate_brain_mask(series.frames[0])
    agree = np.mean(est == series.mask)
    assert agree > 0.99


def test_crop_window_centred_and_clamped():
    mask = np.zeros((200, 200), dtype=bool)
    mask[90:110, 95:105] = True
    assert crop_window(mask, 180) == (10, 10)
    corner = np.zeros((200, 200), dtype=bool)
    corner[:5, :5] = True
    assert crop_window(corner, 180) == (0, 0)
    with pytest.raises(ValueError):
        crop_window(np.zeros((200, 200), dtype=bool), 180)
    with pytest.raises(ValueError):
        crop_window(mask, 250)


def test_crop_zeroes_outside_mask(phantom):
    series, _ = phantom
    block, (r0, c0) = crop_brain_region(series.frame(10), 180)
    assert block.shape == (180, 180)
    m = series.mask[r0:r0 + 180, c0:c0 + 180]
    assert not block[~m].any()
    assert np.array_equal(block[m], series.frames[10, r0:r0 + 180, c0:c0 + 180][m])


def test_patch_count_and_contents():
    block = np.random.default_rng(0).uniform(size=(180, 180))
    origins, patches = extract_patches(block, 40, 11)
    expected = [(i, j) for i in range(0, 141, 11) for j in range(0, 141, 11)]
    assert origins == expected and len(origins) == 169
    for (i, j), p in zip(origins, patches):
        assert np.array_equal(p, block[i:i + 40, j:j + 40])


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 60), st.integers(5, 60), st.integers(1, 10), st.integers(1, 9))
def test_patch_origins_enumerate_all_windows(rows, cols, patch, stride):
    if patch > min(rows, cols):
        with pytest.raises(ValueError):
            patch_origins(rows, cols, patch, stride)
        return
    origins = patch_origins(rows, cols, patch, stride)
    assert len(origins) == ((rows - patch) // stride + 1) * ((cols - patch) // stride + 1)
    assert all(i + patch <= rows and j + patch <= cols for i, j in origins)


def _small_pair(seed):
    clean, _ = generate_phantom_series(PhantomSpec(seed=seed, size=64, frames=4))
    return clean, corrupt_series(clean, *NOISE_PRESETS["dose20"], seed=seed)


def test_build_dataset_alignment():
    pairs = [_small_pair(0), _small_pair(1)]
    ds = build_dataset(pairs, 30, seed=0, patch=16, stride=8, crop=48)
    assert len(ds) == 30 and ds.low.dtype == np.float32
    for k in range(len(ds)):
        s, f, r0, c0, i, j = (int(v) for v in ds.sources[k])
        clean, noisy = pairs[s]
        rows, cols = slice(r0 + i, r0 + i + 16), slice(c0 + j, c0 + j + 16)
        m = clean.mask[rows, cols]
        assert np.array_equal(ds.high[k], np.where(m, clean.frames[f, rows, cols], 0).astype(np.float32))
        assert np.array_equal(ds.low[k], np.where(m, noisy.frames[f, rows, cols], 0).astype(np.float32))


def test_build_dataset_without_replacement_is_unique():
    ds = build_dataset([_small_pair(0)], 60, seed=1, patch=16, stride=8, crop=48)
    keys = {tuple(r) for r in ds.sources}
    assert len(keys) == 60


def test_build_dataset_limits():
    pair = _small_pair(0)
    total = 4 * 25
    with pytest.raises(ValueError):
        build_dataset([pair], total + 1, seed=0, patch=16, stride=8, crop=48)
    assert len(build_dataset([pair], total + 1, seed=0, patch=16, stride=8, crop=48, replace=True)) == total + 1
    assert len(build_dataset([pair], 0, seed=0, patch=16, stride=8, crop=48)) == 0


def test_build_dataset_rejects_mismatched_pair():
    clean, _ = _small_pair(0)
    other, _ = generate_phantom_series(PhantomSpec(size=64, frames=5))
    with pytest.raises(ValueError):
        build_dataset([(clean, other)], 1, seed=0, patch=16, stride=8, crop=48)


def test_dataset_file_roundtrip(tmp_path):
    ds = build_dataset([_small_pair(0)], 10, seed=3, patch=16, stride=8, crop=48)
    save_dataset(tmp_path / "d.patches", ds)
    again = load_dataset(tmp_path / "d.patches")
    assert np.array_equal(again.low, ds.low) and np.array_equal(again.high, ds.high)
    assert np.array_equal(again.sources, ds.sources) and again.seed == 3 and again.patch == 16
    assert dataset_to_bytes(again) == dataset_to_bytes(ds)


def test_dataset_corrupt_file_rejected():
    ds = build_dataset([_small_pair(0)], 2, seed=3, patch=16, stride=8, crop=48)
    data = dataset_to_bytes(ds)
    with pytest.raises(FormatError):
        dataset_from_bytes(data[:-5])
    with pytest.raises(FormatError):
        dataset_from_bytes(b"X" + data[1:])


def test_dataset_subset_and_pair():
    ds = build_dataset([_small_pair(0)], 5, seed=3, patch=16, stride=8, crop=48)
    sub = ds.subset([4, 0])
    assert isinstance(sub, PatchDataset) and len(sub) == 2
    low, high, origin = sub.pair(0)
    assert np.array_equal(low, ds.low[4]) and origin == tuple(int(v) for v in ds.sources[4, 4:6])


def test_series_validation():
    with pytest.raises(ValueError):
        CtpSeries(np.zeros((2, 4, 4)), np.ones((4, 4), bool), 1.0)
    with pytest.raises(ValueError):
        CtFrame(np.zeros((3, 3)), np.zeros((4, 4), bool))


def test_zero_flow_curve_is_flat():
    assert not tissue_curve(np.arange(20) * 0.5, AifParams(), 0.0, 5.0).any()


def test_central_volume_theorem(phantom):
    series, truth = phantom
    spec = PhantomSpec()
    labels = phantom_labels(spec)
    aif_area = np.trapezoid(series.aif, dx=series.dt)
    for comp in spec.compartments:
        r, c = np.argwhere(labels == COMPARTMENT_LABELS[comp.name])[0]
        curve = series.frames[:, r, c] - series.frames[0, r, c]
        cbv = 100 * np.trapezoid(curve, dx=series.dt) / aif_area
        assert cbv == pytest.approx(comp.cbv, rel=0.02)


def test_noise_statistics_monte_carlo():
    frame = CtFrame(np.full((1000, 1000), 0.5), np.ones((1000, 1000), bool))
    out = inject_low_dose_noise(frame, 0.1, 0.0, seed=11).pixels
    diff = out - 0.5
    assert abs(diff.mean()) < 3 * 0.1 / 1000
    assert diff.std() == pytest.approx(0.1, rel=0.01)


def test_psnr_decreases_with_sigma(phantom):
    frame = phantom[0].frame(30)
    values = [psnr(inject_low_dose_noise(frame, s, 0.0, seed=0).pixels, frame.pixels) for s in (0.02, 0.05, 0.1)]
    assert values[0] > values[1] > values[2]


def test_crop_centred_circle():
    yy, xx = np.mgrid[:256, :256]
    mask = (yy - 128) ** 2 + (xx - 128) ** 2 <= 60 ** 2
    assert crop_window(mask, 180) == (128 - 90, 128 - 90)


def test_crop_of_crop_is_idempotent(phantom):
    series, _ = phantom
    block, _ = crop_brain_region(series.frame(10), 180)
    mask = crop_brain_region(CtFrame(series.mask.astype(float), series.mask), 180)[0] > 0
    again, origin = crop_brain_region(CtFrame(block, mask), 180)
    assert origin == (0, 0) and np.array_equal(again, block)


def test_single_patch_when_patch_equals_block():
    block = np.arange(16.0).reshape(4, 4)
    origins, patches = extract_patches(block, 4, 3)
    assert origins == [(0, 0)] and np.array_equal(patches[0], block)


def test_large_dataset_alignment():
    """5,000 pairs from 10 series: residual energy sits inside the mask only."""
    pairs = []
    for s in range(10):
        clean, _ = generate_phantom_series(PhantomSpec(seed=s, frames=6))
        pairs.append((clean, corrupt_series(clean, *NOISE_PRESETS["dose20"], seed=s)))
    ds = build_dataset(pairs, 5000, seed=9)
    assert len(ds) == 5000 and len({tuple(r) for r in ds.sources}) == 5000
    assert np.all(ds.sources[:, 4:6] <= 140)
    inside_energy = outside_energy = 0.0
    for k in range(0, 5000, 50):
        s, f, r0, c0, i, j = (int(v) for v in ds.sources[k])
        m = pairs[s][0].mask[r0 + i:r0 + i + 40, c0 + j:c0 + j + 40]
        resid = ds.low[k].astype(np.float64) - ds.high[k]
        inside_energy += float(np.sum(resid[m] ** 2))
        outside_energy += float(np.sum(resid[~m] ** 2))
    assert inside_energy > 0 and outside_energy == 0


def test_dataset_bytes_stable_across_runs():
    a = build_dataset([_small_pair(0)], 12, seed=5, patch=16, stride=8, crop=48)
    b = build_dataset([_small_pair(0)], 12, seed=5, patch=16, stride=8, crop=48)
    assert dataset_to_bytes(a) == dataset_to_bytes(b)
