"""Scaled-down training experiments used by the acceptance suite.

``run_overfit`` fits a width-reduced network to eight fixed patch pairs;
``run_generalization`` trains on patches from four phantom series and
scores two held-out series.  Both are deterministic for fixed seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NOISE_PRESETS, PatchDataset, PhantomSpec, build_dataset, corrupt_series, generate_phantom_series
from .formats import CtpSeries, PerfusionMaps
from .metrics import evaluate, psnr
from .model import NetworkSpec, ParameterStore, build_network, denoise, denoise_frames
from .perfusion import Aif, DeconvolutionConfig, masked_rmse, quantify_series
from .trainer import TrainConfig, dataset_loss, save_state, train

TINY_SPEC = NetworkSpec.reduced(8)


def phantom_pair(seed: int, noise_seed: int, preset: str = "dose20") -> tuple[CtpSeries, CtpSeries, PerfusionMaps]:
    clean, truth = generate_phantom_series(PhantomSpec(seed=seed))
    noisy = corrupt_series(clean, *NOISE_PRESETS[preset], seed=noise_seed)
    return clean, noisy, truth


def patch_psnr_gain(params: ParameterStore, ds: PatchDataset) -> float:
    low = ds.low[:, None].astype(params.dtype)
    restored = denoise(low, params)[:, 0]
    gains = [psnr(r, h) - psnr(l, h) for r, l, h in zip(restored, ds.low, ds.high)]
    return float(np.mean(gains))


@dataclass
class OverfitResult:
    initial_loss: float
    final_loss: float
    psnr_gain: float
    steps: int
    seconds: float
    params: ParameterStore

    @property
    def loss_ratio(self) -> float:
        return self.initial_loss / self.final_loss


def run_overfit(steps: int = 200, checkpoint: Path | None = None, spec: NetworkSpec = TINY_SPEC) -> OverfitResult:
    """Full-batch SGD on 8 dose20 patch pairs with the default optimiser settings.

    With one step per epoch the step schedule is held flat for the run
    (period = ``steps``).
    """
    clean, noisy, _ = phantom_pair(0, 1)
    ds = build_dataset([(clean, noisy)], 8, seed=2)
    config = TrainConfig(batch_size=8, epochs=steps, lr_step_period=steps, seed=0)
    start = time.perf_counter()
    initial = dataset_loss(build_network(spec, config.seed, config.dtype), ds)
    state = train(ds, spec, config)
    final = dataset_loss(state.params, ds)
    gain = patch_psnr_gain(state.params, ds)
    elapsed = time.perf_counter() - start
    if checkpoint is not None:
        save_state(checkpoint, state, config)
    return OverfitResult(initial, final, gain, state.step, elapsed, state.params)


@dataclass
class GeneralizationResult:
    noisy_psnr: float
    denoised_psnr: float
    noisy_ssim: float
    denoised_ssim: float
    seconds: float
    params: ParameterStore


TRAIN_SEEDS = (0, 1, 2, 3)
HELD_OUT_SEEDS = (4, 5)


def run_generalization(count: int = 2000, epochs: int = 1, spec: NetworkSpec = TINY_SPEC) -> GeneralizationResult:
    start = time.perf_counter()
    pairs = [phantom_pair(s, 100 + s)[:2] for s in TRAIN_SEEDS]
    ds = build_dataset(pairs, count, seed=2)
    config = TrainConfig(batch_size=8, epochs=epochs, lr_step_period=max(1, epochs), seed=0)
    state = train(ds, spec, config)

    noisy_pairs, restored_pairs = [], []
    for s in HELD_OUT_SEEDS:
        clean, noisy, _ = phantom_pair(s, 100 + s)
        restored = denoise_frames(noisy.frames, state.params).astype(np.float64)
        noisy_pairs += list(zip(noisy.frames, clean.frames))
        restored_pairs += list(zip(restored, clean.frames))
    before = evaluate(noisy_pairs)
    after = evaluate(restored_pairs)
    return GeneralizationResult(before.psnr_db, after.psnr_db, before.ssim, after.ssim,
                                time.perf_counter() - start, state.params)


@dataclass
class PerfusionComparison:
    clean_maps: PerfusionMaps
    noisy_maps: PerfusionMaps
    denoised_maps: PerfusionMaps
    truth: PerfusionMaps

    def rmse(self, which: str) -> tuple[float, float]:
        maps = getattr(self, f"{which}_maps")
        m = self.truth.mask
        return masked_rmse(maps.cbf, self.truth.cbf, m), masked_rmse(maps.cbv, self.truth.cbv, m)


def compare_perfusion(params: ParameterStore, seed: int = HELD_OUT_SEEDS[0],
                      config: DeconvolutionConfig = DeconvolutionConfig()) -> PerfusionComparison:
    """Maps of one phantom from its clean, dose20-noisy and denoised series."""
    clean, noisy, truth = phantom_pair(seed, 100 + seed)
    aif = Aif(clean.aif, clean.dt)
    restored = noisy.with_frames(denoise_frames(noisy.frames, params))
    return PerfusionComparison(
        quantify_series(clean, aif, config),
        quantify_series(noisy, aif, config),
        quantify_series(restored, aif, config),
        truth,
    )
