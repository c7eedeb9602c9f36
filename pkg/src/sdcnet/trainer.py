"""SGD training of the noise-prediction objective.

Update rule, with weight decay folded into the gradient::

    v <- momentum * v + (g + weight_decay * w)
    w <- w - lr * v

Gradients are clipped by their global L2 norm before the update.  Data
order is a per-epoch permutation drawn from a Philox generator keyed by the
seed and advanced by the epoch number, so resuming at an epoch boundary
replays the same batches as an uninterrupted run.

Training log format: one whitespace-separated record per step with columns
``epoch step lr loss``; lines starting with ``#`` are comments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import PatchDataset
from .model import NetworkSpec, ParameterStore, Tape, build_network, network_backward, network_forward
from .tensor import differential_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    clip_mode: str = "norm"  # "norm" (global L2) or "value" (per element)
    batch_size: int = 64
    epochs: int = 50
    lr_step_period: int = 20
    lr_step_factor: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        if self.base_lr <= 0 or self.grad_clip <= 0:
            raise ValueError("learning rate and clip threshold must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight decay be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_step_period < 1:
            raise ValueError("batch_size and lr_step_period must be >= 1, epochs >= 0")
        if not 0 < self.lr_step_factor <= 1:
            raise ValueError("lr_step_factor must lie in (0, 1]")
        if self.clip_mode not in ("norm", "value"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")


@dataclass
class TrainState:
    params: ParameterStore
    velocity: ParameterStore
    epoch: int = 0
    step: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ParameterStore) -> "TrainState":
        return cls(params, params.zeros_like())


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.base_lr * config.lr_step_factor ** (epoch // config.lr_step_period)


def global_norm(grads: ParameterStore) -> float:
    total = 0.0
    for _, a in grads.arrays():
        total += float(np.sum(np.square(a, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(grads: ParameterStore, threshold: float, mode: str = "norm") -> ParameterStore:
    """Rescale so the global L2 norm is at most ``threshold`` (or clamp elements in ``"value"`` mode)."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    for name, a in grads.arrays():
        if not np.all(np.isfinite(a)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
    if mode == "value":
        return grads.map(lambda a: np.clip(a, -threshold, threshold))
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return grads.map(lambda a: a * a.dtype.type(scale))


def sgd_step(state: TrainState, grads: ParameterStore, lr: float, config: TrainConfig) -> TrainState:
    """Momentum SGD with L2 weight decay; updates ``state`` in place and returns it."""
    for name in state.params:
        p, v, g = state.params[name], state.velocity[name], grads[name]
        if g.weight.shape != p.weight.shape or g.bias.shape != p.bias.shape:
            raise ValueError(f"gradient shape mismatch for layer {name}")
        dt = p.weight.dtype.type
        for w, vel, grad in ((p.weight, v.weight, g.weight), (p.bias, v.bias, g.bias)):
            vel *= dt(config.momentum)
            vel += grad + dt(config.weight_decay) * w
            w -= dt(lr) * vel
            if not np.all(np.isfinite(w)):
                raise TrainingDiverged(f"non-finite parameters after update of layer {name}")
    state.step += 1
    return state


def loss_and_grads(params: ParameterStore, low: np.ndarray, high: np.ndarray):
    """Differential loss on a batch of ``(n, h, w)`` patches and its parameter gradients."""
    x = low[:, None].astype(params.dtype, copy=False)
    clean = high[:, None].astype(params.dtype, copy=False)
    tape = Tape()
    pred = network_forward(x, params, tape)
    value, g = differential_loss(pred, x, clean)
    grads, _ = network_backward(g, params, tape)
    return value, grads


def dataset_loss(params: ParameterStore, dataset: PatchDataset, batch: int = 64) -> float:
    """Loss over the whole dataset, i.e. the mean over samples of the per-sample loss."""
    total = 0.0
    for start in range(0, len(dataset), batch):
        x = dataset.low[start:start + batch, None].astype(params.dtype, copy=False)
        clean = dataset.high[start:start + batch, None].astype(params.dtype, copy=False)
        value, _ = differential_loss(network_forward(x, params), x, clean)
        total += value * len(x)
    return total / len(dataset)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    bitgen = np.random.Philox(key=seed).jumped(epoch)
    return np.random.Generator(bitgen).permutation(n)


def state_metadata(state: TrainState, config: TrainConfig) -> dict:
    return {
        "config": asdict(config),
        "epoch": state.epoch,
        "step": state.step,
        "epoch_losses": state.epoch_losses,
        "step_losses": state.step_losses,
        "seed": state.params.seed,
    }


def save_state(path, state: TrainState, config: TrainConfig) -> None:
    save_checkpoint(path, state.params, state_metadata(state, config), state.velocity)


def load_state(path, spec: NetworkSpec | None = None) -> tuple[TrainState, TrainConfig]:
    ckpt: Checkpoint = load_checkpoint(path, spec)
    meta = ckpt.metadata
    config = TrainConfig(**meta["config"]) if "config" in meta else TrainConfig()
    velocity = ckpt.momentum if ckpt.momentum is not None else ckpt.params.zeros_like()
    state = TrainState(ckpt.params, velocity, meta.get("epoch", 0), meta.get("step", 0),
                       list(meta.get("epoch_losses", [])), list(meta.get("step_losses", [])))
    return state, config


def train(
    dataset: PatchDataset,
    spec: NetworkSpec,
    config: TrainConfig,
    state: TrainState | None = None,
    checkpoint_path=None,
    log_file: TextIO | None = None,
) -> TrainState:
    """Run epochs ``state.epoch .. config.epochs - 1`` of minibatch SGD.

    A fresh state is built from ``spec`` and ``config.seed`` when ``state``
    is None.  Checkpoints are written every ``config.checkpoint_every``
    epochs and after the final epoch when ``checkpoint_path`` is given; a
    diverging step raises :class:`TrainingDiverged` and leaves the last
    checkpoint untouched.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if state is None:
        state = TrainState.fresh(build_network(spec, config.seed, config.dtype))
    if log_file is not None and state.step == 0:
        log_file.write("# epoch step lr loss\n")

    n = len(dataset)
    for epoch in range(state.epoch, config.epochs):
        lr = lr_at(epoch, config)
        order = epoch_permutation(config.seed, epoch, n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            value, grads = loss_and_grads(state.params, dataset.low[idx], dataset.high[idx])
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {state.step}")
            grads = clip_gradients(grads, config.grad_clip, config.clip_mode)
            sgd_step(state, grads, lr, config)
            losses.append(value)
            state.step_losses.append(value)
            if log_file is not None:
                log_file.write(f"{epoch} {state.step} {lr:.6g} {value:.9g}\n")
        state.epoch = epoch + 1
        state.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d lr %.4g mean loss %.6g", epoch, lr, state.epoch_losses[-1])
        if checkpoint_path is not None and (
            (config.checkpoint_every and state.epoch % config.checkpoint_every == 0)
            or state.epoch == config.epochs
        ):
            save_state(checkpoint_path, state, config)
    return state


def read_log(path) -> list[tuple[int, int, float, float]]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        e, s, lr, loss = line.split()
        records.append((int(e), int(s), float(lr), float(loss)))
    return records
