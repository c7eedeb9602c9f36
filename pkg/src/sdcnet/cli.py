"""``sdcnet`` command line: the whole pipeline as subcommands.

Exit codes: 0 success, 2 usage or input error, 3 missing or incompatible
checkpoint, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    NOISE_PRESETS,
    build_dataset,
    corrupt_series,
    generate_phantom_series,
    load_dataset,
    save_dataset,
)
from .formats import (
    FormatError,
    load_maps,
    load_series,
    maps_to_csv,
    save_maps,
    save_series,
    write_pgm,
)
from .gradsuite import run_suite
from .metrics import evaluate
from .model import NetworkSpec, denoise_frames
from .perfusion import Aif, masked_rmse, quantify_series
from .trainer import TrainingDiverged, load_state, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"sdcnet: error: {msg}", file=sys.stderr)


def _load_series(path):
    try:
        return load_series(path)
    except OSError as exc:
        raise UsageError(f"cannot read series {path}: {exc.strerror or exc}") from None


def _require_out(args, what: str) -> Path:
    if not args.out:
        raise UsageError(f"--out is required to write the {what}")
    return Path(args.out)


def _write(path: Path, writer, *payload) -> None:
    try:
        writer(path, *payload)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from None


def _require_file(checkpoint) -> None:
    if not Path(checkpoint).is_file():
        raise CheckpointError(f"checkpoint {checkpoint} does not exist")


# -- subcommands ---------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig) -> int:
    out = _require_out(args, "phantom series")
    series, truth = generate_phantom_series(cfg.phantom_spec())
    truth_path = Path(args.truth) if args.truth else out.with_suffix(".maps")
    _write(out, save_series, series)
    _write(truth_path, save_maps, truth)
    if args.pgm:
        _write(Path(args.pgm), write_pgm, series.frames[int(np.argmax(series.aif))])
    print(f"series {out} ({len(series)} frames, {series.frames.shape[1]}x{series.frames.shape[2]}); truth {truth_path}")
    return EXIT_OK


def cmd_corrupt(args, cfg: RunConfig) -> int:
    out = _require_out(args, "noisy series")
    sigma_g, sigma_m = cfg.noise_levels()
    noisy = corrupt_series(_load_series(args.series), sigma_g, sigma_m, cfg["noise"]["seed"])
    _write(out, save_series, noisy)
    print(f"noisy series {out} (preset {cfg['noise']['preset']})")
    return EXIT_OK


def cmd_dataset(args, cfg: RunConfig) -> int:
    out = _require_out(args, "dataset")
    if not args.pair:
        raise UsageError("at least one --pair CLEAN NOISY is required")
    pairs = [(_load_series(c), _load_series(n)) for c, n in args.pair]
    d = cfg["dataset"]
    ds = build_dataset(pairs, d["count"], d["seed"], d["patch"], d["stride"], d["crop"], d["replace"])
    _write(out, save_dataset, ds)
    print(f"dataset {out} ({len(ds)} patches of {ds.patch}x{ds.patch})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _require_out(args, "checkpoint")
    try:
        ds = load_dataset(args.dataset)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {args.dataset}: {exc.strerror or exc}") from None
    spec = cfg.network_spec()
    config = cfg.train_config()
    state = None
    if args.resume:
        _require_file(args.resume)
        state, _ = load_state(args.resume, spec)
    log_cm = open(args.log, "a" if args.resume else "w") if args.log else contextlib.nullcontext()
    with log_cm as log_file:
        state = train(ds, spec, config, state, checkpoint_path=out, log_file=log_file)
    losses = state.epoch_losses
    trend = f"mean epoch loss {losses[0]:.6g}" if losses else "no epochs run"
    if len(losses) > 1:
        trend += f" -> {losses[-1]:.6g}"
    print(f"checkpoint {out}: epoch {state.epoch}, step {state.step}, {trend}")
    return EXIT_OK


def cmd_denoise(args, cfg: RunConfig) -> int:
    out = _require_out(args, "restored series")
    _require_file(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint, cfg.network_spec())
    series = _load_series(args.series)
    frames = denoise_frames(series.frames, ckpt.params).astype(np.float64)
    if not np.all(np.isfinite(frames)):
        raise FloatingPointError("denoised frames contain non-finite values")
    restored = series.with_frames(frames)
    _write(out, save_series, restored)
    if args.pgm:
        _write(Path(args.pgm), write_pgm, np.clip(frames[len(frames) // 2], 0.0, 1.0))
    print(f"restored series {out}")
    return EXIT_OK


def cmd_perfuse(args, cfg: RunConfig) -> int:
    series = _load_series(args.series)
    if series.aif is None:
        raise UsageError(f"series {args.series} carries no arterial input function")
    maps = quantify_series(series, Aif(series.aif, series.dt), cfg.deconvolution_config())
    if args.out:
        _write(Path(args.out), save_maps, maps)
    if args.csv:
        _write(Path(args.csv), lambda p, m: Path(p).write_text(maps_to_csv(m)), maps)
    if args.pgm:
        prefix = args.pgm
        _write(Path(f"{prefix}_cbf.pgm"), write_pgm, maps.cbf, 0.0, max(1e-12, float(maps.cbf.max())))
        _write(Path(f"{prefix}_cbv.pgm"), write_pgm, maps.cbv, 0.0, max(1e-12, float(maps.cbv.max())))
    if args.truth:
        try:
            truth = load_maps(args.truth)
        except OSError as exc:
            raise UsageError(f"cannot read truth maps {args.truth}: {exc.strerror or exc}") from None
        region = truth.mask & maps.mask
        print(f"rmse cbf={masked_rmse(maps.cbf, truth.cbf, region):.6g} "
              f"cbv={masked_rmse(maps.cbv, truth.cbv, region):.6g}")
        for value in np.unique(truth.cbf[region]):
            sel = region & (truth.cbf == value)
            cbv_true = float(truth.cbv[sel].mean())
            print(f"compartment cbf_true={value:g} cbf={maps.cbf[sel].mean():.6g} "
                  f"cbv_true={cbv_true:g} cbv={maps.cbv[sel].mean():.6g}")
    else:
        inside = maps.mask
        print(f"mean cbf={maps.cbf[inside].mean():.6g} cbv={maps.cbv[inside].mean():.6g}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    restored = _load_series(args.restored)
    reference = _load_series(args.reference)
    if restored.frames.shape != reference.frames.shape:
        raise UsageError(f"series shapes differ: {restored.frames.shape} vs {reference.frames.shape}")
    report = evaluate(zip(restored.frames, reference.frames), cfg["metrics"]["max_value"])
    print("count,psnr,ssim")
    print(report.csv_line())
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    n = cfg["network"]
    spec = NetworkSpec.reduced(args.width_divisor, slope=n["slope"], end_activation=n["end_activation"])
    entries = run_suite(spec, args.seed or 0, report=print)
    failed = [e.name for e in entries if not e.passed]
    if failed:
        _err(f"gradient check failed for {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

SEED_TARGET = {
    "phantom": ("phantom", "seed"),
    "corrupt": ("noise", "seed"),
    "dataset": ("dataset", "seed"),
    "train": ("train", "seed"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file with [sections]")
    common.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=[],
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for the subcommand's random stream")
    common.add_argument("--out", metavar="PATH", help="output file")
    common.add_argument("--threads", type=int, default=1, help="BLAS worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sdcnet", description="Low-dose CT perfusion denoising pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a noise-free perfusion phantom series")
    p.add_argument("--frames", type=int, help="number of time frames")
    p.add_argument("--size", type=int, help="frame side length in pixels")
    p.add_argument("--truth", metavar="PATH", help="ground-truth maps path (default: OUT with .maps suffix)")
    p.add_argument("--pgm", metavar="PATH", help="also export the peak-enhancement frame as PGM")

    p = sub.add_parser("corrupt", parents=[common], help="add simulated low-dose noise to a series")
    p.add_argument("series")
    p.add_argument("--preset", help=f"noise preset ({', '.join(NOISE_PRESETS)})")

    p = sub.add_parser("dataset", parents=[common], help="sample aligned clean/noisy patches")
    p.add_argument("--pair", nargs=2, action="append", metavar=("CLEAN", "NOISY"), default=[])
    p.add_argument("--count", type=int, help="number of patches")

    p = sub.add_parser("train", parents=[common], help="train the denoiser on a patch dataset")
    p.add_argument("dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", metavar="CKPT", help="continue from a training checkpoint")
    p.add_argument("--log", metavar="PATH", help="per-step training log")

    p = sub.add_parser("denoise", parents=[common], help="restore a noisy series with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("series")
    p.add_argument("--pgm", metavar="PATH", help="also export the middle restored frame as PGM")

    p = sub.add_parser("perfuse", parents=[common], help="compute CBF/CBV maps from a series")
    p.add_argument("series")
    p.add_argument("--truth", metavar="MAPS", help="report errors against ground-truth maps")
    p.add_argument("--csv", metavar="PATH", help="export maps as CSV")
    p.add_argument("--pgm", metavar="PREFIX", help="export PREFIX_cbf.pgm and PREFIX_cbv.pgm")
    p.add_argument("--lambda", dest="svd_threshold", type=float, help="relative SVD truncation threshold")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a restored series against a reference")
    p.add_argument("restored")
    p.add_argument("reference")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--width-divisor", type=int, default=8, help="channel divisor for the network check")
    return parser


def effective_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(section.strip(), name.strip(), value.strip())
    if args.seed is not None and args.command in SEED_TARGET:
        cfg.set(*SEED_TARGET[args.command], args.seed)
    for attr, section, key in (("frames", "phantom", "frames"), ("size", "phantom", "size"),
                               ("preset", "noise", "preset"), ("count", "dataset", "count"),
                               ("epochs", "train", "epochs"), ("svd_threshold", "perfusion", "svd_threshold")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(section, key, value)
    return cfg


COMMANDS = {
    "phantom": cmd_phantom,
    "corrupt": cmd_corrupt,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "perfuse": cmd_perfuse,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        cfg = effective_config(args)
        if args.command == "corrupt":
            cfg.noise_levels()
        cfg.network_spec()
        print(f"# sdcnet {args.command}", file=sys.stderr)
        print(cfg.to_text(), file=sys.stderr, end="")
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, FormatError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except CheckpointError as exc:
        _err(str(exc))
        return EXIT_CHECKPOINT
    except (TrainingDiverged, FloatingPointError) as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
