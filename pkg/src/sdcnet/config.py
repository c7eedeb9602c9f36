"""Flat ``key = value`` run configuration with sections.

Every key has a default; unknown sections or keys are errors.  The
effective configuration can be rendered back to the same format, which is
what the CLI echoes for provenance.
"""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path

from .data import AifParams, Compartment, NOISE_PRESETS, PhantomSpec
from .model import NetworkSpec
from .perfusion import DeconvolutionConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


_train_defaults = TrainConfig()
_deconv_defaults = DeconvolutionConfig()
_phantom_defaults = PhantomSpec()
_aif_defaults = AifParams()
_comp = {c.name: c for c in _phantom_defaults.compartments}

SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "phantom": {
        "size": (int, _phantom_defaults.size),
        "frames": (int, _phantom_defaults.frames),
        "dt": (float, _phantom_defaults.dt),
        "seed": (int, _phantom_defaults.seed),
        "vessels": (int, _phantom_defaults.vessels),
        "aif_t0": (float, _aif_defaults.t0),
        "aif_alpha": (float, _aif_defaults.alpha),
        "aif_beta": (float, _aif_defaults.beta),
        "aif_peak": (float, _aif_defaults.peak),
        **{f"{short}_{attr}": (float, getattr(_comp[name], attr))
           for short, name in (("wm", "white_matter"), ("gm", "gray_matter"), ("vessel", "vessel"))
           for attr in ("cbf", "cbv", "intensity")},
    },
    "noise": {
        "preset": (str, "dose20"),
        "seed": (int, 1),
    },
    "dataset": {
        "count": (int, 5000),
        "patch": (int, 40),
        "stride": (int, 11),
        "crop": (int, 180),
        "seed": (int, 2),
        "replace": (_bool, False),
    },
    "network": {
        "width_divisor": (int, 1),
        "slope": (float, 0.01),
        "end_activation": (str, "linear"),
    },
    "train": {f.name: (type(getattr(_train_defaults, f.name)), getattr(_train_defaults, f.name))
              for f in fields(TrainConfig)},
    "perfusion": {
        "svd_threshold": (float, _deconv_defaults.svd_threshold),
        "padding_factor": (int, _deconv_defaults.padding_factor),
        "cbf_calibration": (float, _deconv_defaults.cbf_calibration),
        "cbv_calibration": (float, _deconv_defaults.cbv_calibration),
        "baseline_frames": (_optional_int, None),
    },
    "metrics": {
        "max_value": (float, 1.0),
    },
}


class RunConfig:
    """Parsed configuration; ``values[section][key]`` holds typed values."""

    def __init__(self, values: dict[str, dict[str, object]] | None = None):
        self.values = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
        for section, items in (values or {}).items():
            for key, value in items.items():
                self.set(section, key, value)

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
        kind = SCHEMA[section][key][0]
        if isinstance(value, str) and kind is not str:
            try:
                value = kind(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {exc}") from None
        self.values[section][key] = value

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            for key, value in items.items():
                shown = "auto" if value is None else str(value).lower() if isinstance(value, bool) else value
                lines.append(f"{key} = {shown}")
            lines.append("")
        return "\n".join(lines)

    # -- typed views -----------------------------------------------------

    def phantom_spec(self) -> PhantomSpec:
        p = self["phantom"]
        comps = tuple(
            Compartment(name, p[f"{short}_cbf"], p[f"{short}_cbv"], p[f"{short}_intensity"])
            for short, name in (("wm", "white_matter"), ("gm", "gray_matter"), ("vessel", "vessel"))
        )
        aif = AifParams(p["aif_t0"], p["aif_alpha"], p["aif_beta"], p["aif_peak"])
        return PhantomSpec(size=p["size"], frames=p["frames"], dt=p["dt"], compartments=comps,
                           aif=aif, seed=p["seed"], vessels=p["vessels"])

    def noise_levels(self) -> tuple[float, float]:
        preset = self["noise"]["preset"]
        if preset not in NOISE_PRESETS:
            raise ConfigError(f"unknown noise preset {preset!r}; available: {', '.join(NOISE_PRESETS)}")
        return NOISE_PRESETS[preset]

    def network_spec(self) -> NetworkSpec:
        n = self["network"]
        return NetworkSpec.reduced(n["width_divisor"], slope=n["slope"], end_activation=n["end_activation"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self["train"])

    def deconvolution_config(self) -> DeconvolutionConfig:
        p = self["perfusion"]
        return DeconvolutionConfig(p["svd_threshold"], p["padding_factor"], p["cbf_calibration"],
                                   p["cbv_calibration"], p["baseline_frames"])
