"""Flat ``key=value`` run configuration.

Every key has a default; model and optimizer defaults are the full-scale
settings (embed_dim 256, window 4, depths 8,8,8,8, lr 1e-5, wd 1e-4).
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

from .cfm import CfmConfig
from .data import SynthSpec
from .model import ModelConfig
from .tfm import TfmConfig


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    items = [t for t in str(text).replace(" ", "").split(",") if t]
    if not items:
        raise ValueError("empty list")
    return tuple(int(t) for t in items)


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        t = str(text).strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {t!r}")
        return t

    return parse


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "cfm.channel_schedule": (_int_list, (64, 64, 128, 128, 256, 256, 256, 512, 512, 512)),
    "cfm.pool_positions": (_int_list, (2, 4, 7)),
    "cfm.channel_scale": (Fraction, Fraction(1)),
    "tfm.embed_dim": (int, 256),
    "tfm.window_size": (int, 4),
    "tfm.depths": (_int_list, (8, 8, 8, 8)),
    "tfm.num_heads": (_int_list, (8, 8, 8, 8)),
    "tfm.mlp_ratio": (float, 2.0),
    "tfm.patch_size": (int, 1),
    "tfm.interaction_conv_kernel": (int, 1),
    "tfm.use_relative_position_bias": (_bool, True),
    "crm.count_reduction": (_choice("sum", "mean"), "sum"),
    "model.seed": (int, 0),
    "train.epochs": (int, 2000),
    "train.batch_size": (int, 8),
    "train.lr": (float, 1e-5),
    "train.weight_decay": (float, 1e-4),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.seed": (int, 0),
    "train.crop_m": (int, 256),
    "train.crop_n": (int, 256),
    "train.crop": (_bool, True),
    "train.area_scaled_crops": (_bool, False),
    "train.patience": (int, 0),
    "train.dtype": (_choice("float64", "float32"), "float64"),
    "data.source": (_choice("synth", "dir"), "synth"),
    "data.dir": (str, ""),
    "data.labels": (str, ""),
    "data.n_images": (int, 200),
    "data.height": (int, 256),
    "data.width": (int, 256),
    "data.count_lo": (int, 0),
    "data.count_hi": (int, 20),
    "data.radius_lo": (float, 2.0),
    "data.radius_hi": (float, 4.0),
    "data.noise": (float, 8.0),
    "data.seed": (int, 0),
    "data.train_fraction": (float, 0.8),
    "data.split_seed": (int, 0),
    "data.folds": (int, 5),
}

# Desk-scale model used by the gradient suite and the toy config file.
TOY_OVERRIDES = {
    "cfm.channel_scale": "1/8",
    "tfm.embed_dim": "32",
    "tfm.depths": "2,2",
    "tfm.num_heads": "2,2",
    "tfm.window_size": "4",
    "data.height": "64",
    "data.width": "64",
    "train.crop_m": "64",
    "train.crop_n": "64",
}


class RunConfig:
    """Typed view over the flat key space; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(value) if isinstance(value, str) else parser(_fmt(value))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def copy(self) -> "RunConfig":
        return RunConfig({k: _fmt(v) for k, v in self.values.items()})

    def update(self, overrides: dict) -> "RunConfig":
        for k, v in overrides.items():
            self.set(k, v)
        return self

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def toy(cls) -> "RunConfig":
        return cls(TOY_OVERRIDES)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.values.items())

    def model_config(self) -> ModelConfig:
        v = self.values
        try:
            cfm = CfmConfig(v["cfm.channel_schedule"], v["cfm.pool_positions"], v["cfm.channel_scale"])
            tfm = TfmConfig(
                embed_dim=v["tfm.embed_dim"],
                window_size=v["tfm.window_size"],
                depths=v["tfm.depths"],
                num_heads=v["tfm.num_heads"],
                mlp_ratio=v["tfm.mlp_ratio"],
                patch_size=v["tfm.patch_size"],
                interaction_conv_kernel=v["tfm.interaction_conv_kernel"],
                use_relative_position_bias=v["tfm.use_relative_position_bias"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return ModelConfig(cfm, tfm, v["crm.count_reduction"])

    def synth_spec(self) -> SynthSpec:
        v = self.values
        return SynthSpec(
            height=v["data.height"],
            width=v["data.width"],
            count_lo=v["data.count_lo"],
            count_hi=v["data.count_hi"],
            radius_lo=v["data.radius_lo"],
            radius_hi=v["data.radius_hi"],
            noise=v["data.noise"],
            seed=v["data.seed"],
        )

    def model_keys_equal(self, other: "RunConfig") -> bool:
        return all(self.values[k] == other.values[k] for k in SCHEMA if k.split(".")[0] in ("cfm", "tfm", "crm"))
