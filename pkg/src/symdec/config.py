"""Run configuration: strict schema, two shipped presets.

`desk-toy` is the default everywhere: small geometry that trains on a CPU in
minutes.  `paper-geometry` switches to the full-scale constants (417px input,
16px patches giving a 26x26 grid, decoder width 64, three mixing layers,
eight rotation slots, 25 prompts of 4 classes, 1e-5 learning rate with
exponential decay); it shares every code path and is not expected to be
trained to convergence on a desk machine.

Configs are nested key/value YAML.  Unknown sections or keys are rejected,
and cross-field constraints are checked before any command does work.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Rejected configuration: unknown key, bad type, or broken invariant."""


DESK_TOY: dict = {
    "task": "reflection",
    "seed": 0,
    "image": {"size": 128, "patch_size": 8},
    "encoder": {"kind": "transformer", "dim": 32, "depth": 2, "heads": 4},
    "decoder": {"dim": 16, "depth": 2, "heads": 4, "rotations": 8, "channels": [16, 8, 4, 1]},
    "prompts": {
        "count": 8,
        "classes_per_prompt": 4,
        "policy": "sequential",
        "seed": 0,
        "text_dim": 64,
        "vocabulary": None,
    },
    "focal": {"alpha": None, "lam": 2.0, "eps": 1.0e-7},
    "optimizer": {
        "lr": 3.0e-3,
        "schedule": "constant",
        "decay": 0.1,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1.0e-8,
    },
    "augment": {
        "quarter_turns": True,
        "small_rotation": 0.0,
        "brightness": 0.05,
        "contrast": [0.95, 1.05],
    },
    "train": {"epochs": 30, "batch_size": 8, "checkpoint_every": 10},
    "synth": {
        "min_shapes": 1,
        "max_shapes": 2,
        "families": ["ellipse", "rectangle", "polygon", "star"],
        "noise": 0.02,
        "stroke_width": 3.0,
        "sigma": 3.0,
    },
    "eval": {
        "tau_step": 0.01,
        "tolerance_radius": 0.0,
        "rotation_range": 45.0,
        "consistency_samples": 4,
    },
    "threads": 0,
}

PAPER_GEOMETRY: dict = {
    "task": "reflection",
    "seed": 0,
    "image": {"size": 417, "patch_size": 16},
    "encoder": {"kind": "transformer", "dim": 64, "depth": 2, "heads": 4},
    "decoder": {"dim": 64, "depth": 3, "heads": 4, "rotations": 8, "channels": [64, 32, 16, 1]},
    "prompts": {
        "count": 25,
        "classes_per_prompt": 4,
        "policy": "sequential",
        "seed": 0,
        "text_dim": 64,
        "vocabulary": None,
    },
    "focal": {"alpha": None, "lam": 2.0, "eps": 1.0e-7},
    "optimizer": {
        "lr": 1.0e-5,
        "schedule": "exponential",
        "decay": 0.1,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1.0e-8,
    },
    "augment": {
        "quarter_turns": True,
        "small_rotation": 15.0,
        "brightness": 0.1,
        "contrast": [0.9, 1.1],
    },
    "train": {"epochs": 500, "batch_size": 16, "checkpoint_every": 25},
    "synth": {
        "min_shapes": 1,
        "max_shapes": 3,
        "families": ["ellipse", "rectangle", "polygon", "star"],
        "noise": 0.02,
        "stroke_width": 3.0,
        "sigma": 3.0,
    },
    "eval": {
        "tau_step": 0.01,
        "tolerance_radius": 0.0,
        "rotation_range": 45.0,
        "consistency_samples": 4,
    },
    "threads": 0,
}

PRESETS = {"desk-toy": DESK_TOY, "paper-geometry": PAPER_GEOMETRY}


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[key] = _merge_strict(base[key], value, where)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated flat view of one run's settings."""

    raw: dict = field(repr=False)
    task: str = "reflection"
    seed: int = 0
    image_size: int = 128
    patch_size: int = 8
    encoder_kind: str = "transformer"
    enc_dim: int = 32
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 16
    dec_depth: int = 2
    dec_heads: int = 4
    rotations: int = 8
    channels: tuple = (16, 8, 4, 1)
    num_prompts: int = 8
    classes_per_prompt: int = 4
    prompt_policy: str = "sequential"
    prompt_seed: int = 0
    text_dim: int = 64
    vocabulary: str | None = None
    alpha: float | None = None
    lam: float = 2.0
    clamp_eps: float = 1.0e-7
    lr: float = 3.0e-3
    schedule: str = "constant"
    decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1.0e-8
    aug_quarter: bool = True
    aug_small_rotation: float = 0.0
    aug_brightness: float = 0.05
    aug_contrast: tuple = (0.95, 1.05)
    epochs: int = 30
    batch_size: int = 8
    checkpoint_every: int = 10
    min_shapes: int = 1
    max_shapes: int = 2
    families: tuple = ("ellipse", "rectangle", "polygon", "star")
    noise: float = 0.02
    stroke_width: float = 3.0
    sigma: float = 3.0
    tau_step: float = 0.01
    tolerance_radius: float = 0.0
    rotation_range: float = 45.0
    consistency_samples: int = 4
    threads: int = 0

    @property
    def focal_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 0.85 if self.task == "reflection" else 0.95

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def tau_grid(self):
        import numpy as np

        return np.round(np.arange(self.tau_step, 1.0, self.tau_step), 10)


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(raw: dict) -> RunConfig:
    """Check every invariant and return the flat view; raises ConfigError."""
    cfg = RunConfig(
        raw=raw,
        task=raw["task"],
        seed=int(raw["seed"]),
        image_size=int(raw["image"]["size"]),
        patch_size=int(raw["image"]["patch_size"]),
        encoder_kind=raw["encoder"]["kind"],
        enc_dim=int(raw["encoder"]["dim"]),
        enc_depth=int(raw["encoder"]["depth"]),
        enc_heads=int(raw["encoder"]["heads"]),
        dec_dim=int(raw["decoder"]["dim"]),
        dec_depth=int(raw["decoder"]["depth"]),
        dec_heads=int(raw["decoder"]["heads"]),
        rotations=int(raw["decoder"]["rotations"]),
        channels=tuple(int(c) for c in raw["decoder"]["channels"]),
        num_prompts=int(raw["prompts"]["count"]),
        classes_per_prompt=int(raw["prompts"]["classes_per_prompt"]),
        prompt_policy=raw["prompts"]["policy"],
        prompt_seed=int(raw["prompts"]["seed"]),
        text_dim=int(raw["prompts"]["text_dim"]),
        vocabulary=raw["prompts"]["vocabulary"],
        alpha=None if raw["focal"]["alpha"] is None else float(raw["focal"]["alpha"]),
        lam=float(raw["focal"]["lam"]),
        clamp_eps=float(raw["focal"]["eps"]),
        lr=float(raw["optimizer"]["lr"]),
        schedule=raw["optimizer"]["schedule"],
        decay=float(raw["optimizer"]["decay"]),
        beta1=float(raw["optimizer"]["beta1"]),
        beta2=float(raw["optimizer"]["beta2"]),
        adam_eps=float(raw["optimizer"]["eps"]),
        aug_quarter=bool(raw["augment"]["quarter_turns"]),
        aug_small_rotation=float(raw["augment"]["small_rotation"]),
        aug_brightness=float(raw["augment"]["brightness"]),
        aug_contrast=tuple(float(c) for c in raw["augment"]["contrast"]),
        epochs=int(raw["train"]["epochs"]),
        batch_size=int(raw["train"]["batch_size"]),
        checkpoint_every=int(raw["train"]["checkpoint_every"]),
        min_shapes=int(raw["synth"]["min_shapes"]),
        max_shapes=int(raw["synth"]["max_shapes"]),
        families=tuple(raw["synth"]["families"]),
        noise=float(raw["synth"]["noise"]),
        stroke_width=float(raw["synth"]["stroke_width"]),
        sigma=float(raw["synth"]["sigma"]),
        tau_step=float(raw["eval"]["tau_step"]),
        tolerance_radius=float(raw["eval"]["tolerance_radius"]),
        rotation_range=float(raw["eval"]["rotation_range"]),
        consistency_samples=int(raw["eval"]["consistency_samples"]),
        threads=int(raw["threads"]),
    )
    _expect(cfg.task in ("reflection", "rotation"), f"task must be reflection or rotation, got {cfg.task!r}")
    _expect(cfg.encoder_kind in ("transformer", "patch-mean"), f"unknown encoder kind {cfg.encoder_kind!r}")
    _expect(cfg.image_size >= cfg.patch_size >= 1, "image size must cover at least one patch")
    _expect(cfg.grid_size >= 2, "patch grid must be at least 2x2")
    _expect(cfg.enc_dim % cfg.enc_heads == 0, "encoder dim must divide evenly into heads")
    _expect(cfg.dec_dim % cfg.dec_heads == 0, "decoder dim must divide evenly into heads")
    _expect(cfg.enc_depth >= 1 and cfg.dec_depth >= 1, "depths must be at least 1")
    _expect(len(cfg.channels) >= 2, "channel pipeline needs at least input and output entries")
    _expect(cfg.channels[0] == cfg.dec_dim, f"channel pipeline must start at decoder dim {cfg.dec_dim}")
    _expect(cfg.channels[-1] == 1, "channel pipeline must end at one score channel")
    _expect(
        cfg.rotations == 6 or (cfg.rotations >= 4 and cfg.rotations % 4 == 0),
        f"rotation slots must be a positive multiple of 4 (or 6), got {cfg.rotations}",
    )
    _expect(cfg.num_prompts >= 1 and cfg.classes_per_prompt >= 1, "need at least one prompt and class")
    _expect(cfg.prompt_policy in ("sequential", "shuffled"), f"unknown prompt policy {cfg.prompt_policy!r}")
    _expect(cfg.text_dim >= 1, "text dimension must be positive")
    _expect(cfg.alpha is None or 0.0 < cfg.alpha < 1.0, "alpha must lie in (0, 1)")
    _expect(cfg.lam >= 0.0, "focusing exponent must be >= 0")
    _expect(0.0 < cfg.clamp_eps <= 1e-3, "probability clamp must lie in (0, 1e-3]")
    _expect(cfg.lr > 0.0, "learning rate must be positive")
    _expect(cfg.schedule in ("constant", "exponential"), f"unknown schedule {cfg.schedule!r}")
    _expect(0.0 < cfg.decay <= 1.0, "decay factor must lie in (0, 1]")
    _expect(0.0 <= cfg.aug_small_rotation <= 15.0, "small-rotation range must stay within [0, 15] degrees")
    _expect(len(cfg.aug_contrast) == 2 and 0 < cfg.aug_contrast[0] <= cfg.aug_contrast[1], "bad contrast range")
    _expect(cfg.epochs >= 1 and cfg.batch_size >= 1, "epochs and batch size must be positive")
    _expect(1 <= cfg.min_shapes <= cfg.max_shapes, "need 1 <= min_shapes <= max_shapes")
    _expect(0.0 < cfg.tau_step < 1.0, "tau step must lie in (0, 1)")
    _expect(cfg.tolerance_radius >= 0.0, "tolerance radius must be >= 0")
    _expect(cfg.consistency_samples >= 1, "consistency needs at least one transform per image")
    _expect(cfg.threads >= 0, "threads must be >= 0")
    return cfg


def load(preset: str = "desk-toy", config_path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve preset -> file -> overrides, strictly, then validate."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
    raw = copy.deepcopy(PRESETS[preset])
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from err
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _merge_strict(raw, loaded)
    if overrides:
        raw = _merge_strict(raw, overrides)
    return validate(raw)
