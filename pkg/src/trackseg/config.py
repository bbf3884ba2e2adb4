"""Flat key=value run configuration.

One `key = value` per line, `#` starts a comment, blank lines are ignored.
Every key has a documented default below; unknown or duplicate keys are
rejected by name.  `format_resolved` renders the fully resolved
configuration (defaults merged with the file) in a form that parses back
bit-identically, and every command echoes that text into its output
directory as ``resolved.cfg``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

from . import anchors as anch
from . import losses
from .backbone import BackboneConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Malformed config text or invalid key/value."""


# ---------------------------------------------------------------------------
# key registry

@dataclass(frozen=True)
class Key:
    name: str
    kind: str                 # int | float | bool | str | ints | floats
    default: object
    doc: str
    choices: tuple = ()       # str kind only
    lo: float = -math.inf     # numeric kinds: inclusive bounds
    hi: float = math.inf


KEYS = (
    # run
    Key("seed", "int", 0, "master RNG seed; --seed overrides", lo=0),
    # model
    Key("variant", "str", "3b", "network variant", choices=("2b", "3b")),
    Key("bb_channels", "ints", (8, 16, 24, 32),
        "backbone channels after each of the four stages"),
    Key("bb_adjust", "int", 48, "adjust-layer output channels", lo=1),
    Key("head_hidden", "int", 64, "hidden channels in score/box heads", lo=1),
    Key("mask_hidden", "int", 96, "hidden channels in the mask head", lo=1),
    Key("refine_mid", "int", 16, "refinement decoder channels", lo=1),
    Key("skip_proj", "ints", (16, 12, 8),
        "projected skip channels at strides 8, 4, 2"),
    # anchors / labeling
    Key("anchor_ratios", "floats", (1 / 3, 1 / 2, 1.0, 2.0, 3.0),
        "anchor aspect ratios; their count is k", lo=1e-6),
    Key("anchor_side", "float", 64.0,
        "anchor reference side in search-patch pixels", lo=1.0),
    Key("pos_iou_thresh", "float", 0.6,
        "anchor IoU threshold for a positive label (3b)", lo=0.0, hi=1.0),
    Key("label_radius", "float", 2.0,
        "positive-label radius in response cells (2b)", lo=0.0),
    # losses
    Key("loss_lambda1", "float", 32.0, "mask loss weight", lo=0.0),
    Key("loss_lambda2", "float", 1.0,
        "score (3b) / similarity (2b) loss weight", lo=0.0),
    Key("loss_lambda3", "float", 1.0, "box loss weight (3b)", lo=0.0),
    Key("mask_loss_mode", "str", "normalized",
        "mask loss normalization", choices=("normalized", "strict")),
    # optimizer (linear warmup then logarithmic decay)
    Key("epochs", "int", 20, "total training epochs", lo=1),
    Key("warmup_epochs", "int", 5, "linear-warmup epochs", lo=0),
    Key("steps_per_epoch", "int", 100, "SGD steps per epoch", lo=1),
    Key("lr_start", "float", 1e-3, "learning rate at step 0", lo=0.0),
    Key("lr_peak", "float", 5e-3, "learning rate at the end of warmup",
        lo=0.0),
    Key("lr_end", "float", 5e-4, "learning rate at the final step", lo=0.0),
    Key("momentum", "float", 0.9, "SGD momentum", lo=0.0, hi=1.0),
    Key("clip_norm", "float", 10.0,
        "global gradient-norm clip applied each step (0 disables)", lo=0.0),
    Key("batch_size", "int", 2,
        "training pairs averaged into each SGD step", lo=1),
    # training data
    Key("train_pairs", "int", 50,
        "training pairs drawn from the dataset (cycled per step)", lo=1),
    Key("jitter", "bool", True,
        "random translation/scale jitter when sampling pairs"),
    # synthesis
    Key("num_sequences", "int", 10, "sequences to generate", lo=1),
    Key("seq_length", "int", 40, "frames per generated sequence", lo=2),
    Key("frame_size", "int", 448, "generated frame height and width", lo=64),
    Key("distractors", "int", 1,
        "maximum distractor objects per sequence", lo=0),
    # tracking
    Key("cosine_window", "float", 0.0,
        "score-penalty window weight (0 disables)", lo=0.0, hi=1.0),
    Key("overlay", "bool", False,
        "write per-frame overlay images while tracking"),
    # evaluation
    Key("reset_skip", "int", 5,
        "frames skipped after a tracking failure before re-init", lo=0),
    Key("f_tolerance_px", "int", 0,
        "boundary F-measure tolerance radius; 0 selects "
        "ceil(0.0075 * image diagonal)", lo=0),
    Key("eao_lengths", "ints", (10, 25, 50, 100),
        "sequence-length grid for the simplified EAO"),
)

_BY_NAME = {k.name: k for k in KEYS}


# ---------------------------------------------------------------------------
# value parsing / formatting

def _parse_scalar_float(text: str, key: str) -> float:
    s = text.strip()
    try:
        if "/" in s:
            num, den = s.split("/", 1)
            v = float(num) / float(den)
        else:
            v = float(s)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"key '{key}': bad float {s!r}") from e
    if not math.isfinite(v):
        raise ConfigError(f"key '{key}': non-finite value {s!r}")
    return v


def _parse_value(key: Key, text: str):
    s = text.strip()
    if key.kind == "str":
        if key.choices and s not in key.choices:
            raise ConfigError(f"key '{key.name}': {s!r} is not one of "
                              f"{'/'.join(key.choices)}")
        return s
    if key.kind == "bool":
        if s not in ("true", "false"):
            raise ConfigError(f"key '{key.name}': expected true or false, "
                              f"got {s!r}")
        return s == "true"
    if key.kind == "int":
        try:
            v = int(s)
        except ValueError as e:
            raise ConfigError(f"key '{key.name}': bad integer {s!r}") from e
        _check_range(key, v)
        return v
    if key.kind == "float":
        v = _parse_scalar_float(s, key.name)
        _check_range(key, v)
        return v
    if key.kind in ("ints", "floats"):
        parts = [p for p in s.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"key '{key.name}': empty list")
        if key.kind == "ints":
            try:
                vals = tuple(int(p.strip()) for p in parts)
            except ValueError as e:
                raise ConfigError(f"key '{key.name}': bad integer list "
                                  f"{s!r}") from e
        else:
            vals = tuple(_parse_scalar_float(p, key.name) for p in parts)
        for v in vals:
            _check_range(key, v)
        return vals
    raise AssertionError(key.kind)


def _check_range(key: Key, v) -> None:
    if not (key.lo <= v <= key.hi):
        raise ConfigError(f"key '{key.name}': value {v} outside "
                          f"[{key.lo}, {key.hi}]")


def _format_value(key: Key, v) -> str:
    if key.kind == "bool":
        return "true" if v else "false"
    if key.kind in ("ints", "floats"):
        return ",".join(repr(x) if key.kind == "floats" else str(x)
                        for x in v)
    if key.kind == "float":
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# file handling

def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse config text into a {name: typed value} dict (no defaults)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, "
                              f"got {raw.strip()!r}")
        name, _, value = line.partition("=")
        name = name.strip()
        key = _BY_NAME.get(name)
        if key is None:
            raise ConfigError(f"{source}:{lineno}: unknown config key "
                              f"'{name}'")
        if name in out:
            raise ConfigError(f"{source}:{lineno}: duplicate config key "
                              f"'{name}'")
        out[name] = _parse_value(key, value)
    return out


def resolve(overrides: dict | None = None) -> dict:
    """Defaults merged with overrides, cross-key constraints checked."""
    cfg = {k.name: k.default for k in KEYS}
    for name, value in (overrides or {}).items():
        if name not in _BY_NAME:
            raise ConfigError(f"unknown config key '{name}'")
        cfg[name] = value
    _validate(cfg)
    return cfg


def load(path: str | None, seed: int | None = None) -> dict:
    """Resolved config from an optional file plus an optional seed override."""
    overrides = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path!r}: {e}") from e
        overrides = parse_text(text, source=path)
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"key 'seed': value {seed} outside [0, inf]")
        overrides["seed"] = int(seed)
    return resolve(overrides)


def _validate(cfg: dict) -> None:
    if cfg["warmup_epochs"] > cfg["epochs"]:
        raise ConfigError("key 'warmup_epochs': must not exceed 'epochs'")
    if len(cfg["bb_channels"]) != 4:
        raise ConfigError("key 'bb_channels': exactly four stages required")
    if len(cfg["skip_proj"]) != 3:
        raise ConfigError("key 'skip_proj': exactly three strides required")
    if not (cfg["lr_start"] <= cfg["lr_peak"]):
        raise ConfigError("key 'lr_start': must not exceed 'lr_peak'")
    if not (cfg["lr_end"] <= cfg["lr_peak"]):
        raise ConfigError("key 'lr_end': must not exceed 'lr_peak'")
    if cfg["lr_end"] <= 0 or cfg["lr_peak"] <= 0:
        raise ConfigError("key 'lr_peak': warmup/decay endpoints must be "
                          "positive")


def format_resolved(cfg: dict) -> str:
    lines = ["# resolved configuration"]
    for key in KEYS:
        lines.append(f"{key.name} = {_format_value(key, cfg[key.name])}"
                     f"  # {key.doc}")
    return "\n".join(lines) + "\n"


def echo(cfg: dict, out_dir: str) -> str:
    """Write the resolved config into out_dir; returns the file path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved.cfg")
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_resolved(cfg))
    return path


# ---------------------------------------------------------------------------
# typed views

def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(channels=tuple(cfg["bb_channels"]),
                                adjust_channels=cfg["bb_adjust"]),
        variant=cfg["variant"],
        k=len(cfg["anchor_ratios"]),
        head_hidden=cfg["head_hidden"],
        mask_hidden=cfg["mask_hidden"],
        refine_mid=cfg["refine_mid"],
        skip_proj=tuple(cfg["skip_proj"]),
    )


def anchor_config(cfg: dict) -> anch.AnchorConfig:
    return anch.AnchorConfig(side=cfg["anchor_side"],
                             ratios=tuple(cfg["anchor_ratios"]))


def loss_weights(cfg: dict) -> losses.LossWeights:
    return losses.LossWeights(l1=cfg["loss_lambda1"],
                              l2=cfg["loss_lambda2"],
                              l3=cfg["loss_lambda3"])
