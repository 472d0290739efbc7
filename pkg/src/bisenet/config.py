"""Flat ``key = value`` run configuration with ``#`` comments.

Every key has a default; unknown keys and malformed values raise
:class:`ConfigError` naming the key and line.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError
from .model import ArchConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str = "checkpoint"
    out_dir: str = "out"


# value codecs -------------------------------------------------------------

def _parse_float(s):
    return float(Fraction(s)) if "/" in s else float(s)


def _parse_bool(s):
    low = s.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_hw(s):
    parts = s.lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {s!r}")
    return tuple(int(p) for p in parts)


def _optional(parse):
    return lambda s: None if s.lower() in ("none", "auto", "") else parse(s)


def _list(parse):
    return lambda s: tuple(parse(p.strip()) for p in s.split(",") if p.strip()) \
        if s.lower() != "none" else ()


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if not value:
            return "none"
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _fmt_hw(value):
    return "none" if value is None else f"{value[0]}x{value[1]}"


_ARCH_PARSERS = {
    "lam": _parse_float, "expansion": int, "alpha": _parse_float, "depth": int,
    "detail_channels": _list(int), "agg": str, "boosters": _list(str),
    "num_classes": int, "ct_main": _optional(int), "ct_aux": _optional(int),
    "input_hw": parse_hw, "infer_hw": _optional(parse_hw), "context": _parse_bool,
    "gather_k": int, "double_dw": _parse_bool,
}
_TRAIN_PARSERS = {
    "batch": int, "base_lr": _parse_float, "momentum": _parse_float,
    "weight_decay": _parse_float, "power": _parse_float, "max_iter": int,
    "ohem": _parse_bool, "ohem_threshold": _parse_float, "ohem_min_kept": _optional(int),
    "scales": _list(_parse_float), "crop_hw": parse_hw, "ignore_index": int,
    "aux_weight": _parse_float, "ohem_aux": _parse_bool, "seed": int, "n_samples": int,
    "checkpoint_every": int,
}
_PATH_KEYS = ("checkpoint", "out_dir")
_HW_KEYS = {"input_hw", "infer_hw", "crop_hw"}

KEYS = tuple(_ARCH_PARSERS) + tuple(_TRAIN_PARSERS) + _PATH_KEYS


def parse_config(text, source="<config>"):
    arch, train, paths, where = {}, {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in where:
            raise ConfigError(f"{source}:{lineno}: key {key!r} repeats line {where[key]}")
        where[key] = lineno
        try:
            if key in _ARCH_PARSERS:
                arch[key] = _ARCH_PARSERS[key](value)
            elif key in _TRAIN_PARSERS:
                train[key] = _TRAIN_PARSERS[key](value)
            else:
                paths[key] = value
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        arch_cfg = ArchConfig(**arch)
        train_cfg = TrainConfig(**train)
    except ConfigError as exc:
        bad = next((k for k in where if k in str(exc)), None)
        loc = f"{source}:{where[bad]}: key {bad!r}: " if bad else f"{source}: "
        raise ConfigError(loc + str(exc)) from None
    return RunConfig(arch_cfg, train_cfg, **paths)


def format_config(cfg):
    lines = ["# architecture"]
    for f in fields(ArchConfig):
        v = getattr(cfg.arch, f.name)
        lines.append(f"{f.name} = {_fmt_hw(v) if f.name in _HW_KEYS else _fmt(v)}")
    lines.append("# training")
    for f in fields(TrainConfig):
        v = getattr(cfg.train, f.name)
        lines.append(f"{f.name} = {_fmt_hw(v) if f.name in _HW_KEYS else _fmt(v)}")
    lines.append("# paths")
    lines += [f"{k} = {getattr(cfg, k)}" for k in _PATH_KEYS]
    return "\n".join(lines) + "\n"


def load_config(path):
    return parse_config(Path(path).read_text(), str(path))


def save_config(path, cfg):
    Path(path).write_text(format_config(cfg))


def arch_to_text(arch):
    """Architecture keys only, in the same format (used by checkpoint manifests)."""
    return "".join(line + "\n" for line in format_config(RunConfig(arch)).splitlines()
                   if line.split(" = ")[0] in _ARCH_PARSERS)


def arch_from_text(text, source="<manifest>"):
    return parse_config(text, source).arch


__all__ = ["RunConfig", "parse_config", "format_config", "load_config", "save_config",
           "arch_to_text", "arch_from_text", "KEYS"]
