"""Flat key = value configuration files.

Lines are `key = value`; `#` starts a comment. List values are
comma-separated; oe_dims uses `;` between per-stage groups, e.g.
`oe_dims = 32,32; 64,64; 128,128`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .network import NetworkConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass
class TrainSettings:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

_NETWORK_PARSERS = {
    "input_points": int,
    "num_classes": int,
    "use_rgb": lambda v: _parse_bool(v),
    "stage_sizes": lambda v: _parse_tuple(v, int),
    "stage_widths": lambda v: _parse_tuple(v, int),
    "input_width": int,
    "oe_radii": lambda v: _parse_tuple(v, float),
    "oe_dims": lambda v: tuple(_parse_tuple(g, int) for g in v.split(";")),
    "sa_radii": lambda v: _parse_tuple(v, float),
    "max_k": int,
    "seed": int,
    "relative_coords_only": lambda v: _parse_bool(v),
    "block_kind": str,
    "ball_conv_k": int,
    "fps_start": str,
    "fusion_activation": lambda v: _parse_bool(v),
    "interp_k": int,
}

_TRAIN_PARSERS = {
    "optimizer": str,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
}


def _parse_bool(v: str) -> bool:
    try:
        return _BOOL[v.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {v!r}") from None


def _parse_tuple(v: str, cast):
    items = [s for s in (part.strip() for part in v.split(",")) if s]
    if not items:
        raise ValueError("empty list value")
    return tuple(cast(s) for s in items)


def parse_config_text(text: str) -> tuple[NetworkConfig, TrainSettings]:
    net_kw: dict = {}
    train_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _NETWORK_PARSERS:
                net_kw[key] = _NETWORK_PARSERS[key](value)
            elif key in _TRAIN_PARSERS:
                train_kw[key] = _TRAIN_PARSERS[key](value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(str(exc), lineno) from None
    try:
        return NetworkConfig(**net_kw), TrainSettings(**train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> tuple[NetworkConfig, TrainSettings]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def format_config(config: NetworkConfig, train: TrainSettings | None = None) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name == "oe_dims":
            if v is None:
                continue
            lines.append(f"oe_dims = {'; '.join(','.join(str(d) for d in g) for g in v)}")
        elif isinstance(v, tuple):
            lines.append(f"{f.name} = {','.join(str(x) for x in v)}")
        elif isinstance(v, bool):
            lines.append(f"{f.name} = {'true' if v else 'false'}")
        else:
            lines.append(f"{f.name} = {v}")
    if train is not None:
        for f in fields(train):
            lines.append(f"{f.name} = {getattr(train, f.name)}")
    return "\n".join(lines) + "\n"
