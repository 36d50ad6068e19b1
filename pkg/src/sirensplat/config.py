"""Training configuration as flat `key = value` text files.

Lines are `key = value`, blank lines and `#` comments allowed. Keys use
dotted prefixes for the sub-blocks (loss.lambda, lr.position,
densify.bands, ...). Unknown keys are an error that names the key, so a
typo cannot silently fall back to a default.

The same key/value pairs drive `--set key=value` overrides on the command
line, applied after the file.
"""

from __future__ import annotations

from pathlib import Path

from .densify import STRATEGIES, DensifyConfig
from .errors import MalformedInputError, MissingFileError
from .losses import LossConfig
from .primitives import HeadSpec
from .spectral import FreqErrorConfig, FrequencyBand
from .trainer import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_bands(s: str):
    bands = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        lo, _, hi = part.partition(":")
        bands.append(FrequencyBand(float(lo), float(hi)))
    if not bands:
        raise ValueError("empty band list")
    return tuple(bands)


def _parse_background(s: str) -> tuple:
    parts = [float(p) for p in s.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"background needs 1 or 3 components, got {s!r}")
    return tuple(parts)


def _set_head(cfg: TrainConfig, attr: str, value: str) -> None:
    h = cfg.head
    fields = {
        "kind": str(value),
        "d_in": h.d_in,
        "hidden": h.hidden,
        "omega0": h.omega0,
        "degree": h.degree,
    }
    if attr == "kind":
        if value == "siren":
            cfg.head = HeadSpec.siren(d_in=h.d_in or 5, hidden=h.hidden or 6, omega0=h.omega0)
        elif value == "siren-nodir":
            cfg.head = HeadSpec.siren(d_in=2, hidden=3, omega0=h.omega0)
        elif value == "sh":
            cfg.head = HeadSpec.sh(degree=h.degree if h.kind == "sh" else 3)
        else:
            raise ValueError(f"unknown head kind {value!r}")
        return
    fields[attr] = value
    if attr in ("d_in", "hidden"):
        cfg.head = HeadSpec.siren(d_in=int(fields["d_in"]), hidden=int(fields["hidden"]), omega0=h.omega0)
    elif attr == "omega0":
        cfg.head = HeadSpec.siren(d_in=h.d_in or 5, hidden=h.hidden or 6, omega0=float(value))
    elif attr == "degree":
        cfg.head = HeadSpec.sh(degree=int(value))
    else:
        raise KeyError(attr)


def _freq_cfg(cfg: TrainConfig) -> FreqErrorConfig:
    return cfg.densify.freq


# key -> setter(cfg, raw string value)
_SETTERS = {
    "iterations": lambda c, v: setattr(c, "iterations", int(v)),
    "seed": lambda c, v: setattr(c, "seed", int(v)),
    "threads": lambda c, v: setattr(c, "threads", int(v)),
    "background": lambda c, v: setattr(c, "background", _parse_background(v)),
    "views_per_step": lambda c, v: setattr(c, "views_per_step", int(v)),
    "checkpoint_every": lambda c, v: setattr(c, "checkpoint_every", int(v)),
    "init_opacity": lambda c, v: setattr(c, "init_opacity", float(v)),
    "init_scale_factor": lambda c, v: setattr(c, "init_scale_factor", float(v)),
    "head.kind": lambda c, v: _set_head(c, "kind", v),
    "head.d_in": lambda c, v: _set_head(c, "d_in", v),
    "head.hidden": lambda c, v: _set_head(c, "hidden", v),
    "head.omega0": lambda c, v: _set_head(c, "omega0", v),
    "head.degree": lambda c, v: _set_head(c, "degree", v),
    "loss.lambda": lambda c, v: setattr(c.loss, "lam", float(v)),
    "loss.window": lambda c, v: setattr(c.loss, "window", int(v)),
    "loss.sigma": lambda c, v: setattr(c.loss, "sigma", float(v)),
    "lr.position": lambda c, v: setattr(c, "lr_position", float(v)),
    "lr.position_final": lambda c, v: setattr(c, "lr_position_final", float(v)),
    "lr.rotation": lambda c, v: setattr(c, "lr_rotation", float(v)),
    "lr.scale": lambda c, v: setattr(c, "lr_scale", float(v)),
    "lr.opacity": lambda c, v: setattr(c, "lr_opacity", float(v)),
    "lr.head": lambda c, v: setattr(c, "lr_head", float(v)),
    "adam.beta1": lambda c, v: setattr(c, "adam_beta1", float(v)),
    "adam.beta2": lambda c, v: setattr(c, "adam_beta2", float(v)),
    "adam.eps": lambda c, v: setattr(c, "adam_eps", float(v)),
    "densify.interval": lambda c, v: setattr(c.densify, "interval", int(v)),
    "densify.views_per_round": lambda c, v: setattr(c.densify, "views_per_round", int(v)),
    "densify.threshold": lambda c, v: setattr(c.densify, "threshold", float(v)),
    "densify.grad_threshold": lambda c, v: setattr(c.densify, "grad_threshold", float(v)),
    "densify.max_primitives": lambda c, v: setattr(c.densify, "max_primitives", int(v)),
    "densify.until_fraction": lambda c, v: setattr(c.densify, "until_fraction", float(v)),
    "densify.strategy": lambda c, v: _set_strategy(c, v),
    "densify.clone_pct": lambda c, v: setattr(c.densify, "clone_pct", float(v)),
    "densify.split_factor": lambda c, v: setattr(c.densify, "split_factor", float(v)),
    "densify.prune_opacity": lambda c, v: setattr(c.densify, "prune_opacity", float(v)),
    "densify.prune_scale": lambda c, v: setattr(c.densify, "prune_scale", float(v)),
    "densify.reset_every": lambda c, v: setattr(c.densify, "reset_every", int(v)),
    "densify.reset_rounds": lambda c, v: setattr(c.densify, "reset_rounds", int(v)),
    "densify.reset_target": lambda c, v: setattr(c.densify, "reset_target", float(v)),
    "densify.reset_rate": lambda c, v: setattr(c.densify, "reset_rate", float(v)),
    "densify.bands": lambda c, v: setattr(_freq_cfg(c), "bands", _parse_bands(v)),
    "densify.avg_kernel": lambda c, v: setattr(_freq_cfg(c), "avg_kernel", int(v)),
    "densify.channel_mode": lambda c, v: setattr(_freq_cfg(c), "channel_mode", v),
}


def _set_strategy(cfg: TrainConfig, value: str) -> None:
    if value not in STRATEGIES:
        raise ValueError(f"unknown strategy {value!r}, pick one of {STRATEGIES}")
    cfg.densify.strategy = value


def known_keys() -> list[str]:
    return sorted(_SETTERS)


def default_config() -> TrainConfig:
    return TrainConfig(
        loss=LossConfig(), densify=DensifyConfig(freq=FreqErrorConfig())
    )


def set_option(cfg: TrainConfig, key: str, value: str) -> None:
    setter = _SETTERS.get(key)
    if setter is None:
        raise MalformedInputError(
            f"unknown config key {key!r} (known keys: {', '.join(known_keys())})"
        )
    try:
        setter(cfg, value.strip())
    except (ValueError, KeyError) as e:
        raise MalformedInputError(f"bad value for {key!r}: {e}") from e


def apply_overrides(cfg: TrainConfig, pairs) -> None:
    """Apply an iterable of 'key=value' strings."""
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise MalformedInputError(f"override {pair!r} is not of the form key=value")
        set_option(cfg, key.strip(), value)


def load_config(path, cfg: TrainConfig | None = None) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such config file: {p}")
    cfg = cfg or default_config()
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise MalformedInputError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
        set_option(cfg, key.strip(), value)
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    """Flat echo of the effective config (for checkpoint sidecars)."""
    d = {
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "background": list(cfg.background),
        "views_per_step": cfg.views_per_step,
        "checkpoint_every": cfg.checkpoint_every,
        "init_opacity": cfg.init_opacity,
        "init_scale_factor": cfg.init_scale_factor,
        "head": cfg.head.to_dict(),
        "loss.lambda": cfg.loss.lam,
        "loss.window": cfg.loss.window,
        "loss.sigma": cfg.loss.sigma,
        "lr.position": cfg.lr_position,
        "lr.position_final": cfg.lr_position_final,
        "lr.rotation": cfg.lr_rotation,
        "lr.scale": cfg.lr_scale,
        "lr.opacity": cfg.lr_opacity,
        "lr.head": cfg.lr_head,
        "adam.beta1": cfg.adam_beta1,
        "adam.beta2": cfg.adam_beta2,
        "adam.eps": cfg.adam_eps,
        "densify.interval": cfg.densify.interval,
        "densify.views_per_round": cfg.densify.views_per_round,
        "densify.threshold": cfg.densify.threshold,
        "densify.grad_threshold": cfg.densify.grad_threshold,
        "densify.max_primitives": cfg.densify.max_primitives,
        "densify.until_fraction": cfg.densify.until_fraction,
        "densify.strategy": cfg.densify.strategy,
        "densify.clone_pct": cfg.densify.clone_pct,
        "densify.split_factor": cfg.densify.split_factor,
        "densify.prune_opacity": cfg.densify.prune_opacity,
        "densify.prune_scale": cfg.densify.prune_scale,
        "densify.reset_every": cfg.densify.reset_every,
        "densify.reset_rounds": cfg.densify.reset_rounds,
        "densify.reset_target": cfg.densify.reset_target,
        "densify.reset_rate": cfg.densify.reset_rate,
        "densify.bands": [[b.lo, b.hi] for b in cfg.densify.freq.bands],
        "densify.avg_kernel": cfg.densify.freq.avg_kernel,
        "densify.channel_mode": cfg.densify.freq.channel_mode,
    }
    return d
