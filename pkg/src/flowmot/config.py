"""Experiment configuration: a plain-text ``key = value`` file.

Grammar, one entry per line::

    # comment (also allowed after a value)
    seed = 7
    suite = easy, hard            # comma-separated list
    flow.n_blocks = 4             # dotted keys address a section
    tracker.gate.center_px = 120
    scenario.n_frames = 120       # overrides applied on top of each preset

Blank lines are ignored. Values are parsed according to the type of the field
they set; booleans accept true/false/yes/no/1/0. Unknown keys, repeated keys
and malformed lines raise ConfigError naming the line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .experiment import PROVIDERS
from .flow import FlowConfig
from .metrics import DEFAULT_BINS
from .sim import PRESETS, ScenarioConfig, preset
from .tracker import TrackerParams


class ConfigError(ValueError):
    def __init__(self, msg: str, key: Optional[str] = None, lineno: Optional[int] = None):
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + msg)
        self.key = key
        self.lineno = lineno


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    suite: tuple = ("easy", "moderate", "hard")
    n_seeds: int = 3
    n_train_seeds: int = 8
    providers: tuple = PROVIDERS
    conditioning: tuple = ("cond", "uncond")
    bins: tuple = DEFAULT_BINS
    gt_distances: bool = False
    flow: FlowConfig = FlowConfig()
    tracker: TrackerParams = TrackerParams()
    scenario: dict = field(default_factory=dict)  # ScenarioConfig overrides

    def scenario_config(self, preset_name: str, seed: int) -> ScenarioConfig:
        cfg = preset(preset_name, seed)
        return cfg.replace(**self.scenario) if self.scenario else cfg

    def eval_seeds(self) -> tuple:
        return derive_seeds(self.seed, "eval", self.n_seeds)

    def train_seeds(self) -> tuple:
        return derive_seeds(self.seed, "train", self.n_train_seeds)

    def flow_seed(self) -> int:
        return derive_seed(self.seed, "flow")


_STREAMS = {"eval": 1, "train": 2, "flow": 3}


def derive_seeds(global_seed: int, stream: str, n: int) -> tuple:
    """Independent child seeds of ``global_seed`` for a named stream."""
    ss = np.random.SeedSequence([int(global_seed), _STREAMS[stream]])
    return tuple(int(s) for s in ss.generate_state(n, dtype=np.uint32) % 1_000_000)


def derive_seed(global_seed: int, stream: str) -> int:
    return derive_seeds(global_seed, stream, 1)[0]


# -- parsing -------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_scalar(text: str, kind: type):
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    raise ValueError(f"unsupported field type {kind}")


def _list(text: str) -> list:
    return [p.strip() for p in text.split(",") if p.strip()]


def _parse_bins(text: str) -> tuple:
    out = []
    for part in _list(text):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise ValueError(f"bin {part!r} must be lo:hi")
        lo_f, hi_f = float(lo), float(hi)
        if not 0.0 <= lo_f <= hi_f <= 1.0:
            raise ValueError(f"bin {part!r} must satisfy 0 <= lo <= hi <= 1")
        out.append((lo_f, hi_f))
    return tuple(out)


def _field_types(cls) -> dict:
    import typing
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _apply_dotted(obj, path: list, text: str):
    """Return a copy of dataclass ``obj`` with the field at ``path`` set from ``text``."""
    types = _field_types(type(obj))
    name = path[0]
    if name not in types:
        raise KeyError(name)
    kind = types[name]
    if len(path) > 1:
        child = getattr(obj, name)
        if not dataclasses.is_dataclass(child):
            raise KeyError(".".join(path))
        return dataclasses.replace(obj, **{name: _apply_dotted(child, path[1:], text)})
    if dataclasses.is_dataclass(kind):
        raise KeyError(name)
    if getattr(kind, "__origin__", None) is not None or kind not in (bool, int, float, str):
        # Optional[bool] and friends
        args = [a for a in getattr(kind, "__args__", ()) if a is not type(None)]
        if text.lower() in ("none", "auto"):
            return dataclasses.replace(obj, **{name: None})
        kind = args[0] if args else str
    return dataclasses.replace(obj, **{name: _parse_scalar(text, kind)})


_TOP = {
    "seed": lambda t: int(t),
    "n_seeds": lambda t: int(t),
    "n_train_seeds": lambda t: int(t),
    "gt_distances": _parse_bool,
    "suite": lambda t: tuple(_list(t)),
    "providers": lambda t: tuple(_list(t)),
    "conditioning": lambda t: tuple(_list(t)),
    "bins": _parse_bins,
}


def parse_config(text: str, base: ExperimentConfig = ExperimentConfig()) -> ExperimentConfig:
    cfg = base
    scenario = dict(base.scenario)
    scen_types = _field_types(ScenarioConfig)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {body!r}", None, lineno)
        if key in seen:
            raise ConfigError(f"key {key!r} repeated", key, lineno)
        seen.add(key)
        head, _, rest = key.partition(".")
        try:
            if key in _TOP:
                cfg = dataclasses.replace(cfg, **{key: _TOP[key](value)})
            elif head in ("flow", "tracker") and rest:
                cfg = dataclasses.replace(cfg, **{head: _apply_dotted(getattr(cfg, head),
                                                                      rest.split("."), value)})
            elif head == "scenario" and rest:
                if rest not in scen_types or rest in ("name", "seed"):
                    raise KeyError(key)
                scenario[rest] = _parse_scalar(value, scen_types[rest])
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"unknown key {key!r}", key, lineno) from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key, lineno) from None
    cfg = dataclasses.replace(cfg, scenario=scenario)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    for name in cfg.suite:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} in suite", "suite")
    for p in cfg.providers:
        if p not in PROVIDERS:
            raise ConfigError(f"unknown provider {p!r}", "providers")
    for c in cfg.conditioning:
        if c not in ("cond", "uncond"):
            raise ConfigError(f"conditioning entries must be cond/uncond, got {c!r}", "conditioning")
    if cfg.n_seeds < 1 or cfg.n_train_seeds < 1:
        raise ConfigError("seed counts must be >= 1", "n_seeds")
    if cfg.scenario:
        try:
            ScenarioConfig().replace(**cfg.scenario)
        except ValueError as exc:
            raise ConfigError(f"invalid scenario override: {exc}", "scenario") from None


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> str:
    """Serialize to the same grammar (round-trips through ``parse_config``)."""
    lines = [f"seed = {cfg.seed}",
             f"suite = {', '.join(cfg.suite)}",
             f"n_seeds = {cfg.n_seeds}",
             f"n_train_seeds = {cfg.n_train_seeds}",
             f"providers = {', '.join(cfg.providers)}",
             f"conditioning = {', '.join(cfg.conditioning)}",
             "bins = " + ", ".join(f"{lo:g}:{hi:g}" for lo, hi in cfg.bins),
             f"gt_distances = {str(cfg.gt_distances).lower()}"]
    lines += _flatten("flow", cfg.flow)
    lines += _flatten("tracker", cfg.tracker)
    lines += [f"scenario.{k} = {_fmt_value(v)}" for k, v in sorted(cfg.scenario.items())]
    return "\n".join(lines) + "\n"


def _fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _flatten(prefix: str, obj) -> list:
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out += _flatten(f"{prefix}.{f.name}", v)
        else:
            out.append(f"{prefix}.{f.name} = {_fmt_value(v)}")
    return out
