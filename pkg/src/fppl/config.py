"""Experiment configuration: nested dataclasses, TOML/JSON files, dotted overrides."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbone import BackboneConfig
from .data import DataSpec
from .federation import AblationFlags, Hyperparams

_SECTIONS = {"backbone": BackboneConfig, "hp": Hyperparams, "data": DataSpec,
             "flags": AblationFlags}


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hp: Hyperparams = field(default_factory=Hyperparams)
    data: DataSpec = field(default_factory=DataSpec)
    flags: AblationFlags = field(default_factory=AblationFlags)
    out_dir: str = "runs/desk"
    seeds: tuple[int, ...] = (2023, 2024, 2025)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(_SECTIONS) - {"out_dir", "seeds"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            sec = dict(d.get(name, {}))
            valid = {f.name for f in fields(typ)}
            bad = set(sec) - valid
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kw[name] = typ(**sec)
        if "out_dir" in d:
            kw["out_dir"] = str(d["out_dir"])
        if "seeds" in d:
            kw["seeds"] = tuple(int(s) for s in d["seeds"])
        return cls(**kw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, hp=replace(self.hp, seed=seed))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        d = json.loads(text)
        d = d.get("config", d)  # accepts a run manifest too
    else:
        d = tomllib.loads(text)
    return ExperimentConfig.from_dict(d)


def _parse_value(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            return float(raw)  # e.g. beta written as 1 in a file, overridden with 0.1
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (tuple, list)):
        return [int(s) for s in raw.split(",") if s.strip()]
    return raw


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings, e.g. ``flags.use_debias=false``."""
    d = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown config path {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config path {key!r}")
        node[parts[-1]] = _parse_value(raw.strip(), node[parts[-1]])
    return ExperimentConfig.from_dict(d)


def dumps_toml(cfg: ExperimentConfig) -> str:
    """Minimal TOML writer for the flat section layout used here."""
    d = cfg.to_dict()

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = [f"out_dir = {fmt(d['out_dir'])}", f"seeds = {fmt(d['seeds'])}", ""]
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        lines += [f"{k} = {fmt(v)}" for k, v in d[name].items()]
        lines.append("")
    return "\n".join(lines)
