"""Run configuration: JSON file + command-line overrides over built-in defaults."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .evaluation import REGIMES, VARIANTS
from .features import FeatureConfig
from .relgraph import derive_seed
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the offending field path."""


@dataclass
class RunConfig:
    manifests: list[str] = field(default_factory=list)
    out_dir: str = "runs/default"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    regimes: list[str] = field(default_factory=lambda: list(REGIMES))
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0])
    root_seed: int = 0
    split: list[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"]["fanout"] = list(self.features.fanout)
        return d


_SECTIONS = {"backbone": BackboneConfig, "train": TrainConfig, "features": FeatureConfig}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(out[k], dict) and k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected an object")
            out[k] = _merge(out[k], v, where + ".")
        else:
            out[k] = v
    return out


def _update(base: dict, over: dict) -> dict:
    """Deep update without checks; unknown names are caught against the defaults later."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _update(out[k], v)
        else:
            out[k] = v
    return out


def _section(cls, data: dict, name: str):
    try:
        obj = cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    return obj


def from_dict(data: dict) -> RunConfig:
    # "streams" is an informational record written next to a resolved config
    data = {k: v for k, v in data.items() if k != "streams"}
    d = _merge(RunConfig().to_dict(), data)
    if isinstance(d["manifests"], str):
        d["manifests"] = [d["manifests"]]
    d["features"]["fanout"] = tuple(d["features"]["fanout"])
    cfg = RunConfig(**{k: v for k, v in d.items() if k not in _SECTIONS},
                    **{k: _section(cls, d[k], k) for k, cls in _SECTIONS.items()})
    return cfg


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (a nested dict of flag values)."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be an object")
        base = Path(path).parent
        if isinstance(data.get("manifests"), str):
            data["manifests"] = [data["manifests"]]
        data["manifests"] = [str(base / m) for m in data.get("manifests", [])]
    if overrides:
        data = _update(data, overrides)
    return from_dict(data)


def validate(cfg: RunConfig, need_manifests: bool = True) -> RunConfig:
    if need_manifests and not cfg.manifests:
        raise ConfigError("manifests: at least one manifest is required")
    for i, m in enumerate(cfg.manifests):
        if not Path(m).is_file():
            raise ConfigError(f"manifests[{i}]: file not found: {m}")
    if not cfg.seeds:
        raise ConfigError("seeds: at least one seed is required")
    for i, r in enumerate(cfg.regimes):
        if r not in REGIMES:
            raise ConfigError(f"regimes[{i}]: unknown regime {r!r}")
    for i, v in enumerate(cfg.variants):
        if v not in VARIANTS:
            raise ConfigError(f"variants[{i}]: unknown variant {v!r}")
    if len(cfg.features.fanout) != cfg.backbone.layers:
        raise ConfigError("features.fanout: one fanout per backbone layer is required")
    for name, obj in (("backbone", cfg.backbone), ("train", cfg.train)):
        try:
            obj.validate()
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    if cfg.train.lr <= 0:
        raise ConfigError("train.lr: step size must be positive")
    return cfg


def rng_streams(cfg: RunConfig) -> dict:
    """Every named random stream of a run and the seed material it is keyed by."""
    return {
        "walks": {"key": [cfg.root_seed, "walks"], "seed": derive_seed(cfg.root_seed, "walks")},
        "per_seed": {str(s): {"init": [s, "init"], "init-adversary": [s, "init-adversary"],
                              "episodes": [s, "episodes", "<task>", "<epoch>"],
                              "sampling": [s, "sampling", "<epoch>", "<step>"],
                              "eval-support": [s, "eval-support", "<task>"],
                              "eval-sampling": [s, "eval-sampling"]} for s in cfg.seeds},
    }


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "resolved_config.json"
    doc = cfg.to_dict()
    doc["manifests"] = [str(Path(m).resolve()) for m in cfg.manifests]
    doc["streams"] = rng_streams(cfg)
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return p
