from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .bev_render import GridConfig
from .logger import log_event
from .model import BranchConfig
from .synthdata import SynthConfig
from .training import TrainConfig


SECTIONS = {"synth": SynthConfig, "model": BranchConfig, "train": TrainConfig, "grid": GridConfig}
RUN_KEYS = ("seed", "out")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: BranchConfig = field(default_factory=BranchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    seed: int = 0
    out: str = "out"

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for name in SECTIONS:
            flat.update(asdict(getattr(self, name)))
        flat["seed"] = self.seed
        flat["out"] = self.out
        return flat


def _routes() -> Dict[str, list]:
    routes: Dict[str, list] = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            routes.setdefault(f.name, []).append(section)
    return routes


def config_from_flat(data: Mapping[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply a flat key -> value mapping onto ``base``; keys shared by sections go to all of them."""
    cfg = base or RunConfig()
    routes = _routes()
    updates: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    top: Dict[str, Any] = {}
    for key, value in data.items():
        if key not in routes and key not in RUN_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        for section in routes.get(key, []):
            updates[section][key] = value
        if key in RUN_KEYS:
            top[key] = value
    sections = {s: replace(getattr(cfg, s), **u) if u else getattr(cfg, s) for s, u in updates.items()}
    return replace(cfg, **sections, **top)


def load_config(path: Union[str, Path]) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    return config_from_flat(data)


def resolve_config(path: Optional[Union[str, Path]], overrides: Mapping[str, Any]) -> RunConfig:
    """Defaults, then the config file, then non-None overrides (command-line flags)."""
    cfg = load_config(path) if path else RunConfig()
    flags = {k: v for k, v in overrides.items() if v is not None}
    if flags:
        cfg = config_from_flat(flags, cfg)
    return cfg


def write_resolved(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log_event("config_resolved", path=str(path), seed=cfg.seed)
    return path
