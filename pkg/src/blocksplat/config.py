"""Pipeline configuration: dataclasses, JSON files and dotted overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .refine import RefineConfig


def _coarse_defaults():
    # low-resolution global stage: one IDGP pass halfway through
    return RefineConfig(iterations=60, prune_schedule=(0.5,), resolution_scale=0.3)


@dataclass
class PipelineConfig:
    dataset_root: str = "."
    cameras_file: str = "cameras.txt"
    init_scene: str = "scene_init.ply"
    coarse_scene: Optional[str] = None
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1
    background: tuple = (0.0, 0.0, 0.0)

    coarse: RefineConfig = field(default_factory=_coarse_defaults)

    n_blocks: int = 4
    grid: Optional[tuple] = None
    bounds_mode: str = "cameras"
    bounds_margin: float = 0.0
    k_threshold: Optional[int] = None

    epsilon: float = 0.1
    assign_scale: float = 0.25
    score_scale: float = 0.5

    refine: RefineConfig = field(default_factory=RefineConfig)

    contraction: bool = True
    so_assignment: bool = True
    bo_assignment: bool = True
    idgp: bool = True

    def __post_init__(self):
        if isinstance(self.coarse, dict):
            self.coarse = RefineConfig(**self.coarse)
        if isinstance(self.refine, dict):
            self.refine = RefineConfig(**self.refine)
        self.background = tuple(float(v) for v in self.background)
        if self.grid is not None:
            self.grid = tuple(int(g) for g in self.grid)
            if self.grid[0] * self.grid[1] * self.grid[2] != self.n_blocks:
                self.n_blocks = self.grid[0] * self.grid[1] * self.grid[2]
        if self.bounds_mode not in ("cameras", "gaussians"):
            raise ValueError(f"bounds_mode must be 'cameras' or 'gaussians', got {self.bounds_mode!r}")

    @property
    def root(self) -> Path:
        return Path(self.dataset_root)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coarse"] = self.coarse.to_dict()
        d["refine"] = self.refine.to_dict()
        d["background"] = list(self.background)
        d["grid"] = None if self.grid is None else list(self.grid)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _coerce(current, text: str):
    if isinstance(current, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (tuple, list)) or current is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Apply 'a.b=value' strings, e.g. 'refine.iterations=50'."""
    d = cfg.to_dict()
    for item in overrides or ():
        key, _, value = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not key=value")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(node[parts[-1]], value)
    return PipelineConfig.from_dict(d)


def merge_dict(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = merge_dict(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_file(path, **top_level) -> PipelineConfig:
    base = PipelineConfig().to_dict()
    if path:
        base = merge_dict(base, json.loads(Path(path).read_text()))
    base.update({k: v for k, v in top_level.items() if v is not None})
    return PipelineConfig.from_dict(base)

