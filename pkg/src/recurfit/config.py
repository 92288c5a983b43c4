"""Run configuration: schema, file loading, and dotted-key overrides.

Config files are JSON. Every field is validated against the dataclass
schema; unknown keys are rejected with their full path so typos fail
loudly instead of silently using a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .schedules import CurriculumSpec, WindowSchedule, WsdSpec


@dataclass
class RunConfig:
    model: ModelConfig
    total_steps: int
    out_dir: str
    model_kind: str = "recurrent"          # "recurrent" | "fixed"
    fixed_depth: int = 4                   # depth when model_kind == "fixed"
    plan_tuple: list = field(default_factory=lambda: [1, 2, 1])
    donor_checkpoint: str | None = None    # apply surgery to this donor
    init_checkpoint: str | None = None     # or start from these weights
    adapter_init: str = "identity-pass"
    adapter_noise_std: float = 1e-3
    optimizer: str = "muon"
    optimizer_hyper: dict = field(default_factory=dict)
    depth_spread: float = 0.5
    curriculum: CurriculumSpec = field(default_factory=CurriculumSpec)
    window: WindowSchedule = field(default_factory=WindowSchedule)
    lr: WsdSpec = field(default_factory=lambda: WsdSpec(peak=1e-3))
    micro_batch: int = 8
    global_batch: int = 8
    seed: int = 0
    phases: list = field(default_factory=list)
    emb_scale: float = 1.0
    dtype: str = "float32"
    grad_clip: float = 1.0
    checkpoint_interval: int = 0           # 0 = final checkpoint only
    metric_interval: int = 1
    max_nonfinite: int = 5

    def __post_init__(self):
        if self.global_batch % self.micro_batch != 0:
            raise ConfigError("global_batch must be divisible by micro_batch")
        if self.model_kind not in ("recurrent", "fixed"):
            raise ConfigError(f"unknown model_kind {self.model_kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, "
                              f"got {self.dtype!r}")
        if not self.phases:
            self.phases = [{"datasets": ["plain"], "weights": [1.0],
                            "start": 0, "end": self.total_steps}]

    def to_dict(self) -> dict:
        def conv(v):
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name))
                        for f in dataclasses.fields(v)}
            return v
        return {f.name: conv(getattr(self, f.name))
                for f in dataclasses.fields(self)}


_NESTED = {"model": ModelConfig, "curriculum": CurriculumSpec,
           "window": WindowSchedule, "lr": WsdSpec}


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{path}.{key}'"
                              if path else f"unknown config key '{key}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = _NESTED.get(f.name) if cls is RunConfig else None
        kwargs[f.name] = (_build_dataclass(sub, value, f"{path}.{f.name}" if path
                                           else f.name) if sub else value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_override(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        elif not isinstance(nxt, dict):
            raise ConfigError(f"override key '{key}' descends into a scalar")
        node = nxt
    node[parts[-1]] = value


def load_config(path, overrides: list | None = None) -> RunConfig:
    """Parse the JSON run config, apply dotted overrides, validate."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    for text in overrides or []:
        key, value = _parse_override(text)
        _apply_override(data, key, value)
    cfg = _build_dataclass(RunConfig, data, "")
    if not isinstance(cfg.model, ModelConfig):
        raise ConfigError("config must include a 'model' section")
    return cfg


def resolved_config_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
