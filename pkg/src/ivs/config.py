"""Run configuration: defaults for every tunable, overridable from a JSON file."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .actuator import PRESETS, make_instrument
from .control import TimingModel
from .datapipe import Hyperparameters
from .policy import Architecture, DEFAULT_ARCH, TrainConfig
from .render import Camera
from .supervisor import DemoProfile
from .workspace import Pose2


@dataclass
class Config:
    camera: Camera = field(default_factory=Camera)
    instruments: dict = field(default_factory=lambda: {k: dict(v) for k, v in PRESETS.items()})
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    demo: DemoProfile = field(default_factory=DemoProfile)
    timing: TimingModel = field(default_factory=TimingModel)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: Architecture = DEFAULT_ARCH
    max_steps: int = 50
    demos_per_peg: int = 15
    cal_rollouts: int = 4

    def instrument(self, name: str, seed: int = 0):
        return make_instrument(name, self.instruments.get(name), seed=seed)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Architecture):
                v = v.to_dict()
            elif is_dataclass(v):
                v = asdict(v)
            d[f.name] = v
        d["timing"]["rates"] = {str(k): r for k, r in d["timing"]["rates"].items()}
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _merge(dc, overrides: dict):
    known = {f.name for f in fields(dc)}
    bad = set(overrides) - known
    if bad:
        raise ValueError(f"unknown {type(dc).__name__} keys: {sorted(bad)}")
    return type(dc)(**{**asdict(dc), **overrides})


def config_from_dict(d: dict) -> Config:
    cfg = Config()
    d = dict(d)
    if "camera" in d:
        cam = dict(d.pop("camera"))
        if "origin" in cam:
            cam["origin"] = Pose2(*cam["origin"])
        cfg.camera = _merge(cfg.camera, cam)
    if "instruments" in d:
        for name, params in d.pop("instruments").items():
            cfg.instruments[name] = {**cfg.instruments.get(name, {}), **params}
    if "timing" in d:
        t = dict(d.pop("timing"))
        if "rates" in t:
            t["rates"] = {int(k): float(v) for k, v in t["rates"].items()}
        cfg.timing = _merge(cfg.timing, t)
    if "arch" in d:
        cfg.arch = Architecture.from_dict({**cfg.arch.to_dict(), **d.pop("arch")})
    for key, cls_name in (("hyper", "hyper"), ("demo", "demo"), ("train", "train")):
        if key in d:
            setattr(cfg, key, _merge(getattr(cfg, key), d.pop(key)))
    for key in ("max_steps", "demos_per_peg", "cal_rollouts"):
        if key in d:
            setattr(cfg, key, int(d.pop(key)))
    if d:
        raise ValueError(f"unknown config keys: {sorted(d)}")
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    return config_from_dict(json.loads(Path(path).read_text()))
