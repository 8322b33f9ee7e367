"""Declarative run configuration and named presets.

A run config is one JSON document with sections ``world``, ``net``,
``training``, ``data`` and ``eval``. Values are resolved with last-writer-wins
precedence: preset, then config file, then command-line overrides. Unknown
keys are rejected at every level.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import NetSpec
from .shapes_world import WorldConfig
from .trainer import TrainingConfig

SECTIONS = ("world", "net", "training", "data", "eval")

_DATA_DEFAULTS = {"n": 1000, "seed": 1, "test_n": 200, "test_seed": 12345, "test_length": 8}
_EVAL_DEFAULTS = {"horizon": 260, "window": [250, 260], "noise_std": 1.0, "noise_seed": 0, "batch_size": 100}

PRESETS: dict[str, dict[str, Any]] = {
    "shapes-desk": {
        "world": {"image_size": [32, 32], "sequence_length": 24, "seed": 1},
        "net": {"d": 16, "conv_widths": [16, 32], "m": 16, "lstm_size": 128},
        "training": {"context": 3, "horizon": 16, "batch_size": 16, "steps": 5000,
                     "state_noise_std": 0.1,
                     "lr_final_ratio": 0.05,
                     "alpha_schedule": {"alpha_start": 1e-7, "alpha_end": 1e-3, "ramp_steps": 3000}},
        "data": {"n": 1000},
        "eval": {"horizon": 260, "window": [250, 260]},
    },
    "shapes-paper": {
        "world": {"image_size": [64, 64], "sequence_length": 24, "seed": 1},
        "net": {"d": 64, "conv_widths": [16, 32, 32], "m": 32, "lstm_size": 256},
        "training": {"context": 3, "horizon": 16, "batch_size": 16, "steps": 20000,
                     "state_noise_std": 0.1,
                     "lr_final_ratio": 0.05,
                     "alpha_schedule": {"alpha_start": 1e-7, "alpha_end": 1e-3, "ramp_steps": 12000}},
        "data": {"n": 1000},
        "eval": {"horizon": 1022, "window": [1012, 1022]},
    },
    "tiny": {
        "world": {"image_size": [16, 16], "sequence_length": 12, "seed": 1},
        "net": {"d": 4, "conv_widths": [8, 8], "m": 4, "lstm_size": 16},
        "training": {"context": 2, "horizon": 6, "batch_size": 4, "steps": 5,
                     "critic_steps_per_gen_step": 2, "critic_hidden": 8,
                     "alpha_schedule": {"alpha_start": 1e-7, "alpha_end": 0.1, "ramp_steps": 4}},
        "data": {"n": 8, "test_n": 6, "test_length": 4},
        "eval": {"horizon": 24, "window": [20, 24], "batch_size": 6},
    },
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(section: str, d: dict, allowed: set[str]) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown keys in '{section}': {sorted(unknown)}")


@dataclass
class RunConfig:
    preset: str
    world: WorldConfig
    net: NetSpec
    training: TrainingConfig
    data: dict = field(default_factory=lambda: dict(_DATA_DEFAULTS))
    eval: dict = field(default_factory=lambda: dict(_EVAL_DEFAULTS))
    output_dir: str | None = None

    @classmethod
    def resolve(cls, preset: str = "shapes-desk", file_doc: dict | None = None,
                overrides: dict | None = None, output_dir: str | None = None) -> "RunConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        doc = {s: {} for s in SECTIONS}
        doc = _merge(doc, PRESETS[preset])
        for layer in (file_doc or {}, overrides or {}):
            extra = set(layer) - set(SECTIONS) - {"preset", "output_dir"}
            if extra:
                raise ValueError(f"unknown top-level keys: {sorted(extra)}")
            doc = _merge(doc, {k: v for k, v in layer.items() if k in SECTIONS})
        return cls.from_doc(doc, preset=preset, output_dir=output_dir)

    @classmethod
    def from_doc(cls, doc: dict, preset: str, output_dir: str | None = None) -> "RunConfig":
        wdoc = dict(doc.get("world", {}))
        _check_keys("world", wdoc, {f.name for f in dataclasses.fields(WorldConfig)})
        for k in ("image_size", "background_color"):
            if k in wdoc:
                wdoc[k] = tuple(wdoc[k])
        world = WorldConfig(**wdoc)

        ndoc = dict(doc.get("net", {}))
        _check_keys("net", ndoc, {f.name for f in dataclasses.fields(NetSpec)} - {"image_size", "s", "channels"})
        size = world.image_size[0]
        net = NetSpec.for_image(size, **{k: tuple(v) if isinstance(v, list) else v for k, v in ndoc.items()})

        tdoc = dict(doc.get("training", {}))
        training = TrainingConfig.from_json(tdoc)

        data = _merge(_DATA_DEFAULTS, doc.get("data", {}))
        _check_keys("data", data, set(_DATA_DEFAULTS))
        ev = _merge(_EVAL_DEFAULTS, doc.get("eval", {}))
        _check_keys("eval", ev, set(_EVAL_DEFAULTS))
        ev["window"] = [int(x) for x in ev["window"]]
        return cls(preset, world, net, training, data, ev, output_dir)

    def to_json(self) -> dict:
        return {
            "preset": self.preset,
            "output_dir": self.output_dir,
            "world": {
                "image_size": list(self.world.image_size),
                "background_color": list(self.world.background_color),
                "sequence_length": self.world.sequence_length,
                "seed": self.world.seed,
                "channels": self.world.channels,
            },
            "net": {k: v for k, v in self.net.to_json().items() if k not in ("image_size", "s", "channels")},
            "training": self.training.to_json(),
            "data": self.data,
            "eval": self.eval,
        }

    def write(self, directory: str | Path, name: str = "run_config.json") -> Path:
        p = Path(directory) / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return p


def load_config_file(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc
