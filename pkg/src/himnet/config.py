"""Run configuration: INI-style sections, validated against a fixed schema.

Command-line overrides take the form ``section.key=value`` and win over the file.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from .errors import ConfigError
from .model import ABLATIONS, HimNetConfig
from .training import TRAIN_PRESETS, TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _names(text: str) -> tuple:
    return tuple(sorted(t.strip() for t in text.split(",") if t.strip()))


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list, frozenset, set)):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "path": (str, ""),
        "format": (str, ""),
        "ratios": (_floats, (0.7, 0.1, 0.2)),
        "in_steps": (int, 12),
        "out_steps": (int, 12),
        "mask_zeros": (str, "auto"),
    },
    "model": {
        "hidden_dim": (int, 64),
        "order": (int, 1),
        "d_tod": (int, 8),
        "d_dow": (int, 8),
        "d_s": (int, 16),
        "d_st": (int, 16),
        "meta_bias": (_bool, True),
        "ablation": (_names, ()),
    },
    "train": {
        "preset": (str, ""),
        "lr": (float, 1e-3),
        "batch_size": (int, 16),
        "max_epochs": (int, 200),
        "patience": (int, 20),
        "milestones": (_ints, (30, 40)),
        "lr_decay": (float, 0.1),
        "weight_decay": (float, 5e-4),
        "adam_eps": (float, 1e-3),
        "grad_clip": (float, 5.0),
        "loss": (str, "mae"),
        "huber_delta": (float, 1.0),
        "seed": (int, 0),
        "eval_batch_size": (int, 64),
    },
    "run": {
        "output_dir": (str, "runs/himnet"),
        "threads": (int, 0),
    },
    "synthetic": {
        "n_nodes": (int, 20),
        "n_days": (int, 14),
        "n_spatial_clusters": (int, 2),
        "n_regimes": (int, 2),
        "noise_std": (float, 0.1),
        "seed": (int, 0),
        "step_minutes": (int, 5),
        "cycles_per_day": (float, 4.0),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                  for s, keys in SCHEMA.items()})
    # Keys that were set explicitly (file or override), per section.
    explicit: dict = field(default_factory=lambda: {s: set() for s in SCHEMA})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]; known: {', '.join(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {', '.join(SCHEMA[section])}")
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
        self.explicit[section].add(key)

    def override(self, assignments: Iterable[str]) -> None:
        for item in assignments:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.split(".", 1)
            self.set(section.strip(), key.strip(), value.strip())

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in self.values.items():
            cp[section] = {k: _fmt(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    # -- derived objects ---------------------------------------------------

    def train_config(self, synthetic: bool = False) -> TrainConfig:
        t = dict(self.values["train"])
        preset = t.pop("preset")
        t.pop("eval_batch_size")
        if preset:
            if preset.upper() not in TRAIN_PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; known: {', '.join(TRAIN_PRESETS)}")
            for k, v in TRAIN_PRESETS[preset.upper()].items():
                if k not in self.explicit["train"]:
                    t[k] = v
        mask = self.values["data"]["mask_zeros"].lower()
        if mask == "auto":
            t["mask_zeros"] = not synthetic
        else:
            try:
                t["mask_zeros"] = _bool(mask)
            except ValueError:
                raise ConfigError(f"[data] mask_zeros must be auto/true/false, got {mask!r}") from None
        return TrainConfig(**t)

    def model_config(self, num_nodes: int, steps_per_day: int) -> HimNetConfig:
        m = dict(self.values["model"])
        bad = set(m["ablation"]) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation {sorted(bad)}; choose from {', '.join(ABLATIONS)}")
        return HimNetConfig(num_nodes=num_nodes, in_steps=self.values["data"]["in_steps"],
                            out_steps=self.values["data"]["out_steps"], steps_per_day=steps_per_day,
                            hidden_dim=m["hidden_dim"], order=m["order"], d_tod=m["d_tod"], d_dow=m["d_dow"],
                            d_s=m["d_s"], d_st=m["d_st"], meta_bias=m["meta_bias"],
                            ablation=frozenset(m["ablation"]))


def load_run_config(path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        cp = configparser.ConfigParser()
        try:
            cp.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, value in cp[section].items():
                cfg.set(section, key, value)
    cfg.override(overrides)
    return cfg
