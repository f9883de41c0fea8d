"""Run configuration: INI-style key/value files with dotted command-line overrides."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Sequence

from .features import FeatureConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    n_blocks: int = 10
    repeats: int = 5
    objective: str = "mean"
    lowess_frac: float = 0.5
    lowess_iters: int = 2
    max_train_blocks: int = 0        # 0 = all of 1 .. n_blocks-1

    def __post_init__(self):
        if self.n_blocks < 2 or self.repeats < 1:
            raise ValueError("n_blocks must be >= 2 and repeats >= 1")
        if self.objective not in ("mean", "max"):
            raise ValueError("objective must be 'mean' or 'max'")


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 16
    n_slots: int = 2
    values_per_slot: int = 4
    n_actions: int = 3
    n_per_command: int = 10
    noise_level: float = 0.3
    dim: int = 123
    max_fillers: int = 1


@dataclass(frozen=True)
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _section_class(name: str):
    return {"features": FeatureConfig, "model": ModelConfig, "train": TrainConfig,
            "experiment": ExperimentConfig, "synth": SynthConfig}[name]


def _coerce(cls, key: str, raw: str):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[key]
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    if ftype == "bool":
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw.strip()


def load_config(path: str | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read ``[section] key = value`` text, then apply ``section.key=value`` overrides.

    Unknown sections or keys are errors.
    """
    values: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    if path:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for sec in parser.sections():
            if sec not in values:
                raise ValueError(f"unknown config section [{sec}]")
            values[sec].update(parser[sec])
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        sec, key = dotted.strip().split(".", 1)
        if sec not in values:
            raise ValueError(f"unknown config section {sec!r}")
        values[sec][key.strip()] = raw
    built = {}
    for sec, kv in values.items():
        cls = _section_class(sec)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown keys in [{sec}]: {', '.join(sorted(unknown))}")
        built[sec] = cls(**{k: _coerce(cls, k, v) for k, v in kv.items()})
    return RunConfig(**built)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        parser[sec] = {f.name: str(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
