"""Experiment configuration: INI-style ``key = value`` sections, every default here.

Sections map one-to-one onto the dataclasses below::

    [data]        GenConfig fields (seed comes from the run, not the file)
    [model]       hidden, embed
    [train]       optimizer / schedule / epochs
    [objectives]  lambda_oe, lambda_energy, temperature, m_in, m_out
    [alm]         alpha, tau, tau_factor, eta_lambda, beta_max, beta_growth, beta_init
    [scoring]     knn_k, hist_bins
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .data import GenConfig

METHODS = ("e1", "e2", "e3", "e4", "e5a", "e5b", "e6")
FINETUNE_METHODS = ("e4", "e5a", "e5b", "e6")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    embed: int = 16


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 25
    batch_size: int = 32
    warmup_steps_ref: int = 4000
    ref_train_size: int = 8527
    finetune_lr_factor: float = 10.0
    finetune_epochs: int = 25
    classification_warmup_epochs: int = 2
    collapse_eps: float = 0.05
    stall_epochs: int = 3


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_oe: float = 0.5
    lambda_energy: float = 2.0
    temperature: float = 1.0
    m_in: float | None = None
    m_out: float | None = None


@dataclass(frozen=True)
class AlmSettings:
    alpha: float = 0.1
    tau: float | None = None       # None: tau_factor x E1 validation CE
    tau_factor: float = 1.1
    eta_lambda: float = 0.001
    beta_max: float | None = 5.0   # None: uncapped
    beta_growth: float = 2.0
    beta_init: float = 0.5


@dataclass(frozen=True)
class ScoringConfig:
    knn_k: int = 5
    hist_bins: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "e1"
    seed: int = 0
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    alm: AlmSettings = field(default_factory=AlmSettings)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.train.lr <= 0:
            raise ValueError("lr must be positive")

    def with_run(self, method: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        method = self.method if method is None else method
        seed = self.seed if seed is None else seed
        return dataclasses.replace(self, method=method, seed=seed,
                                   data=dataclasses.replace(self.data, seed=seed))

    def override(self, dotted: str, value) -> "ExperimentConfig":
        """Return a copy with ``section.key`` replaced (value may be a string)."""
        section, key = dotted.split(".", 1)
        sub = getattr(self, section)
        ftype = _field_types(type(sub))[key]
        if isinstance(value, str):
            value = _coerce(value, ftype)
        return dataclasses.replace(self, **{section: dataclasses.replace(sub, **{key: value})})

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "data": GenConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "objectives": ObjectiveConfig,
    "alm": AlmSettings,
    "scoring": ScoringConfig,
}


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(text: str, ftype):
    text = text.strip()
    args = typing.get_args(ftype)
    origin = typing.get_origin(ftype)
    if type(None) in args:
        if text.lower() in ("none", ""):
            return None
        ftype = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(ftype), typing.get_args(ftype)
    if origin is tuple:
        inner = args[0]
        return tuple(inner(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip())
    if ftype is bool:
        return text.lower() in ("1", "true", "yes", "on")
    return ftype(text)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == "experiment":
            for key, text in parser.items(section):
                if key not in ("method", "seed"):
                    raise ValueError(f"[experiment]: unknown key {key!r}")
                cfg = dataclasses.replace(cfg, **{key: int(text) if key == "seed" else text.strip()})
            continue
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        types = _field_types(_SECTIONS[section])
        for key, text in parser.items(section):
            if key not in types or (section == "data" and key == "seed"):
                raise ValueError(f"[{section}]: unknown key {key!r}")
            cfg = cfg.override(f"{section}.{key}", text)
    return cfg.with_run()


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` in the file format; ``load_config`` reads it back identically."""
    lines = ["[experiment]", f"method = {cfg.method}", f"seed = {cfg.seed}", ""]
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            if section == "data" and f.name == "seed":
                continue
            v = getattr(getattr(cfg, section), f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
