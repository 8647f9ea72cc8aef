"""INI run configuration: one section per module, every default overridable."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .errors import ConfigError
from .hierarchy import EmbeddingProvider
from .network import EncoderConfig
from .sampling import SamplerConfig
from .training import TrainConfig

SEED_ENV = "CITYSEG_SEED"


@dataclass(frozen=True)
class EmbeddingConfig:
    mode: str = "hashed"
    dim: int = 32
    seed: int = 0
    path: str = ""

    def provider(self) -> EmbeddingProvider:
        return EmbeddingProvider(self.mode, self.dim, self.seed, self.path or None)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    graph_layers: int = -1  # -1: use the hierarchy depth
    snapshot_every: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)


_SECTIONS = {"sampler": SamplerConfig, "encoder": EncoderConfig, "train": TrainConfig,
             "embedding": EmbeddingConfig}
_RUN_KEYS = ("seed", "graph_layers", "snapshot_every")


def _coerce(cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} for [{cls.__name__}]")
    f = fields[key]
    default = f.default if f.default is not dataclasses.MISSING else None
    kind = type(default) if default is not None else str
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config(text: str = "", env: Optional[Mapping[str, str]] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for sec in cp.sections():
        if sec not in _SECTIONS and sec != "run":
            raise ConfigError(f"unknown config section [{sec}]")
    run = {}
    if cp.has_section("run"):
        for k, v in cp.items("run"):
            if k not in _RUN_KEYS:
                raise ConfigError(f"unknown key {k!r} for [run]")
            run[k] = _coerce(RunConfig, k, v)
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            run["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    seed = run.get("seed", 0)
    parts = {}
    for sec, cls in _SECTIONS.items():
        vals = {k: _coerce(cls, k, v) for k, v in cp.items(sec)} if cp.has_section(sec) else {}
        if sec in ("sampler", "train"):
            vals.setdefault("seed", seed)  # the run seed drives sampling and shuffling
        try:
            parts[sec] = cls(**vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{sec}]: {exc}") from None
    return RunConfig(**run, **parts)


def load_config(path=None, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, env)


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]"] + [f"{k} = {getattr(cfg, k)}" for k in _RUN_KEYS]
    for sec in _SECTIONS:
        lines.append(f"\n[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            v = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
