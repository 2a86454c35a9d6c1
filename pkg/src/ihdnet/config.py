"""Run configuration files: ``section.key: value`` lines, ``#`` comments.

Sections are ``model``, ``train``, ``synth``, ``ssl`` and ``data``. Unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ConfigError, ModelConfig, _format_value, config_from_mapping
from .ssl import SslConfig
from .synth import SynthSpec
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    fractions: tuple = (0.7, 0.1, 0.2)
    air_threshold: float = -500.0
    opening_radius: int = 3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    ssl: SslConfig = field(default_factory=SslConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("model", "train", "synth", "ssl", "data")

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed governs the run: data generation and training both derive from it."""
        synth = replace(self.synth, seed=seed)
        return RunConfig(self.model, replace(self.train, seed=seed), synth, self.ssl, self.data)


def parse_lines(text: str) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {s: {} for s in RunConfig.SECTIONS}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"line {n}: expected 'section.key: value'")
        section, dot, name = key.strip().partition(".")
        if not dot or section not in out:
            raise ConfigError(f"line {n}: unknown section in key {key.strip()!r}")
        out[section][name] = value.strip()
    return out


def _build(cls, mapping: dict[str, str], base=None):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key {unknown[0]!r}")
    if base is None:
        return config_from_mapping(cls, mapping)
    parsed = config_from_mapping(cls, mapping)
    return replace(base, **{k: getattr(parsed, k) for k in mapping})


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file, then ``section.key`` overrides."""
    sections = parse_lines(Path(path).read_text()) if path else {s: {} for s in RunConfig.SECTIONS}
    for key, value in (overrides or {}).items():
        extra = parse_lines(f"{key}: {value}")
        for s, kv in extra.items():
            sections[s].update(kv)
    base = RunConfig()
    try:
        return RunConfig(
            model=_build(ModelConfig, sections["model"], base.model),
            train=_build(TrainConfig, sections["train"]),
            synth=_build(SynthSpec, sections["synth"]),
            ssl=_build(SslConfig, sections["ssl"]),
            data=_build(DataConfig, sections["data"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in RunConfig.SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name}: {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
