"""Run configuration read from a sectioned ``key = value`` file.

Sections map onto the library dataclasses::

    [run]          seed
    [model]        ModelConfig fields (its seed comes from [run])
    [train]        TrainConfig fields
    [data]         SyntheticSpec fields (its seed comes from [run])
    [spectrogram]  SpectrogramConfig fields
    [paths]        data_dir, out_dir

Every field defaults to the library default.  Unknown sections or keys and
malformed values raise :class:`ConfigError` before any work starts.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from fbpfusion.data import SyntheticSpec
from fbpfusion.dsp import SpectrogramConfig
from fbpfusion.errors import ConfigError
from fbpfusion.model import ModelConfig, TrainConfig


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "out"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.data.sample_rate != self.spectrogram.sample_rate:
            raise ConfigError(
                f"data.sample_rate={self.data.sample_rate} differs from spectrogram.sample_rate="
                f"{self.spectrogram.sample_rate}"
            )

    def with_overrides(self, **changes) -> "RunConfig":
        """Copy with changes applied to ``seed`` or to ``section.key`` entries, re-validated."""
        sections = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        seed = changes.pop("seed", None)
        seed = self.seed if seed is None else seed
        for dotted, value in changes.items():
            section, _, key = dotted.partition(".")
            if section not in sections or key not in sections[section]:
                raise ConfigError(f"unknown setting {dotted!r}")
            sections[section][key] = value
        return _build(seed, sections)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": SyntheticSpec,
    "spectrogram": SpectrogramConfig,
    "paths": PathsConfig,
}
# fields set from [run] rather than from their own section
_SEEDED = {"model", "data"}


def _fields(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    skip = {"seed"} if cls in (ModelConfig, SyntheticSpec) else set()
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in skip}


def _convert(section: str, key: str, raw: str, typ) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _build(seed: int, sections: Dict[str, Dict[str, Any]]) -> RunConfig:
    built = {}
    for name, cls in _SECTIONS.items():
        values = dict(sections.get(name, {}))
        if name in _SEEDED:
            values["seed"] = seed
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return RunConfig(seed=seed, **built)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are reported as written
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    seed = 0
    sections: Dict[str, Dict[str, Any]] = {}
    for name in parser.sections():
        if name == "run":
            for key, raw in parser.items("run"):
                if key != "seed":
                    raise ConfigError(f"{source}: unknown key {key!r} in [run]")
                seed = _convert("run", key, raw, int)
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        known = _fields(_SECTIONS[name])
        sections[name] = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            sections[name][key] = _convert(name, key, raw, known[key])
    return _build(seed, sections)


def load_config(path: Optional[str | Path] = None) -> RunConfig:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the file format; ``parse_config`` inverts it."""
    lines = ["[run]", f"seed = {cfg.seed}"]
    for name in _SECTIONS:
        lines += ["", f"[{name}]"]
        obj = getattr(cfg, name)
        for key in _fields(type(obj)):
            lines.append(f"{key} = {getattr(obj, key)}")
    return "\n".join(lines) + "\n"
