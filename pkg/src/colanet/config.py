"""Plain-text ``key=value`` run configuration.

A run config covers the model architecture, the training settings, the
degradation to synthesize and the filesystem paths, under the ``model.``,
``train.``, ``degrade.`` and ``paths.`` prefixes.  Parsing starts from the
documented defaults, rejects unknown keys, and round-trips exactly:
``parse_run_config(serialize_run_config(c)) == c``.
"""

import dataclasses
from dataclasses import dataclass, field

from .degrade import DegradationSpec
from .errors import FormatError
from .network import ModelConfig, _format_value, _parse_value
from .training import TrainConfig


@dataclass
class Paths:
    data_dir: str = ""
    out_dir: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    degrade: DegradationSpec = field(default_factory=DegradationSpec)
    paths: Paths = field(default_factory=Paths)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "degrade": DegradationSpec,
    "paths": Paths,
}


def serialize_run_config(cfg):
    """Emit every key (defaults included) as sorted ``section.key=value``."""
    lines = []
    for section in sorted(_SECTIONS):
        obj = getattr(cfg, section)
        for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
            lines.append(
                f"{section}.{f.name}={_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_run_config(text):
    """Parse a config document; unknown keys raise a format error."""
    cfg = RunConfig()
    fields = {
        section: {f.name: f.type for f in dataclasses.fields(cls)}
        for section, cls in _SECTIONS.items()
    }
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise FormatError(f"line {lineno}: key {key!r} lacks a section")
        section, name = key.split(".", 1)
        if section not in fields or name not in fields[section]:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        try:
            parsed = _parse_value(value, fields[section][name])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad value for {key!r}: {exc}")
        setattr(getattr(cfg, section), name, parsed)
    cfg.model.validate()
    cfg.train.validate()
    cfg.degrade.validate()
    return cfg


def load_run_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def save_run_config(cfg, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(serialize_run_config(cfg))
