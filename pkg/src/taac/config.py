"""Sectioned ``key = value`` run configuration.

Example::

    [phase]
    phase = 3
    epochs = 10

    [encryption]
    key = key.txt
    strength = 10

Lines starting with ``#`` or ``;`` are comments. A repeated key keeps its
last value and emits a warning.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, FormatError


@dataclass
class PhaseSection:
    phase: int = 1
    batch_size: int = 32
    epochs: int = 10
    lambda_ortho: float = 10.0
    lambda_recon: float = 10.0
    lambda_cls: float = 1.0
    label_smoothing: float = 0.1
    threshold: float = 0.4
    warm_start: str = "phase2"


@dataclass
class OptimizerSection:
    lr: float = 1e-4
    sdae_lr: float | None = None
    weight_decay: float = 0.01


@dataclass
class DpSection:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float | None = None
    epsilon: float | None = None
    delta: float | None = None


@dataclass
class EncryptionSection:
    key: str | None = None
    strength: int | None = None


@dataclass
class DataSection:
    corpus: str | None = None
    seed: int = 0
    split: int = 0
    n_splits: int = 3


@dataclass
class RunConfig:
    phase: PhaseSection = field(default_factory=PhaseSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    dp: DpSection = field(default_factory=DpSection)
    encryption: EncryptionSection = field(default_factory=EncryptionSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def set(self, section: str, key: str, value, where: str = "override"):
        sec = getattr(self, section, None)
        if sec is None or section not in _SECTIONS:
            raise ConfigError(f"{where}: unknown section [{section}]")
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        setattr(sec, key, _coerce(value, types[key], where))


_SECTIONS = ("phase", "optimizer", "dp", "encryption", "data")


def _coerce(value, typ, where):
    if not isinstance(value, str):
        return value
    v = value.strip()
    optional = "None" in typ
    if optional and v.lower() in ("", "none", "null"):
        return None
    base = typ.replace("| None", "").strip()
    try:
        if base == "bool":
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {v!r}")
        if base == "int":
            return int(v)
        if base == "float":
            return float(v)
    except ValueError as e:
        raise FormatError(f"{where}: {e}") from e
    return v


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cfg = RunConfig()
    section = None
    seen = set()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        where = f"{source}:{n}"
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise FormatError(f"{where}: malformed section header {raw!r}")
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise FormatError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise FormatError(f"{where}: expected 'key = value', got {raw!r}")
        if section is None:
            raise FormatError(f"{where}: key outside any section")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{where}: empty key")
        if (section, key) in seen:
            warnings.warn(f"{where}: duplicate key {key!r} in [{section}]; last value wins", stacklevel=2)
        seen.add((section, key))
        try:
            cfg.set(section, key, value, where)
        except ConfigError as e:
            raise FormatError(str(e)) from e
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e}") from e
    return parse_config(text, str(p))
