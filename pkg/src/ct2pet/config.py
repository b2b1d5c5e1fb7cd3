"""Plain-text experiment configuration.

One file pins an experiment. Format::

    # comment
    [phantom]
    dims = 64, 64, 160
    n_patients = 20
    transfer.trunk = 0, 0, 1

    [train]
    total_epochs = 150
    patches_per_epoch = none

Values are integers, floats, ``true``/``false``, ``none`` or comma-separated
tuples of those. Keys must be fields of the section's dataclass. Command-line
``--set section.key=value`` overrides are applied on top.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Tuple, Union

from .phantom import DEFAULT_TRANSFER, LINEAR_TRANSFER, PhantomConfig
from .training import TrainConfig
from .volume import DISTRICT_IDS


class ConfigFileError(ValueError):
    pass


SECTIONS = {"phantom": PhantomConfig, "train": TrainConfig}


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(parse_value(part) for part in text.split(",") if part.strip())
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low == "none":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_text(text: str, source: str = "<config>") -> Dict[str, Dict[str, Tuple[object, str]]]:
    """Section -> key -> (value, location) without validation against the dataclasses."""
    out: Dict[str, Dict[str, Tuple[object, str]]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        loc = f"{source}:{lineno}"
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigFileError(f"{loc}: malformed section header {line!r}")
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise ConfigFileError(f"{loc}: unknown section [{section}]; expected one of "
                                      f"{', '.join(SECTIONS)}")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigFileError(f"{loc}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigFileError(f"{loc}: key outside of any [section]")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigFileError(f"{loc}: empty key")
        out[section][key] = (parse_value(value), loc)
    return out


def _coerce(cls, name: str, value, loc: str):
    f = {f.name: f for f in dataclasses.fields(cls)}.get(name)
    if f is None:
        raise ConfigFileError(f"{loc}: unknown key {name!r} in [{_section_of(cls)}]")
    default = f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigFileError(f"{loc}: {name} must be true or false, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigFileError(f"{loc}: {name} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"{loc}: {name} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, tuple):
        if not isinstance(value, tuple):
            raise ConfigFileError(f"{loc}: {name} must be a comma-separated list, got {value!r}")
    return value


def _section_of(cls) -> str:
    return next(k for k, v in SECTIONS.items() if v is cls)


def _build(cls, entries: Dict[str, Tuple[object, str]]):
    kwargs = {}
    transfer = list(DEFAULT_TRANSFER)
    for key, (value, loc) in entries.items():
        if cls is PhantomConfig and key == "transfer":
            if value not in ("default", "linear"):
                raise ConfigFileError(f"{loc}: transfer must be 'default' or 'linear', got {value!r}")
            transfer = list(DEFAULT_TRANSFER if value == "default" else LINEAR_TRANSFER)
            kwargs["transfer"] = tuple(transfer)
            continue
        if cls is PhantomConfig and key.startswith("transfer."):
            district = DISTRICT_IDS.get(key.split(".", 1)[1])
            if district is None:
                raise ConfigFileError(f"{loc}: unknown district in {key!r}")
            if not (isinstance(value, tuple) and len(value) == 3
                    and all(isinstance(v, (int, float)) for v in value)):
                raise ConfigFileError(f"{loc}: {key} needs three coefficients c0, c1, c2")
            transfer[district - 1] = tuple(float(v) for v in value)
            kwargs["transfer"] = tuple(transfer)
            continue
        kwargs[key] = _coerce(cls, key, value, loc)
    return cls(**kwargs)


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def as_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                if f.name == "transfer":
                    for d, coeffs in zip(DISTRICT_IDS, v):
                        lines.append(f"transfer.{d} = {_fmt(coeffs)}")
                    continue
                lines.append(f"{f.name} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def load_config(path: Union[str, os.PathLike, None] = None,
                overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read ``path`` (defaults if None) and apply ``section.key=value`` overrides."""
    entries: Dict[str, Dict[str, Tuple[object, str]]] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigFileError(f"config file {p} not found")
        entries = parse_text(p.read_text(), str(p))
    for i, item in enumerate(overrides, 1):
        loc = f"--set #{i}"
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigFileError(f"{loc}: expected section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if section not in SECTIONS:
            raise ConfigFileError(f"{loc}: unknown section {section!r}")
        entries.setdefault(section, {})[key.strip()] = (parse_value(value), loc)
    built = {name: _build(cls, entries.get(name, {})) for name, cls in SECTIONS.items()}
    return ExperimentConfig(**built)
