"""Named fine-tuning schedules shipped as JSON files."""
from __future__ import annotations

import json
from importlib import resources

from ..engine import ReconstructionSchedule
from ..errors import ConfigurationError

CONFIG_VERSION = "dgp-cfg/1"


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))


def preset_dict(name: str) -> dict:
    names = preset_names()
    if name not in names:
        raise ConfigurationError(f"unknown preset {name!r}; valid presets: {', '.join(names)}")
    return json.loads(resources.files(__name__).joinpath(f"{name}.json").read_text())


def load_preset(name: str) -> ReconstructionSchedule:
    return schedule_from_dict(preset_dict(name))


def schedule_from_dict(d: dict) -> ReconstructionSchedule:
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigurationError(f"unsupported schedule version {version!r}, expected {CONFIG_VERSION!r}")
    return ReconstructionSchedule.from_dict(d)
