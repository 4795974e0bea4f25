"""Run configuration: flat dotted keys over the per-module config dataclasses.

A config file is a JSON object such as {"trainer.lr": 0.002, "mc.eval_samples": 200}.
Every field of every section is also a command-line flag --<section>.<field>;
flags override file values. The merged result is what lands in the manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import UsageError
from .likelihood import MCConfig
from .model import ModelConfig
from .predictor import PredictConfig
from .sampler import ThinningConfig
from .synthgen import SynthConfig
from .trainer import AblationPlan, TrainConfig

logger = logging.getLogger(__name__)

SECTIONS: dict[str, type] = {
    "model": ModelConfig,
    "trainer": TrainConfig,
    "mc": MCConfig,
    "predict": PredictConfig,
    "thinning": ThinningConfig,
    "synth": SynthConfig,
    "ablation": AblationPlan,
}

MANIFEST_NAME = "manifest.json"


def _field_types(cls: type) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.init}


def all_keys() -> dict[str, Any]:
    """Every dotted key with its annotated type."""
    return {f"{section}.{name}": tp for section, cls in SECTIONS.items() for name, tp in _field_types(cls).items()}


def _scalar(tp: Any) -> Any:
    """The element type behind Literal / tuple / Optional annotations."""
    origin = typing.get_origin(tp)
    if origin is typing.Literal:
        return str
    if origin in (tuple, list):
        return _scalar(typing.get_args(tp)[0])
    if origin in (typing.Union, types.UnionType):
        return _scalar(next(a for a in typing.get_args(tp) if a is not type(None)))
    return tp


def coerce(key: str, raw: Any, tp: Any) -> Any:
    """Convert a file or flag value to the annotated field type."""
    origin = typing.get_origin(tp)
    try:
        if origin in (tuple, list):
            items = raw.split(",") if isinstance(raw, str) else list(raw)
            return tuple(coerce(key, item, _scalar(tp)) for item in items)
        if origin is typing.Literal:
            allowed = typing.get_args(tp)
            if raw not in allowed:
                raise UsageError(f"{key} must be one of {allowed}, got {raw!r}")
            return raw
        base = _scalar(tp)
        if base is bool:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes"):
                return True
            if str(raw).lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if base is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if base is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid value for {key}: {raw!r}") from exc


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return raw


@dataclass
class RunConfig:
    """The merged configuration of one run: one instance per section."""

    sections: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, section: str) -> Any:
        return self.sections[section]

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section, obj in self.sections.items():
            for name, value in dataclasses.asdict(obj).items():
                out[f"{section}.{name}"] = list(value) if isinstance(value, tuple) else value
        return dict(sorted(out.items()))

    def replace(self, section: str, **changes: Any) -> None:
        self.sections[section] = dataclasses.replace(self.sections[section], **changes)


def build_config(file_values: dict[str, Any], overrides: dict[str, Any]) -> RunConfig:
    """Merge file values and flag overrides into validated section objects."""
    known = all_keys()
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = sorted(set(merged) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    per_section: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, raw in merged.items():
        section, name = key.split(".", 1)
        per_section[section][name] = coerce(key, raw, known[key])
    built: dict[str, Any] = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**per_section[section])
        except ValueError as exc:
            raise UsageError(f"invalid {section} config: {exc}") from exc
    return RunConfig(built)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def timestamp() -> int:
    """$SOURCE_DATE_EPOCH when set, else the current time."""
    raw = os.environ.get("SOURCE_DATE_EPOCH")
    return int(raw) if raw else int(time.time())


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    version: str
    t_max: float | None = None
    datasets: dict[str, str] = field(default_factory=dict)
    """File name -> sha256."""

    extra: dict[str, Any] = field(default_factory=dict)
    created: int = field(default_factory=timestamp)

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))
