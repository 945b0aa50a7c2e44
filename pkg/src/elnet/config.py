"""Layered configuration: defaults, then a TOML/JSON file, then flag overrides.

A config file carries up to five sections — [pipeline], [train], [loss],
[lqe], [model] — with keys matching the corresponding dataclass fields
("lambda" is accepted for the loss mixing weight). Later layers win key by
key; validation failures name the section and key that caused them.
"""

from __future__ import annotations

import dataclasses
import json

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from .network import ModelConfig
from .pipeline import PipelineConfig
from .quality import LqeConfig
from .training import LossConfig, TrainConfig

__all__ = ["load_config", "load_config_file", "merge_sections", "effective_config", "SECTION_TYPES"]

SECTION_TYPES = {
    "train": TrainConfig,
    "loss": LossConfig,
    "lqe": LqeConfig,
    "model": ModelConfig,
}

# keys of [pipeline] that belong to PipelineConfig itself (the rest are sections)
_PIPELINE_FIELDS = {
    f.name for f in dataclasses.fields(PipelineConfig) if f.name not in SECTION_TYPES
}

_TUPLE_KEYS = {
    "alpha",
    "beta",
    "stage_channels",
    "checkpoint_epochs",
    "ensemble_checkpoints",
    "blob_count",
    "ribbon_count",
    "radius_range",
}

_ALIASES = {("loss", "lambda"): "lam"}


def load_config_file(path: str) -> dict:
    """Parse a TOML (or JSON) config file into a dict of sections."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".json"):
        data = json.loads(raw.decode("utf-8"))
    else:
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"{path}: not valid TOML: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a table of sections")
    known = set(SECTION_TYPES) | {"pipeline"}
    for section, body in data.items():
        if section not in known:
            raise ValueError(f"{path}: unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ValueError(f"{path}: section [{section}] must be a table")
    return data


def merge_sections(*layers: dict | None) -> dict:
    """Key-by-key merge of section dicts; later layers take precedence."""
    out: dict[str, dict] = {}
    for layer in layers:
        if not layer:
            continue
        for section, body in layer.items():
            dest = out.setdefault(section, {})
            for key, value in body.items():
                if value is not None:
                    dest[key] = value
    return out


def _build_section(section: str, cls, body: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in body.items():
        name = _ALIASES.get((section, key), key)
        if name not in fields:
            raise ValueError(f"unknown config key {section}.{key}")
        if name in _TUPLE_KEYS and isinstance(value, (list, tuple)):
            value = tuple(value)
        kw[name] = value
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"invalid [{section}] config: {exc}") from exc


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Resolve defaults <- file <- overrides into a validated PipelineConfig.

    `overrides` uses the same section/key layout as the file; None values
    inside it are ignored so unset flags never mask file settings.
    """
    sections = merge_sections(load_config_file(path) if path else None, overrides)
    built = {
        name: _build_section(name, cls, sections.get(name, {}))
        for name, cls in SECTION_TYPES.items()
    }
    pipe_body = sections.get("pipeline", {})
    for key in pipe_body:
        if key not in _PIPELINE_FIELDS:
            raise ValueError(f"unknown config key pipeline.{key}")
    if "ensemble_checkpoints" in pipe_body:
        pipe_body = dict(pipe_body)
        pipe_body["ensemble_checkpoints"] = tuple(pipe_body["ensemble_checkpoints"])
    try:
        return PipelineConfig(**pipe_body, **built)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"invalid [pipeline] config: {exc}") from exc


def effective_config(cfg: PipelineConfig) -> dict:
    """The fully resolved settings, shaped like the config file."""
    return {
        "pipeline": {
            "mode": cfg.mode,
            "loop_count": cfg.loop_count,
            "seed": cfg.seed,
            "ensemble_checkpoints": list(cfg.ensemble_checkpoints),
            "refine_epochs_fraction": cfg.refine_epochs_fraction,
            "cold_start_refine": cfg.cold_start_refine,
        },
        "train": cfg.train.to_json(),
        "loss": cfg.loss.to_json(),
        "lqe": cfg.lqe.to_json(),
        "model": cfg.model.to_json(),
    }
