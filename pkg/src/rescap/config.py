"""Run configuration with flags > environment > config file precedence.

A config file is plain JSON whose keys match :class:`RunConfig` field names.
Environment variables use the ``RESCAP_`` prefix and upper-cased field names
(``RESCAP_SEED=7``); list fields are comma-separated, dict fields are JSON.
The seed is mandatory: every pipeline id and every stub draw flows from it.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .pipeline import DEFAULT_EXPORT_TARGET, DEFAULT_WORD_TARGETS, FINETUNE_EXPORT_LIMIT
from .util import deterministic_uuid

ENV_PREFIX = "RESCAP_"

DEFAULT_ZOOM_RATIOS = (4.0, 6.0, 9.0, 16.0)
DEFAULT_PORT = 8790
DEFAULT_LEASE_TTL = 600


@dataclass
class RunConfig:
    seed: int
    run_id: str | None = None
    run_root: str = "runs"
    run_dir: str | None = None
    word_targets: tuple[int, ...] = DEFAULT_WORD_TARGETS
    zoom_ratios: tuple[float, ...] = DEFAULT_ZOOM_RATIOS
    degraders: tuple[str, ...] = ("stub",)
    backends: dict = field(default_factory=lambda: {"stub": "stub"})
    captioner_endpoint: str | None = None
    variant: str = "ours"
    perturb_ratio: float = 0.5
    export_target: int = DEFAULT_EXPORT_TARGET
    finetune_limit: int = FINETUNE_EXPORT_LIMIT
    holdout_zooms: dict = field(default_factory=dict)
    # Share of HQ images routed to a classical degrader when mixing degraded
    # sources; a free choice, kept configurable.
    realesrgan_mix: float = 0.2
    harmful_scope: str = "sentence"
    port: int = DEFAULT_PORT
    lease_ttl: int = DEFAULT_LEASE_TTL
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)

    def resolved_run_id(self) -> str:
        return self.run_id or deterministic_uuid("run", self.seed)

    def resolved_run_dir(self) -> Path:
        if self.run_dir:
            return Path(self.run_dir)
        return Path(self.run_root) / self.resolved_run_id()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["word_targets"] = list(self.word_targets)
        d["zoom_ratios"] = list(self.zoom_ratios)
        d["degraders"] = list(self.degraders)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

_INT_FIELDS = {"seed", "export_target", "finetune_limit", "port", "lease_ttl", "jobs"}
_FLOAT_FIELDS = {"perturb_ratio", "realesrgan_mix"}
_INT_TUPLE_FIELDS = {"word_targets"}
_FLOAT_TUPLE_FIELDS = {"zoom_ratios"}
_STR_TUPLE_FIELDS = {"degraders"}
_DICT_FIELDS = {"backends", "holdout_zooms"}


def _parse_value(name: str, raw):
    try:
        if name in _INT_FIELDS:
            return int(raw)
        if name in _FLOAT_FIELDS:
            return float(raw)
        if name in _INT_TUPLE_FIELDS:
            items = raw.split(",") if isinstance(raw, str) else raw
            return tuple(int(x) for x in items)
        if name in _FLOAT_TUPLE_FIELDS:
            items = raw.split(",") if isinstance(raw, str) else raw
            return tuple(float(x) for x in items)
        if name in _STR_TUPLE_FIELDS:
            items = raw.split(",") if isinstance(raw, str) else raw
            return tuple(str(x).strip() for x in items)
        if name in _DICT_FIELDS:
            value = json.loads(raw) if isinstance(raw, str) else raw
            if not isinstance(value, dict):
                raise ValueError("expected an object")
            return dict(value)
        return raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r} ({exc})") from exc


def load_config(
    config_path: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    **overrides,
) -> RunConfig:
    """Merge file, environment, and flag values into a validated RunConfig.

    ``overrides`` are flag values; ``None`` entries are treated as unset.
    Unknown keys in the file or overrides are configuration errors.
    """
    env = os.environ if env is None else env
    values: dict = {}

    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, raw in file_values.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, raw)

    for name in _FIELDS:
        env_key = ENV_PREFIX + name.upper()
        if env_key in env:
            values[name] = _parse_value(name, env[env_key])

    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if raw is not None:
            values[key] = _parse_value(key, raw)

    if "seed" not in values:
        raise ConfigError("seed is mandatory (flag --seed, RESCAP_SEED, or config file)")

    config = RunConfig(**values)
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    if config.port < 1 or config.port > 65535:
        raise ConfigError(f"port out of range: {config.port}")
    if config.lease_ttl < 1:
        raise ConfigError(f"lease_ttl must be positive: {config.lease_ttl}")
    if not 0.0 <= config.perturb_ratio <= 1.0:
        raise ConfigError(f"perturb_ratio must be in [0, 1]: {config.perturb_ratio}")
    if not 0.0 <= config.realesrgan_mix <= 1.0:
        raise ConfigError(f"realesrgan_mix must be in [0, 1]: {config.realesrgan_mix}")
    if config.jobs < 1:
        raise ConfigError(f"jobs must be >= 1: {config.jobs}")
    if config.harmful_scope not in ("phrase", "clause", "sentence"):
        raise ConfigError(f"harmful_scope must be phrase|clause|sentence: {config.harmful_scope}")


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
