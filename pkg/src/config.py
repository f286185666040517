"""
Configuration loading for panodepth.

This module provides:
1. RuntimeSettings - seed and worker count (explicit > environment > default)
2. Loss configs - TOML/JSON files, ablation presets, schema checks by dotted field
3. Pipeline configs - TOML [pipeline] table plus an ordered [[stage]] array
"""

import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from curation import MixInput, PipelineConfig, StageConfig, validate_pipeline_config
from errors import ConfigError
from losses import TERM_NAMES, LossConfig, LossWeights

LOGGER = logging.getLogger(__name__)

ENV_SEED = "PANODEPTH_SEED"
ENV_THREADS = "PANODEPTH_THREADS"


# ==============================================================================
# RUNTIME SETTINGS
# ==============================================================================

def _env_int(name: str, minimum: int) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(name, f"expected an integer, got {raw!r}")
    if value < minimum:
        raise ConfigError(name, f"must be >= {minimum}, got {value}")
    return value


@dataclass
class RuntimeSettings:
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads", f"must be >= 1, got {self.threads}")

    @classmethod
    def resolve(cls, seed: Optional[int] = None, threads: Optional[int] = None) -> "RuntimeSettings":
        """Explicit values win, then PANODEPTH_SEED / PANODEPTH_THREADS, then defaults."""
        if seed is None:
            seed = _env_int(ENV_SEED, 0)
        if threads is None:
            threads = _env_int(ENV_THREADS, 1)
        return cls(seed=0 if seed is None else seed, threads=1 if threads is None else threads)


# ==============================================================================
# SCHEMA HELPERS
# ==============================================================================

def _read_mapping(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(str(path), "file not found")
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text())
        else:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(str(path), f"cannot parse: {e}")
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a table")
    return data


def _check_type(value, expected, field_name: str):
    """Type check that keeps bool out of numeric fields and widens int to float."""
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(field_name, f"expected a number, got {type(value).__name__}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(field_name, f"expected an integer, got {type(value).__name__}")
        return value
    if not isinstance(value, expected):
        raise ConfigError(field_name, f"expected {expected.__name__}, got {type(value).__name__}")
    return value


def _check_keys(data: dict, allowed, prefix: str = "") -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown key")


# ==============================================================================
# LOSS CONFIG
# ==============================================================================

LOSS_PRESETS: Dict[str, Dict[str, Any]] = {
    "silog-only": {
        "weights": {"silog": 1.0, "df": 0.0, "grad": 0.0, "normal": 0.0, "pts": 0.0, "mask": 2.0},
        "use_distortion": False,
    },
    "distortion": {
        "weights": {"silog": 1.0, "df": 0.0, "grad": 0.0, "normal": 0.0, "pts": 0.0, "mask": 2.0},
        "use_distortion": True,
    },
    "geometry": {
        "weights": {"silog": 1.0, "df": 0.0, "grad": 0.0, "normal": 2.0, "pts": 2.0, "mask": 2.0},
        "use_distortion": True,
    },
    "full": {
        "weights": LossWeights().to_dict(),
        "use_distortion": True,
    },
}

_LOSS_FIELDS = {
    "silog_lambda": float,
    "sobel_percentile": float,
    "df_fov_deg": float,
    "df_patch_size": int,
    "use_distortion": bool,
    "mask_variant": str,
    "mask_pos_weight": float,
    "preset": str,
}


def loss_config_from_dict(data: Dict[str, Any], preset: Optional[str] = None) -> LossConfig:
    """
    Build a LossConfig from a mapping.

    A preset (argument, else the `preset` key) supplies the starting weights
    and distortion flag; explicit keys in `data` override it.
    """
    _check_keys(data, set(_LOSS_FIELDS) | {"weights"})
    preset = preset or data.get("preset")
    kwargs: Dict[str, Any] = {}
    weights: Dict[str, float] = {}

    if preset is not None:
        if preset not in LOSS_PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(LOSS_PRESETS)}")
        weights.update(LOSS_PRESETS[preset]["weights"])
        kwargs["use_distortion"] = LOSS_PRESETS[preset]["use_distortion"]
        kwargs["preset"] = preset

    raw_weights = data.get("weights", {})
    if not isinstance(raw_weights, dict):
        raise ConfigError("weights", "expected a table")
    _check_keys(raw_weights, TERM_NAMES, "weights.")
    for name, value in raw_weights.items():
        value = _check_type(value, float, f"weights.{name}")
        if value < 0:
            raise ConfigError(f"weights.{name}", "must be >= 0")
        weights[name] = value

    for key, expected in _LOSS_FIELDS.items():
        if key in data and key != "preset":
            kwargs[key] = _check_type(data[key], expected, key)

    try:
        return LossConfig(weights=LossWeights(**weights), **kwargs)
    except ValueError as e:
        raise ConfigError("loss", str(e))


def load_loss_config(path=None, preset: Optional[str] = None) -> LossConfig:
    """Load a loss config file (TOML or JSON by suffix); no path means defaults."""
    data = _read_mapping(Path(path)) if path is not None else {}
    config = loss_config_from_dict(data, preset)
    LOGGER.debug("Loss config: %s", config.to_dict())
    return config


# ==============================================================================
# PIPELINE CONFIG
# ==============================================================================

_PIPELINE_FIELDS = {
    "output_dir": str,
    "seed": int,
    "workers": int,
    "batch_size": int,
    "max_retries": int,
    "retry_delay": float,
    "timeout": float,
}

_STAGE_FIELDS = {
    "name": str,
    "source": str,
    "labeler": str,
    "scorer": str,
    "k_indoor": int,
    "k_outdoor": int,
    "source_weight": float,
    "seed": int,
}

_MIX_FIELDS = {"manifest": str, "weight": float}


def _stage_from_dict(data: dict, index: int) -> StageConfig:
    prefix = f"stage[{index}]."
    if not isinstance(data, dict):
        raise ConfigError(f"stage[{index}]", "expected a table")
    _check_keys(data, set(_STAGE_FIELDS) | {"mix"}, prefix)
    for required in ("name", "source"):
        if required not in data:
            raise ConfigError(f"{prefix}{required}", "required")

    kwargs = {key: _check_type(data[key], kind, f"{prefix}{key}") for key, kind in _STAGE_FIELDS.items() if key in data}

    mix = []
    for j, entry in enumerate(data.get("mix", [])):
        where = f"{prefix}mix[{j}]"
        if not isinstance(entry, dict):
            raise ConfigError(where, "expected a table")
        _check_keys(entry, _MIX_FIELDS, f"{where}.")
        if "manifest" not in entry:
            raise ConfigError(f"{where}.manifest", "required")
        mix.append(MixInput(**{k: _check_type(entry[k], kind, f"{where}.{k}") for k, kind in _MIX_FIELDS.items() if k in entry}))

    return StageConfig(mix=mix, **kwargs)


def pipeline_config_from_dict(
    data: Dict[str, Any],
    base_dir,
    default_seed: int = 0,
    default_workers: int = 1,
) -> PipelineConfig:
    """
    Build and validate a PipelineConfig; relative paths resolve against base_dir.

    `default_seed` and `default_workers` apply only when the [pipeline] table
    leaves them out.
    """
    _check_keys(data, {"pipeline", "stage"})
    base_dir = Path(base_dir).resolve()

    table = data.get("pipeline", {})
    if not isinstance(table, dict):
        raise ConfigError("pipeline", "expected a table")
    _check_keys(table, _PIPELINE_FIELDS, "pipeline.")
    kwargs = {key: _check_type(table[key], kind, f"pipeline.{key}") for key, kind in _PIPELINE_FIELDS.items() if key in table}

    kwargs.setdefault("seed", default_seed)
    kwargs.setdefault("workers", default_workers)
    output_dir = Path(kwargs.pop("output_dir", "curation_out"))
    if not output_dir.is_absolute():
        output_dir = base_dir / output_dir

    stages_raw = data.get("stage", [])
    if not isinstance(stages_raw, list):
        raise ConfigError("stage", "expected an array of tables ([[stage]])")
    stages = [_stage_from_dict(entry, i) for i, entry in enumerate(stages_raw)]

    cfg = PipelineConfig(output_dir=output_dir, stages=stages, base_dir=base_dir, **kwargs)
    ok, message = validate_pipeline_config(cfg)
    if not ok:
        field_name, _, detail = message.partition(": ")
        raise ConfigError(field_name, detail)
    return cfg


def load_pipeline_config(
    path,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    default_seed: int = 0,
    default_workers: int = 1,
) -> PipelineConfig:
    """Load a pipeline TOML file; `seed`/`workers` override the file when given."""
    path = Path(path)
    cfg = pipeline_config_from_dict(_read_mapping(path), path.parent, default_seed, default_workers)
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    return cfg
