"""Pipeline configuration and its TOML loader."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dereverb import WPE_STFT, WpeConfig
from .diarize import DiarizeConfig
from .maskmodel import CacgmmConfig
from .spatial import MvdrConfig
from .spectral import StftConfig

__all__ = [
    "ConfigError",
    "TfPriorConfig",
    "ScoringConfig",
    "PipelineConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "VARIANTS",
    "RECLUSTER_MODES",
    "RECTIFY_WEIGHTINGS",
]

VARIANTS = ("v1", "v2", "v3")
RECLUSTER_MODES = ("both", "fixed", "free", "off")
RECTIFY_WEIGHTINGS = ("energy", "plain")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TfPriorConfig:
    """Short-window cACGMM pass that stands in for a learned T-F mask estimator."""

    window_len: float = 12.8
    window_shift: float = 6.4
    iterations: int = 10


@dataclass(frozen=True)
class ScoringConfig:
    der_collar: float = 0.0
    tcpwer_collar: float = 5.0
    tcpwer_rule: str = "midpoint"


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "v1"
    wpe_enabled: bool = True
    rectify_enabled: bool = True
    recluster: str = "both"
    rectify_on_wpe: bool = False
    rectify_weighting: str = "energy"
    activity_frame_shift: float = 0.01
    stft: StftConfig = field(default_factory=StftConfig)
    wpe: WpeConfig = field(default_factory=WpeConfig)
    wpe_stft: StftConfig = field(default_factory=lambda: WPE_STFT)
    # the pipeline thresholds an energy-weighted average (see rectify_weighting)
    cacgmm: CacgmmConfig = field(default_factory=lambda: CacgmmConfig(rectify_threshold=0.15))
    # heavier loading: without noise, a complement-mask noise PSD is mostly target leakage
    mvdr: MvdrConfig = field(default_factory=lambda: MvdrConfig(epsilon=1e-2))
    diarize: DiarizeConfig = field(default_factory=DiarizeConfig)
    tfprior: TfPriorConfig = field(default_factory=TfPriorConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.recluster not in RECLUSTER_MODES:
            raise ConfigError(f"recluster must be one of {RECLUSTER_MODES}")
        if self.rectify_weighting not in RECTIFY_WEIGHTINGS:
            raise ConfigError(f"rectify_weighting must be one of {RECTIFY_WEIGHTINGS}")
        if self.activity_frame_shift <= 0:
            raise ConfigError("activity_frame_shift must be positive")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {"stft": StftConfig, "wpe": WpeConfig, "wpe_stft": StftConfig,
             "cacgmm": CacgmmConfig, "mvdr": MvdrConfig, "diarize": DiarizeConfig,
             "tfprior": TfPriorConfig, "scoring": ScoringConfig}


_DEFAULT = PipelineConfig()


def _check_type(value, expected, path, errors):
    kind = expected if isinstance(expected, type) else None
    if expected in ("int", int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected in ("float", float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected in ("bool", bool):
        ok = isinstance(value, bool)
    elif expected in ("str", str):
        ok = isinstance(value, str)
    elif expected in ("int | None", "Optional[int]"):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = True
    if not ok:
        errors.append(f"{path}: expected {getattr(kind, '__name__', expected)}, "
                      f"got {type(value).__name__}")
    return float(value) if ok and expected in ("float", float) else value


def _build(cls, data: dict, prefix: str, errors: list, base=None):
    """Validate ``data`` against ``cls``; keys missing from ``data`` come from ``base``."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            errors.append(f"{path}: unknown key")
            continue
        f = fields[key]
        if key in _SECTIONS and cls is PipelineConfig:
            if not isinstance(value, dict):
                errors.append(f"{path}: expected a table")
                continue
            kwargs[key] = _build(_SECTIONS[key], value, f"{path}.", errors,
                                 getattr(_DEFAULT, key))
        else:
            kwargs[key] = _check_type(value, f.type, path, errors)
    if errors:
        return None
    try:
        return cls(**kwargs) if base is None else dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{prefix.rstrip('.') or 'pipeline'}: {exc}")
        return None


def config_from_dict(data: dict) -> PipelineConfig:
    """Validate a nested mapping; top-level keys may sit under ``[pipeline]``."""
    data = dict(data)
    top = data.pop("pipeline", {})
    if not isinstance(top, dict):
        raise ConfigError("pipeline: expected a table")
    merged = {**top, **data}
    errors: list[str] = []
    cfg = _build(PipelineConfig, merged, "", errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path=None) -> PipelineConfig:
    """Load a TOML config; missing keys take defaults, unknown keys are rejected."""
    if path is None:
        return PipelineConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: PipelineConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
