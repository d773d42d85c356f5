"""Run configuration: file values plus flag overrides.

The config file is JSON with the keys below (all optional); command-line
flags override file values.  The same structure drives detection-only runs,
full replays, and the live service.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .datagen import N_STANDS, stand_feature

__all__ = ["ConfigError", "RunConfig", "load_config", "DETECTION_FEATURES"]


class ConfigError(ValueError):
    """Bad configuration file or flag combination."""


DETECTION_FEATURES: tuple[str, ...] = tuple(
    stand_feature(signal, stand)
    for stand in range(1, N_STANDS + 1)
    for signal in ("current", "torque")
)


@dataclass(frozen=True)
class RunConfig:
    # stream source: a CSV path, or a generated recipe ("paper")
    stream_csv: str | None = None
    recipe: str = "paper"
    stream_length: int = 10_000
    name_mapping: dict[str, str] = field(default_factory=dict)
    seed: int = 0

    # changepoint detection
    features: tuple[str, ...] = DETECTION_FEATURES
    warmup_fraction: float = 0.4
    warmup_count: int | None = None
    k_nn: int = 1
    kl_form: str = "wang-standard"
    ph_delta: float | None = None
    ph_lambda: float | None = None
    ph_min_instances: int = 30
    post_reset_min: int = 200

    # batch adaptation
    batch_size: int = 50
    label_mode: str = "true-labels"
    ccsa_alpha: float = 0.25
    ccsa_margin: float = 1.0
    ccsa_threshold: float = 0.5
    ccsa_epochs: int = 100
    ccsa_pairs_per_kind: int = 128
    ccsa_learning_rate: float = 1e-3
    ccsa_embedding_dim: int = 8
    ccsa_hidden_sizes: tuple[int, ...] = (16,)
    pretrain_epochs: int = 500
    source_train_cap: int = 2000

    # explanation
    explainer_mode: str = "permutation"
    explainer_permutations: int = 64
    explainer_seed: int = 0
    explain_instances: int = 12
    background_size: int = 25
    median_calibration_batches: int = 8

    # baselines
    contamination: float = 0.085

    # service / output
    listen: str = "127.0.0.1:8787"
    replay_delay_ms: float = 0.0
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k_nn < 1:
            raise ConfigError("k_nn must be >= 1")
        if self.kl_form not in ("as-printed", "wang-standard"):
            raise ConfigError(f"unknown kl_form {self.kl_form!r}")
        if self.label_mode not in ("true-labels", "pseudo-labels"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.explainer_mode not in ("exact", "permutation"):
            raise ConfigError(f"unknown explainer_mode {self.explainer_mode!r}")
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "ccsa_hidden_sizes", tuple(self.ccsa_hidden_sizes))

    def warmup_for(self, stream_length: int) -> int:
        if self.warmup_count is not None:
            return self.warmup_count
        return int(stream_length * self.warmup_fraction)

    def listen_address(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"listen must look like host:port, got {self.listen!r}")
        return host, int(port)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["features"] = list(self.features)
        out["ccsa_hidden_sizes"] = list(self.ccsa_hidden_sizes)
        return out


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def _coerce(raw: Mapping[str, Any]) -> RunConfig:
    unknown = set(raw) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cleaned = dict(raw)
    for key in ("features", "ccsa_hidden_sizes"):
        if key in cleaned and cleaned[key] is not None:
            cleaned[key] = tuple(cleaned[key])
    try:
        return RunConfig(**cleaned)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    """Build a config from an optional JSON file plus keyword overrides.

    Overrides with value None are ignored, so unset CLI flags pass through.
    """

    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    return _coerce(raw)
