"""Experiment configuration: built-in defaults, YAML files with dotted keys, CLI overrides."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from trust_consensus.errors import ConfigError, PersistenceError
from trust_consensus.protocol import AdversaryParams, LambdaSchedule
from trust_consensus.trust import TrustModel

logger = logging.getLogger(__name__)

DEFAULT_REGIMES: tuple[tuple[float, float], ...] = ((0.55, 0.45), (0.6, 0.4), (0.65, 0.35), (0.7, 0.3))
DEFAULT_GAMMAS: tuple[float, ...] = (0.005, 0.01, 0.02, 0.05, 0.1, 0.2)


def _key(name: str) -> dict[str, str]:
    return {"key": name}


@dataclass(frozen=True)
class ExperimentConfig:
    """Every parameter of a sweep. Each field maps to one dotted config key."""

    n: int = field(default=60, metadata=_key("topology.n"))
    malicious: int = field(default=10, metadata=_key("topology.malicious"))
    legit: int | None = field(default=None, metadata=_key("topology.legit"))
    radius: float = field(default=0.2, metadata=_key("topology.radius"))
    topology_seed: int = field(default=7, metadata=_key("topology.seed"))
    max_retries: int = field(default=100, metadata=_key("topology.max_retries"))
    regimes: tuple[tuple[float, float], ...] = field(default=DEFAULT_REGIMES, metadata=_key("trust.regimes"))
    c: float = field(default=0.9, metadata=_key("schedule.c"))
    gammas: tuple[float, ...] = field(default=DEFAULT_GAMMAS, metadata=_key("schedule.gammas"))
    horizon: int = field(default=1000, metadata=_key("run.horizon"))
    runs: int = field(default=1000, metadata=_key("run.runs"))
    seed: int = field(default=0, metadata=_key("run.seed"))
    workers: int = field(default=1, metadata=_key("run.workers"))
    eta: float = field(default=1.0, metadata=_key("state.eta"))
    amplitude_ratio: float = field(default=0.1, metadata=_key("adversary.amplitude_ratio"))
    period: float = field(default=50.0, metadata=_key("adversary.period"))
    noise_std: float = field(default=0.05, metadata=_key("adversary.noise_std"))
    output_dir: Path = field(default=Path("results"), metadata=_key("output.dir"))
    keep_traces: bool = field(default=False, metadata=_key("output.keep_traces"))

    @property
    def legit_count(self) -> int:
        return self.n - self.malicious

    def trust_models(self) -> list[TrustModel]:
        return [TrustModel(mean_legit=mu_l, mean_malicious=mu_m) for mu_l, mu_m in self.regimes]

    def schedules(self) -> list[LambdaSchedule]:
        return [LambdaSchedule(c=self.c, gamma=g) for g in self.gammas]

    def adversary(self) -> AdversaryParams:
        return AdversaryParams(
            amplitude_ratio=self.amplitude_ratio,
            period=self.period,
            noise_std=self.noise_std,
        )

    def as_dotted(self) -> dict[str, Any]:
        """Dotted-key view with YAML-friendly values."""
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Path):
                value = str(value)
            elif f.name == "regimes":
                value = [list(pair) for pair in value]
            elif isinstance(value, tuple):
                value = list(value)
            out[f.metadata["key"]] = value
        return out


_FIELDS = {f.metadata["key"]: f for f in fields(ExperimentConfig)}


# ─── coercion ────────────────────────────────────────────────────────────────


def _as_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError(f"expected an integer, got {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"expected an integer, got {value!r}")
    return int(value)


def _as_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError(f"expected a number, got {value!r}")
    return float(value)


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
        return value.lower() in ("true", "yes", "1")
    raise ValueError(f"expected true or false, got {value!r}")


def _as_float_list(value: Any) -> tuple[float, ...]:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return (float(value),)
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    return tuple(_as_float(v) for v in value)


def _as_regimes(value: Any) -> tuple[tuple[float, float], ...]:
    pairs = []
    for item in value:
        pair = tuple(_as_float(v) for v in item)
        if len(pair) != 2:
            raise ValueError(f"each regime must be a [mu_L, mu_M] pair, got {item!r}")
        pairs.append(pair)
    return tuple(pairs)


_COERCE = {
    "n": _as_int,
    "malicious": _as_int,
    "legit": _as_int,
    "radius": _as_float,
    "topology_seed": _as_int,
    "max_retries": _as_int,
    "regimes": _as_regimes,
    "c": _as_float,
    "gammas": _as_float_list,
    "horizon": _as_int,
    "runs": _as_int,
    "seed": _as_int,
    "workers": _as_int,
    "eta": _as_float,
    "amplitude_ratio": _as_float,
    "period": _as_float,
    "noise_std": _as_float,
    "output_dir": Path,
    "keep_traces": _as_bool,
}


def _flatten(data: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _validate(cfg: ExperimentConfig) -> list[str]:
    problems = []
    if cfg.n < 2:
        problems.append(f"topology.n: must be at least 2, got {cfg.n}")
    if not 0 <= cfg.malicious < cfg.n:
        problems.append(f"topology.malicious: must be in [0, n), got {cfg.malicious}")
    if cfg.legit is not None and cfg.legit != cfg.n - cfg.malicious:
        problems.append(f"topology.legit: must equal n - malicious ({cfg.n - cfg.malicious}), got {cfg.legit}")
    if cfg.radius < 0:
        problems.append(f"topology.radius: must be non-negative, got {cfg.radius}")
    if cfg.max_retries < 0:
        problems.append(f"topology.max_retries: must be non-negative, got {cfg.max_retries}")
    if not cfg.regimes:
        problems.append("trust.regimes: at least one regime is required")
    for mu_l, mu_m in cfg.regimes:
        if not (0.5 < mu_l <= 1.0 and 0.0 <= mu_m < 0.5):
            problems.append(f"trust.regimes: need mu_L in (0.5, 1] and mu_M in [0, 0.5), got [{mu_l}, {mu_m}]")
    if not 0.0 < cfg.c < 1.0:
        problems.append(f"schedule.c: must be in (0, 1), got {cfg.c}")
    if not cfg.gammas:
        problems.append("schedule.gammas: at least one decay rate is required")
    elif any(g <= 0 for g in cfg.gammas):
        problems.append(f"schedule.gammas: every decay rate must be positive, got {list(cfg.gammas)}")
    for key, value in (("run.horizon", cfg.horizon), ("run.runs", cfg.runs), ("run.workers", cfg.workers)):
        if value < 1:
            problems.append(f"{key}: must be at least 1, got {value}")
    if cfg.eta <= 0:
        problems.append(f"state.eta: must be positive, got {cfg.eta}")
    if cfg.period <= 0:
        problems.append(f"adversary.period: must be positive, got {cfg.period}")
    if cfg.noise_std < 0:
        problems.append(f"adversary.noise_std: must be non-negative, got {cfg.noise_std}")
    return problems


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """Return ``config`` with dotted-key overrides applied; ``None`` values are skipped."""
    problems: list[str] = []
    changes: dict[str, Any] = {}
    for key, value in _flatten(overrides).items():
        if value is None:
            continue
        fld = _FIELDS.get(key)
        if fld is None:
            problems.append(f"{key}: unknown configuration key")
            continue
        try:
            changes[fld.name] = _COERCE[fld.name](value)
        except (TypeError, ValueError) as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)

    cfg = replace(config, **changes)
    problems = _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: Path | None = None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides``."""
    merged: dict[str, Any] = {}
    if path is not None:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise PersistenceError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: invalid YAML ({exc})"]) from exc
        if not isinstance(data, Mapping):
            raise ConfigError([f"{path}: top level must be a mapping of dotted keys"])
        merged.update(_flatten(data))
        logger.debug("Loaded %d config keys from %s", len(merged), path)
    if overrides:
        merged.update({k: v for k, v in _flatten(overrides).items() if v is not None})
    return apply_overrides(ExperimentConfig(), merged)


def dump_config(config: ExperimentConfig, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(config.as_dotted(), sort_keys=False), encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot write config {path}: {exc}") from exc
