"""Run configuration.

Config files are flat ``key = value`` lines with ``#`` comments. Values may
interpolate environment variables as ``${NAME}`` (useful for endpoints and
key names); a missing variable is an error, not an empty string. Command-line
flags override file values, and everything is validated before any backend
call happens.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .backends import BackendConfig
from .datasets import DATASET_FORMATS
from .metrics import CostWeights
from .strategies import DEFAULT_ORDER, StrategyRegistry, StrategySpec

__all__ = ["ConfigError", "RunConfig", "parse_config_file", "build_run_config", "RUN_MODES"]

RUN_MODES = ("fixed", "dyplan-base", "dyplan-verify")

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ValueError):
    """A config file or flag set is invalid; raised before any backend work."""


def _interpolate(value: str, source: str) -> str:
    def replace(match: re.Match) -> str:
        name = match.group(1)
        if name not in os.environ:
            raise ConfigError(f"{source}: environment variable {name!r} is not set")
        return os.environ[name]

    return _ENV_PATTERN.sub(replace, value)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read key=value lines, interpolating ``${ENV}`` references."""
    values: dict[str, str] = {}
    p = Path(path)
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = _interpolate(raw.strip(), f"{p}:{lineno}")
    return values


def _to_int(values: Mapping[str, str], key: str, default: int) -> int:
    raw = values.get(key)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} must be an integer, got {raw!r}") from None


def _to_float(values: Mapping[str, str], key: str, default: float) -> float:
    raw = values.get(key)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} must be a number, got {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, fully validated."""

    mode: str
    dataset: str
    dataset_format: str
    out: str
    strategies: tuple[str, ...]
    specs: tuple[StrategySpec, ...]
    backend: BackendConfig
    weights: CostWeights
    rounds: int = 2
    seed: int = 0
    parallelism: int = 4
    index_path: str | None = None
    decision_shots: int = 0
    decision_fallback: str | None = None
    template_dir: str | None = None
    shots_dir: str | None = None

    def digest(self) -> str:
        payload = {
            "mode": self.mode,
            "dataset": self.dataset,
            "dataset_format": self.dataset_format,
            "strategies": list(self.strategies),
            "backend": {
                "kind": self.backend.kind,
                "endpoint": self.backend.endpoint,
                "model": self.backend.model,
                "temperature": self.backend.temperature,
                "script_path": self.backend.script_path,
                "table_path": self.backend.table_path,
            },
            "weights": [self.weights.w_token, self.weights.w_retrieval],
            "rounds": self.rounds,
            "seed": self.seed,
            "index_path": self.index_path,
            "decision_shots": self.decision_shots,
            "decision_fallback": self.decision_fallback,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def build_run_config(values: Mapping[str, str]) -> RunConfig:
    """Validate merged file+flag values into a RunConfig.

    Raises ConfigError on anything inconsistent, including a strategy pool
    that can retrieve with no index configured; that must fail here, not
    mid-run.
    """
    mode = values.get("mode", "")
    if mode not in RUN_MODES:
        raise ConfigError(f"mode must be one of {RUN_MODES}, got {mode!r}")
    dataset = values.get("dataset", "")
    if not dataset:
        raise ConfigError("config key 'dataset' is required")
    dataset_format = values.get("dataset_format", "canonical")
    if dataset_format not in DATASET_FORMATS:
        raise ConfigError(
            f"dataset_format must be one of {DATASET_FORMATS}, got {dataset_format!r}"
        )
    out = values.get("out", "")
    if not out:
        raise ConfigError("config key 'out' is required")

    strategy_csv = values.get("strategies", ",".join(DEFAULT_ORDER))
    names = tuple(name.strip() for name in strategy_csv.split(",") if name.strip())
    registry = StrategyRegistry()
    try:
        specs = tuple(registry.ordered(names))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    index_path = values.get("index") or None
    if any(spec.needs_retrieval for spec in specs) and not index_path:
        raise ConfigError(
            "the strategy pool includes a retrieval strategy but no 'index' is configured"
        )

    rounds = _to_int(values, "rounds", 2)
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    parallelism = _to_int(values, "parallelism", 4)
    if parallelism < 1:
        raise ConfigError(f"parallelism must be >= 1, got {parallelism}")
    seed = _to_int(values, "seed", 0)
    decision_shots = _to_int(values, "decision_shots", 0)
    if decision_shots < 0:
        raise ConfigError(f"decision_shots must be >= 0, got {decision_shots}")
    decision_fallback = values.get("decision_fallback") or None
    if decision_fallback is not None and decision_fallback not in names:
        raise ConfigError(
            f"decision_fallback {decision_fallback!r} is not in the strategy pool {list(names)}"
        )

    backend_kind = values.get("backend_kind", "")
    try:
        backend = BackendConfig(
            kind=backend_kind,
            endpoint=values.get("endpoint") or None,
            model=values.get("model") or None,
            temperature=_to_float(values, "temperature", 0.4),
            api_key_env=values.get("api_key_env", "LLM_API_KEY"),
            script_path=values.get("script") or None,
            table_path=values.get("table") or None,
            cache_path=values.get("cache") or None,
            timeout=_to_float(values, "timeout", 60.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    try:
        weights = CostWeights(
            w_token=_to_float(values, "w_token", 1.0),
            w_retrieval=_to_float(values, "w_retrieval", 100.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        mode=mode,
        dataset=dataset,
        dataset_format=dataset_format,
        out=out,
        strategies=names,
        specs=specs,
        backend=backend,
        weights=weights,
        rounds=rounds,
        seed=seed,
        parallelism=parallelism,
        index_path=index_path,
        decision_shots=decision_shots,
        decision_fallback=decision_fallback,
        template_dir=values.get("template_dir") or None,
        shots_dir=values.get("shots_dir") or None,
    )
