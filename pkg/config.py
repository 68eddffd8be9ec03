"""
Run configuration: the JSON config document, CLI overrides and the example pool.
Environment variables are never consulted.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from engine import EngineConfig, TaskSettings
from errors import ConfigError
from evaluation import ExampleRef
from plugins import (DEFAULT_BATCH_TIMEOUT, DEFAULT_CREATE_TIMEOUT, DEFAULT_REFINE_TIMEOUT,
                     SYNTHETIC_POOL_PREFIX, synthetic_pool)
from reports import DEFAULT_BYTE_CAP, DEFAULT_DIVERGENCE_CAP, KIND_BINARY

PROJECT_ROOT = Path(__file__).resolve().parent
DEFAULT_STRATEGY = PROJECT_ROOT / "strategies" / "use_your_judgment.md"

SECTIONS = ("engine", "task", "plugins", "synthetic", "schema_version")


@dataclass
class RunConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    score_kind: str = KIND_BINARY
    divergence_cap: int = DEFAULT_DIVERGENCE_CAP
    byte_cap: int = DEFAULT_BYTE_CAP
    objective: str = ""
    background: str = ""
    strategy: Optional[str] = None
    seed_artifact: Optional[str] = None
    batch_timeout: float = DEFAULT_BATCH_TIMEOUT
    create_timeout: float = DEFAULT_CREATE_TIMEOUT
    refine_timeout: float = DEFAULT_REFINE_TIMEOUT
    seed_accuracy: float = 0.5
    clone_rate: float = 0.0

    def __post_init__(self):
        if self.divergence_cap < 1 or self.byte_cap < 1:
            raise ConfigError("divergence_cap and byte_cap must be positive.")
        if not 0.0 <= self.seed_accuracy <= 1.0 or not 0.0 <= self.clone_rate <= 1.0:
            raise ConfigError("seed_accuracy and clone_rate must be probabilities.")
        if min(self.batch_timeout, self.create_timeout, self.refine_timeout) <= 0:
            raise ConfigError("Timeouts must be positive.")

    def strategy_text(self) -> str:
        path = Path(self.strategy) if self.strategy else DEFAULT_STRATEGY
        try:
            return path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"Cannot read strategy document {path}: {exc}")

    def task_settings(self) -> TaskSettings:
        documents = {"strategy.md": self.strategy_text()}
        if self.objective:
            documents["objective.md"] = self.objective
        if self.background:
            documents["background.md"] = self.background
        return TaskSettings(self.score_kind, self.divergence_cap, self.byte_cap, documents)

    def to_document(self) -> Dict:
        return {
            "engine": self.engine.to_dict(),
            "task": {
                "score_kind": self.score_kind,
                "divergence_cap": self.divergence_cap,
                "byte_cap": self.byte_cap,
                "objective": self.objective,
                "background": self.background,
                "strategy": self.strategy,
                "seed_artifact": self.seed_artifact,
            },
            "plugins": {
                "batch_timeout": self.batch_timeout,
                "create_timeout": self.create_timeout,
                "refine_timeout": self.refine_timeout,
            },
            "synthetic": {"seed_accuracy": self.seed_accuracy, "clone_rate": self.clone_rate},
        }

    @classmethod
    def from_document(cls, data: Mapping, engine_overrides: Optional[Mapping] = None) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("The config document must be a JSON object.")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown config sections: {', '.join(sorted(unknown))}.")
        engine_data = dict(data.get("engine", {}))
        engine_data.update({k: v for k, v in (engine_overrides or {}).items() if v is not None})
        try:
            engine = EngineConfig.from_dict(engine_data)
            return cls(engine=engine, **data.get("task", {}), **data.get("plugins", {}),
                       **data.get("synthetic", {}))
        except TypeError as exc:
            raise ConfigError(f"Invalid config document: {exc}")


def load_run_config(path: Optional[str], engine_overrides: Optional[Mapping] = None) -> RunConfig:
    """Read a config document (or start from defaults) and apply CLI overrides."""
    if path is None:
        return RunConfig.from_document({}, engine_overrides)
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}")
    return RunConfig.from_document(data, engine_overrides)


def with_engine(config: RunConfig, **changes) -> RunConfig:
    return replace(config, engine=replace(config.engine, **changes))


def load_pool(source: str) -> List[ExampleRef]:
    """A JSON pool file (a list, or an object with "examples"), or builtin:synthetic:N."""
    if source.startswith(SYNTHETIC_POOL_PREFIX):
        try:
            return synthetic_pool(int(source[len(SYNTHETIC_POOL_PREFIX):]))
        except ValueError as exc:
            raise ConfigError(f"Bad synthetic pool {source!r}: {exc}")
    try:
        data = json.loads(Path(source).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"Pool file not found: {source}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Pool file {source} is not valid JSON: {exc}")
    if isinstance(data, Mapping):
        data = data.get("examples", [])
    try:
        pool = [ExampleRef.from_dict(e) for e in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"Malformed pool entry in {source}: {exc}")
    if not pool:
        raise ConfigError(f"Pool {source} is empty.")
    ids = [e.example_id for e in pool]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"Pool {source} has duplicate example ids.")
    return pool
