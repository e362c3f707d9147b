"""Run configuration: JSON file, validated and frozen."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .util import content_hash


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    seed_domains: tuple[str, ...] = ("healthcare_clinic", "travel_booking")
    domain_count: int = 6
    domain_batch: int = 3
    persons: tuple[str, ...] = ("Patient", "Passenger")
    outlines_per_person: int = 2
    max_peripherals: int = 2
    entity_rows: int = 20
    relationship_rows: int = 30
    l_min: int = 2
    l_max: int = 5
    require_write: bool = True
    max_trajectories_per_domain: int = 8
    combos_per_trajectory: int = 3
    tasks_per_trajectory: int = 1
    cross_pairs: int = 8
    theta: float = 20
    repair_budget: int = 3
    fix_budget: int = 5
    epsilon: float = 1e-4
    max_turns: int = 40
    simulation_time: str = "2025-06-01T09:00:00"
    agents: tuple[str, ...] = ("golden", "drop_write", "skip_preview")
    r_tags_fail: bool = False
    resolutions: dict[str, str] = field(default_factory=dict)
    faults: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        problems = []
        if not self.seed_domains:
            problems.append("seed_domains must not be empty")
        if self.domain_count < len(self.seed_domains):
            problems.append("domain_count must cover the seed domains")
        if not 1 <= self.l_min <= self.l_max:
            problems.append("need 1 <= l_min <= l_max")
        for name in ("domain_batch", "outlines_per_person", "max_peripherals", "combos_per_trajectory",
                     "tasks_per_trajectory", "repair_budget", "fix_budget", "max_turns"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        unknown = set(self.agents) - {"golden", "drop_write", "skip_preview", "silent", "random"}
        if unknown:
            problems.append(f"unknown agents: {sorted(unknown)}")
        if problems:
            raise ConfigError("; ".join(problems), problems=problems)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(data) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {extra}", keys=extra)
        kw = {}
        for k, v in data.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **changes: Any) -> "PipelineConfig":
        return PipelineConfig.from_dict({**self.to_dict(), **changes})

    @property
    def digest(self) -> str:
        return content_hash(self.to_dict())


def load_config(path: str | Path | None, **overrides: Any) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found", path=str(path)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}", path=str(path)) from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object", path=str(path))
    data.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_dict(data)
