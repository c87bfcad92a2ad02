"""JSON run configuration shared by the CLI subcommands.

A config file holds optional sections mirroring the library dataclasses::

    {"seed": 0, "output": "runs/x",
     "phantoms": {...PhantomSpec...}, "train": {...TrainConfig...},
     "solver": {...SolverConfig...}, "baseline": {...BaselineConfig...},
     "plan": {...ExperimentPlan...}}

Unknown keys anywhere are collected and reported together.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import BaselineConfig
from .harness import ExperimentPlan
from .phantoms import PhantomSpec
from .solvers import SolverConfig
from .training import TrainConfig

SECTIONS = {
    "phantoms": PhantomSpec,
    "train": TrainConfig,
    "solver": SolverConfig,
    "baseline": BaselineConfig,
    "plan": ExperimentPlan,
}
# "command" and "args" are written into resolved configs so a run can be repeated
TOP_LEVEL = ("seed", "output", "command", "args", *SECTIONS)


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


@dataclass
class RunConfig:
    seed: int = 0
    output: str = "runs"
    sections: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        problems = [f"unknown key '{k}'" for k in d if k not in TOP_LEVEL]
        sections = {}
        for name, kind in SECTIONS.items():
            sec = d.get(name)
            if sec is None:
                continue
            if not isinstance(sec, dict):
                problems.append(f"section '{name}' must be an object")
                continue
            allowed = _field_names(kind)
            problems += [f"unknown key '{name}.{k}'" for k in sec if k not in allowed]
            sections[name] = dict(sec)
        if "seed" in d and not isinstance(d["seed"], int):
            problems.append("'seed' must be an integer")
        if problems:
            raise ConfigError(problems)
        return cls(seed=d.get("seed", 0), output=d.get("output", "runs"), sections=sections)

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError([f"invalid JSON in {path}: {e.msg} at line {e.lineno}"]) from None
        if not isinstance(d, dict):
            raise ConfigError(["config must be a JSON object"])
        return cls.from_dict(d)

    def section(self, name: str, **overrides):
        """Build the dataclass for ``name`` from file values plus non-None overrides."""
        kw = dict(self.sections.get(name, {}))
        kw.update({k: v for k, v in overrides.items() if v is not None})
        kw = {k: tuple(v) if isinstance(v, list) and name != "plan" else v for k, v in kw.items()}
        try:
            return SECTIONS[name](**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError([f"section '{name}': {e}"]) from None

    def resolved(self, **sections) -> dict:
        """JSON-ready dict of the effective configuration."""
        out = {"seed": self.seed, "output": self.output}
        for name, obj in sections.items():
            out[name] = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
        return out


def write_resolved(path: str | os.PathLike, resolved: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(resolved, indent=2, sort_keys=True, default=list))
