"""Experiment configuration files.

A config is a TOML document with an optional ``[defaults]`` table and one or
more ``[[experiment]]`` tables::

    [defaults]
    task = "gm2"          # gm2 | gmnu2 | gm16 | gmnu16 | lj13 | gauss1
    n_samples = 1000      # chains per run
    replicates = 3
    seed = 0
    tau = 1.0             # reference std around the located mode

    [[experiment]]
    name = "cds"
    method = "CDS"        # CDS | NRPT | MALA | HMC
    budgets = [1000, 10000]

    [experiment.params]
    rho = 0.5
    t0 = [0.05, 0.1]      # a list is a grid axis

Every list inside ``params`` is expanded into a grid (keys in sorted order,
last key varying fastest), so one table can describe many configurations.
Only ``CDSAMPLING_OUT`` (output root) and ``CDSAMPLING_THREADS`` (worker
count) are read from the environment.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..targets import TASKS

__all__ = ["ConfigError", "ExperimentConfig", "T0SweepConfig", "expand_grid", "load_config",
           "load_document", "parse_config", "parse_t0_sweep", "output_root", "thread_count"]

METHOD_IDS = ("CDS", "NRPT", "MALA", "HMC")
TASK_IDS = tuple(TASKS) + ("lj13", "gauss1")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One method with fixed hyperparameters, swept over budgets and replicates."""

    name: str
    task: str
    method: str
    budgets: tuple
    params: dict = field(default_factory=dict)
    replicates: int = 3
    seed: int = 0
    n_samples: int = 1000
    tau: float = 1.0
    out: str | None = None

    def __post_init__(self):
        if self.method not in METHOD_IDS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHOD_IDS}")
        if self.task not in TASK_IDS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASK_IDS}")
        b = list(self.budgets)
        if not b or any(not isinstance(v, int) or v <= 0 for v in b):
            raise ConfigError("budgets must be a non-empty list of positive integers")
        if b != sorted(b):
            raise ConfigError("budgets must be sorted ascending")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["budgets"] = list(self.budgets)
        return d

    def key(self) -> str:
        """Stable hash of everything that determines the runs."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def label(self) -> str:
        if not self.params:
            return self.name
        return self.name + "[" + ",".join(f"{k}={self.params[k]}" for k in sorted(self.params)) + "]"


def expand_grid(params: dict) -> list[dict]:
    """Cartesian product over list-valued entries, in deterministic order."""
    keys = sorted(params)
    axes = [params[k] if isinstance(params[k], list) else [params[k]] for k in keys]
    for k, ax in zip(keys, axes):
        if not ax:
            raise ConfigError(f"grid axis {k!r} is empty")
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


_ALLOWED = {"name", "task", "method", "budgets", "params", "replicates", "seed", "n_samples", "tau"}


def parse_config(doc: dict, *, seed: int | None = None, task: str | None = None,
                 method: str | None = None) -> list[ExperimentConfig]:
    """Turn a parsed TOML document into expanded configs.

    ``seed`` overrides every experiment's seed; ``task``/``method`` filter.
    """
    defaults = dict(doc.get("defaults", {}))
    exps = doc.get("experiment", [])
    if not isinstance(exps, list) or not exps:
        raise ConfigError("config needs at least one [[experiment]] table")
    out = []
    for i, raw in enumerate(exps):
        entry = {**defaults, **raw}
        extra = set(entry) - _ALLOWED
        if extra:
            raise ConfigError(f"experiment {i}: unknown keys {sorted(extra)}")
        for req in ("task", "method", "budgets"):
            if req not in entry:
                raise ConfigError(f"experiment {i}: missing {req!r}")
        entry["method"] = str(entry["method"]).upper()
        entry.setdefault("name", entry["method"].lower())
        if seed is not None:
            entry["seed"] = seed
        if task is not None and entry["task"] != task:
            continue
        if method is not None and entry["method"] != method.upper():
            continue
        params = entry.pop("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"experiment {i}: params must be a table")
        budgets = tuple(entry.pop("budgets"))
        for combo in expand_grid(params):
            out.append(ExperimentConfig(budgets=budgets, params=combo, **entry))
    return out


def load_document(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err


def load_config(path, **overrides) -> list[ExperimentConfig]:
    return parse_config(load_document(path), **overrides)


@dataclass(frozen=True)
class T0SweepConfig:
    """Settings of a ``[t0_sweep]`` table."""

    task: str
    t0: tuple
    seeds: tuple = (0, 1, 2)
    n_chains: int = 100
    sweeps: int = 1500
    pilot_replicas: int = 10
    tau: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASK_IDS:
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.t0) < 2 or any(not 0.0 < t <= 1.0 for t in self.t0):
            raise ConfigError("t0 needs at least two values in (0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.n_chains < 1 or self.sweeps < 0 or self.pilot_replicas < 2:
            raise ConfigError("n_chains >= 1, sweeps >= 0 and pilot_replicas >= 2 required")


def parse_t0_sweep(doc: dict, *, seed: int | None = None, task: str | None = None) -> T0SweepConfig:
    raw = doc.get("t0_sweep")
    if not isinstance(raw, dict):
        raise ConfigError("config has no [t0_sweep] table")
    raw = dict(raw)
    if task is not None:
        raw["task"] = task
    if seed is not None:
        raw["seeds"] = [seed]
    allowed = {f for f in T0SweepConfig.__dataclass_fields__}
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"[t0_sweep]: unknown keys {sorted(extra)}")
    if "task" not in raw or "t0" not in raw:
        raise ConfigError("[t0_sweep] needs task and t0")
    raw["t0"] = tuple(float(t) for t in raw["t0"])
    raw["seeds"] = tuple(int(s) for s in raw.get("seeds", (0, 1, 2)))
    return T0SweepConfig(**raw)


def output_root(cli_value: str | None = None) -> Path:
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get("CDSAMPLING_OUT", "results"))


def thread_count(cli_value: int | None = None) -> int:
    if cli_value is not None:
        n = cli_value
    else:
        try:
            n = int(os.environ.get("CDSAMPLING_THREADS", "1"))
        except ValueError as err:
            raise ConfigError("CDSAMPLING_THREADS must be an integer") from err
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n
