"""Budgeted samplers behind a common interface for the benchmark harness.

Every method takes a per-chain evaluation budget, runs ``n_chains``
vectorized chains from the shared initial point and returns a
:class:`MethodResult` whose ``evaluations`` is read off the target's counter.
Iteration counts are the smallest that reach the budget, so the realized
cost overshoots by less than one iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from ..cds import CdsConfig, run_cds
from ..kernels import KernelConfig, init_chain, kernel_step
from ..targets import ReferenceDistribution, Target
from ..tempering import AnnealingSchedule, nrpt_cost, run_nrpt

__all__ = ["MethodResult", "METHODS", "run_method", "run_mcmc", "run_nrpt_baseline", "run_cds_budget"]


@dataclass
class MethodResult:
    samples: np.ndarray
    evaluations: int  # per chain
    failed: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _per_chain(target: Target, start: int, n_chains: int) -> int:
    return (target.counter.count - start) // n_chains


def run_mcmc(target: Target, x0, n_chains: int, budget: int, rng: np.random.Generator, *,
             kind: str = "MALA", base_step: float = 0.1, leapfrog_steps: int = 5,
             adapt_rate: float = 0.1) -> MethodResult:
    cfg = KernelConfig(kind=kind, step_size=base_step, leapfrog_steps=leapfrog_steps, adapt_rate=adapt_rate)
    start = target.counter.count
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n_chains, target.dim))
    state = init_chain(target.value_and_score, x, base_step)
    n_iter = max(math.ceil((budget - 1) / cfg.cost), 0)
    for _ in range(n_iter):
        state = kernel_step(state, target.value_and_score, cfg, rng)
    pos = state.position
    failed = ~np.all(np.isfinite(pos), axis=-1)
    return MethodResult(pos, _per_chain(target, start, n_chains), failed, {
        "iterations": n_iter,
        "acceptance_rate": float(np.mean(state.acceptance_rate)),
        "step_size": float(np.median(state.step_size)),
    })


def run_nrpt_baseline(target: Target, x0, n_chains: int, budget: int, rng: np.random.Generator, *,
                      n_replicas: int = 5, beta_min: float = 0.01, base_step: float = 0.1,
                      kernel: str = "MALA", leapfrog_steps: int = 5, optimize_schedule: bool = True,
                      adapt_rate: float = 0.1) -> MethodResult:
    """NRPT on ``pi^beta`` (flat reference) from all replicas at ``x0``; returns the top level."""
    sched = AnnealingSchedule.geometric(n_replicas, beta_min, include_zero=False)
    cfg = KernelConfig(kind=kernel, step_size=base_step, leapfrog_steps=leapfrog_steps, adapt_rate=adapt_rate)
    per = nrpt_cost(sched, 1, cfg.cost)
    n_sweeps = max(math.ceil((budget - 1) / per), 0)
    start = target.counter.count
    ens = run_nrpt(target.value_and_score, None, sched, x0, n_chains, n_sweeps, cfg, rng,
                   optimize=optimize_schedule)
    pos = ens.position[-1].copy()
    diag = ens.diagnostics().to_dict()
    diag["iterations"] = n_sweeps
    return MethodResult(pos, _per_chain(target, start, n_chains), ~np.all(np.isfinite(pos), axis=-1), diag)


_CDS_FIELDS = {f.name for f in fields(CdsConfig)}


def run_cds_budget(target: Target, x0, n_chains: int, budget: int, rng: np.random.Generator, *,
                   rho: float = 0.5, tau: float = 1.0, **params) -> MethodResult:
    """CDS with ``rho`` of the budget in stage 1; the reference is ``N(x0, tau^2 I)``."""
    unknown = set(params) - _CDS_FIELDS
    if unknown:
        raise ValueError(f"unknown CDS parameters: {sorted(unknown)}")
    ref = ReferenceDistribution(np.asarray(x0, dtype=float), tau)
    cfg = CdsConfig(**params).with_budget(budget, rho)
    run = run_cds(target, ref, cfg, n_chains, rng)
    diag = run.manifest()
    diag["pt_steps"], diag["n_steps"] = cfg.pt_steps, cfg.n_steps
    return MethodResult(run.samples, run.evaluations, run.failed, diag)


METHODS = {
    "MALA": lambda *a, **k: run_mcmc(*a, kind="MALA", **k),
    "HMC": lambda *a, **k: run_mcmc(*a, kind="HMC", **k),
    "NRPT": run_nrpt_baseline,
    "CDS": run_cds_budget,
}


def run_method(method: str, target: Target, x0, n_chains: int, budget: int, rng: np.random.Generator,
               **params) -> MethodResult:
    method = method.upper()
    if method not in METHODS:
        raise KeyError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return METHODS[method](target, x0, n_chains, budget, rng, **params)
