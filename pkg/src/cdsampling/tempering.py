"""Non-reversible parallel tempering over a geometric annealing path.

The ensemble holds ``R = N + 1`` levels for each of ``C`` independent chains.
Level ``n`` targets ``pi_{beta_n} ~ pi_ref^{1 - beta_n} pi^{beta_n}``; with a
flat reference the path is ``pi^{beta}`` and the lowest level is
``beta_min > 0``.

With a proper reference and ``beta_0 = 0`` the bottom level is refreshed by
an exact reference draw on every sweep that proposes the (0, 1) swap, and
the target is evaluated there so the swap can use cached values.  Sweeps
that do not touch pair 0 leave level 0 alone (an identity move, which is
trivially invariant).

Evaluation cost per chain and sweep is therefore
``kernel_cost * (#levels with beta > 0) + [sweep proposes pair 0 and beta_0 = 0]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import ChainState, KernelConfig, kernel_step

__all__ = [
    "AnnealingSchedule",
    "PtDiagnostics",
    "ReplicaEnsemble",
    "annealed_log_density",
    "nrpt_sweep",
    "swap_log_ratio",
    "round_trip_count",
    "estimate_gcb",
    "optimize_schedule",
    "run_nrpt",
    "nrpt_cost",
    "InsufficientDataError",
]

log = logging.getLogger(__name__)

RISING, FALLING, UNKNOWN = 1, -1, 0


class InsufficientDataError(ValueError):
    """A swap statistic was requested for a pair with no proposals."""


@dataclass
class AnnealingSchedule:
    betas: np.ndarray
    construction: str = "geometric"

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)
        b = self.betas
        if b.ndim != 1 or b.size < 2:
            raise ValueError("a schedule needs at least two levels")
        if b[0] < 0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0):
            raise ValueError("betas must increase strictly from >= 0 to exactly 1")

    @classmethod
    def geometric(cls, n_levels: int, beta_min: float = 1e-3, include_zero: bool = True):
        """``[0] + geomspace(beta_min, 1, n_levels - 1)`` or, for a flat reference, ``geomspace(beta_min, 1, n_levels)``."""
        if include_zero:
            if n_levels == 2:
                return cls(np.array([0.0, 1.0]))
            betas = np.concatenate([[0.0], np.geomspace(beta_min, 1.0, n_levels - 1)])
        else:
            betas = np.geomspace(beta_min, 1.0, n_levels)
        betas[-1] = 1.0
        return cls(betas, "geometric")

    @property
    def n_levels(self) -> int:
        return self.betas.size


@dataclass
class PtDiagnostics:
    round_trips: int
    round_trip_rate: float
    gcb_estimate: float
    per_pair_rejection: list
    sweeps: int
    betas: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "round_trips": int(self.round_trips),
            "round_trip_rate": float(self.round_trip_rate),
            "gcb_estimate": float(self.gcb_estimate),
            "per_pair_rejection": [float(r) for r in self.per_pair_rejection],
            "sweeps": int(self.sweeps),
            "betas": [float(b) for b in self.betas],
        }


def annealed_log_density(beta, log_target, log_ref):
    """``(1 - beta) log pi_ref + beta log pi`` from precomputed pieces.

    ``log_ref=None`` means a flat reference.  At ``beta = 0`` the target term
    is dropped entirely so it never needs to be evaluated.
    """
    beta = np.asarray(beta, dtype=float)
    with np.errstate(invalid="ignore"):
        tgt = np.where(beta > 0, beta * log_target, 0.0)
    if log_ref is None:
        return tgt
    return (1.0 - beta) * log_ref + tgt


class ReplicaEnsemble:
    """State of ``C`` parallel NRPT ensembles with ``R`` levels each.

    ``log_target(x)`` is a fused callable on ``(M, D)`` returning
    ``(logp, score, *extras)``; its evaluations are what the budget counts.
    ``reference`` provides uncounted ``log_density``, ``score`` and ``sample``
    (``None`` for a flat reference).
    """

    def __init__(self, log_target, reference, schedule: AnnealingSchedule, x_init,
                 n_chains: int, cfg: KernelConfig, step_sizes=None, cached=None):
        self.log_target = log_target
        self.reference = reference
        self.schedule = schedule
        self.cfg = cfg
        if reference is None and schedule.betas[0] == 0.0:
            raise ValueError("a flat reference needs beta_min > 0")
        R, C = schedule.n_levels, int(n_chains)
        x = np.asarray(x_init, dtype=float)
        x = np.broadcast_to(x, (C, x.shape[-1])).copy()
        # All levels start at the same point: evaluate once and replicate.
        out = log_target(x) if cached is None else cached
        lt, gt, extras = out[0], out[1], tuple(out[2:])
        self.position = np.broadcast_to(x, (R,) + x.shape).copy()
        self.lt = np.broadcast_to(lt, (R, C)).copy()
        self.gt = np.broadcast_to(gt, (R,) + x.shape).copy()
        self.extras = [np.broadcast_to(e, (R,) + np.shape(e)).copy() for e in extras]
        if step_sizes is None:
            step_sizes = cfg.step_size
        self.step_size = np.broadcast_to(np.asarray(step_sizes, dtype=float).reshape(-1, 1)
                                         if np.ndim(step_sizes) else step_sizes, (R, C)).copy()
        self.n_adapt = 0
        self.iteration = 0
        self.particle = np.tile(np.arange(R)[:, None], (1, C))  # particle id at each level
        self.direction = np.full((R, C), UNKNOWN)  # indexed by particle id
        self.trips = np.zeros((R, C), dtype=np.int64)  # indexed by particle id
        self.reset_swap_stats()
        self._update_lineage()

    # -- bookkeeping ---------------------------------------------------------

    @property
    def n_levels(self) -> int:
        return self.schedule.n_levels

    @property
    def n_chains(self) -> int:
        return self.position.shape[1]

    @property
    def betas(self) -> np.ndarray:
        return self.schedule.betas

    @property
    def flat_reference(self) -> bool:
        return self.reference is None

    def reset_swap_stats(self):
        n = self.n_levels - 1
        self.swap_proposed = np.zeros(n, dtype=np.int64)
        self.swap_rejected = np.zeros(n, dtype=np.int64)
        self.swap_rejection_mass = np.zeros(n)
        self.sweeps_since_reset = 0

    def log_ref(self, level=None) -> np.ndarray | None:
        if self.reference is None:
            return None
        pos = self.position if level is None else self.position[level]
        return self.reference.log_density(pos)

    def annealed(self, level: int, source: int | None = None) -> np.ndarray:
        """Annealed log density of level ``level`` at the state held by ``source``."""
        src = level if source is None else source
        lr = None if self.reference is None else self.reference.log_density(self.position[src])
        return annealed_log_density(self.betas[level], self.lt[src], lr)

    def pairs_for(self, k: int) -> np.ndarray:
        """Deterministic parity: pairs ``(n, n+1)`` with ``n = k mod 2``."""
        return np.arange(k % 2, self.n_levels - 1, 2)

    def sweep_cost(self, k: int) -> int:
        active = int(np.sum(self.betas > 0))
        extra = int(self.betas[0] == 0.0 and k % 2 == 0 and self.n_levels > 1)
        return self.cfg.cost * active + extra

    # -- local exploration ---------------------------------------------------

    def _annealed_fn(self, betas_rows):
        ref = self.reference

        def fn(x):
            out = self.log_target(x)
            lt, gt, extras = out[0], out[1], tuple(out[2:])
            b = betas_rows
            with np.errstate(invalid="ignore"):
                lp = b * lt
                g = b[:, None] * gt
            if ref is not None:
                lp = lp + (1.0 - b) * ref.log_density(x)
                g = g + (1.0 - b)[:, None] * ref.score(x)
            return (lp, g, lt, gt) + extras

        return fn

    def explore(self, rng: np.random.Generator, k: int):
        R, C = self.n_levels, self.n_chains
        active = np.flatnonzero(self.betas > 0)
        if active.size:
            b_rows = np.repeat(self.betas[active], C)
            pos = self.position[active].reshape(-1, self.position.shape[-1])
            lt = self.lt[active].reshape(-1)
            gt = self.gt[active].reshape(pos.shape)
            extras = tuple(e[active].reshape((-1,) + e.shape[2:]) for e in self.extras)
            fn = self._annealed_fn(b_rows)
            with np.errstate(invalid="ignore"):
                lp = b_rows * lt
                g = b_rows[:, None] * gt
            if self.reference is not None:
                lp = lp + (1.0 - b_rows) * self.reference.log_density(pos)
                g = g + (1.0 - b_rows)[:, None] * self.reference.score(pos)
            state = ChainState(position=pos, log_density=lp, score=g,
                               step_size=self.step_size[active].reshape(-1),
                               extras=(lt, gt) + extras, n_adapt=self.n_adapt,
                               n_accepted=np.zeros(pos.shape[0], dtype=np.int64))
            state = kernel_step(state, fn, self.cfg, rng)
            shape = (active.size, C)
            self.position[active] = state.position.reshape(shape + pos.shape[1:])
            self.lt[active] = state.extras[0].reshape(shape)
            self.gt[active] = state.extras[1].reshape(shape + pos.shape[1:])
            for e, new in zip(self.extras, state.extras[2:]):
                e[active] = new.reshape(shape + e.shape[2:])
            self.step_size[active] = state.step_size.reshape(shape)
            self.n_adapt = state.n_adapt
            self.last_accept = state.accepted.reshape(shape)
        if self.betas[0] == 0.0 and k % 2 == 0 and R > 1:
            x0 = self.reference.sample(C, rng)
            out = self.log_target(x0)
            self.position[0] = x0
            self.lt[0], self.gt[0] = out[0], out[1]
            for e, new in zip(self.extras, out[2:]):
                e[0] = new

    # -- communication -------------------------------------------------------

    def swap_log_ratio(self, n: int) -> np.ndarray:
        """Four-term log acceptance ratio of swapping levels ``n`` and ``n+1`` (cached values only)."""
        if not 0 <= n < self.n_levels - 1:
            raise IndexError("pair index out of range")
        with np.errstate(invalid="ignore"):
            r = (self.annealed(n, n + 1) + self.annealed(n + 1, n)
                 - self.annealed(n, n) - self.annealed(n + 1, n + 1))
        return np.where(np.isnan(r), -np.inf, r)

    def apply_swap(self, n: int, mask) -> None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return
        for arr in [self.position, self.lt, self.gt, self.particle, *self.extras]:
            a, b = arr[n, mask].copy(), arr[n + 1, mask].copy()
            arr[n, mask], arr[n + 1, mask] = b, a

    def communicate(self, rng: np.random.Generator, k: int):
        for n in self.pairs_for(k):
            log_r = self.swap_log_ratio(n)
            alpha = np.exp(np.minimum(log_r, 0.0))
            accept = rng.uniform(size=self.n_chains) < alpha
            self.swap_proposed[n] += self.n_chains
            self.swap_rejected[n] += int(np.sum(~accept))
            self.swap_rejection_mass[n] += float(np.sum(1.0 - alpha))
            self.apply_swap(n, accept)
        self._update_lineage()

    def _update_lineage(self):
        cols = np.arange(self.n_chains)
        bottom = self.particle[0]
        finished = self.direction[bottom, cols] == FALLING
        self.trips[bottom, cols] += finished
        self.direction[bottom, cols] = RISING
        top = self.particle[-1]
        self.direction[top, cols] = np.where(self.direction[top, cols] == RISING, FALLING,
                                             self.direction[top, cols])

    # -- diagnostics ---------------------------------------------------------

    def rejection_rates(self) -> np.ndarray:
        if np.any(self.swap_proposed == 0):
            raise InsufficientDataError("some pair has no swap proposals yet")
        return self.swap_rejection_mass / self.swap_proposed

    def diagnostics(self) -> PtDiagnostics:
        try:
            rates = self.rejection_rates()
            gcb = float(rates.sum())
        except InsufficientDataError:
            rates, gcb = np.full(self.n_levels - 1, np.nan), float("nan")
        total = int(self.trips.sum())
        per_chain = total / self.n_chains
        return PtDiagnostics(
            round_trips=total,
            round_trip_rate=per_chain / max(self.iteration, 1),
            gcb_estimate=gcb,
            per_pair_rejection=list(rates),
            sweeps=self.iteration,
            betas=list(self.betas),
        )

    def retarget(self, schedule: AnnealingSchedule):
        """Switch to a new schedule, interpolating adapted log step sizes in beta."""
        old = self.betas
        log_h = np.log(self.step_size)
        new = schedule.betas
        self.step_size = np.exp(np.stack([np.interp(new, old, log_h[:, c]) for c in range(self.n_chains)], axis=1))
        self.schedule = schedule
        self.reset_swap_stats()


def nrpt_sweep(ens: ReplicaEnsemble, rng: np.random.Generator, local_move=None) -> ReplicaEnsemble:
    """One NRPT iteration: local exploration on every level, then parity swaps.

    ``local_move(ens, rng, k)`` replaces the default kernel-based exploration.
    """
    ens.iteration += 1
    k = ens.iteration
    if local_move is None:
        ens.explore(rng, k)
    else:
        local_move(ens, rng, k)
    ens.communicate(rng, k)
    ens.sweeps_since_reset += 1
    return ens


def swap_log_ratio(ens: ReplicaEnsemble, n: int) -> np.ndarray:
    return ens.swap_log_ratio(n)


def round_trip_count(ens: ReplicaEnsemble) -> PtDiagnostics:
    return ens.diagnostics()


def estimate_gcb(ens: ReplicaEnsemble) -> float:
    """Sum over adjacent pairs of the mean swap rejection probability."""
    return float(ens.rejection_rates().sum())


def optimize_schedule(ens: ReplicaEnsemble) -> AnnealingSchedule:
    """Equalize per-pair rejection by inverting the cumulative barrier.

    The cumulative barrier is piecewise linear in beta through
    ``(beta_n, sum_{i<n} r_i)``; new levels sit at equal barrier increments.
    Endpoints are kept.  Degenerate statistics return the input schedule.
    """
    betas = ens.betas
    try:
        rates = ens.rejection_rates()
    except InsufficientDataError:
        return ens.schedule
    total = rates.sum()
    if not np.isfinite(total) or total <= 0:
        return ens.schedule
    # Keep the map strictly increasing when some pair never rejects.
    rates = np.maximum(rates, 1e-9 * total)
    cum = np.concatenate([[0.0], np.cumsum(rates)])
    targets = np.linspace(0.0, cum[-1], betas.size)
    new = np.interp(targets, cum, betas)
    new[0], new[-1] = betas[0], 1.0
    if np.any(np.diff(new) <= 0):
        return ens.schedule
    return AnnealingSchedule(new, "optimized")


def nrpt_cost(schedule: AnnealingSchedule, n_sweeps: int, kernel_cost: int = 1,
              start_iteration: int = 0) -> int:
    """Per-chain target evaluations of ``n_sweeps`` sweeps (initialization excluded)."""
    active = int(np.sum(schedule.betas > 0))
    ks = np.arange(start_iteration + 1, start_iteration + n_sweeps + 1)
    extra = int(np.sum(ks % 2 == 0)) if schedule.betas[0] == 0.0 and schedule.n_levels > 1 else 0
    return kernel_cost * active * n_sweeps + extra


def run_nrpt(log_target, reference, schedule: AnnealingSchedule, x_init, n_chains: int,
             n_sweeps: int, cfg: KernelConfig, rng: np.random.Generator, *,
             optimize: bool = True, pilot_fraction: float = 0.2, step_sizes=None,
             cached=None, on_sweep=None) -> ReplicaEnsemble:
    """Initialize an ensemble at ``x_init`` and run ``n_sweeps`` NRPT sweeps.

    With ``optimize=True`` the schedule is re-fitted once after the pilot
    fraction; swap statistics restart under the new schedule.  ``on_sweep``
    is called as ``on_sweep(ens, k, in_pilot)`` after every sweep.
    """
    ens = ReplicaEnsemble(log_target, reference, schedule, x_init, n_chains, cfg,
                          step_sizes=step_sizes, cached=cached)
    pilot = int(np.floor(pilot_fraction * n_sweeps)) if optimize else 0
    for k in range(1, n_sweeps + 1):
        nrpt_sweep(ens, rng)
        if on_sweep is not None:
            on_sweep(ens, k, k <= pilot)
        if optimize and k == pilot and ens.n_levels > 2:
            new = optimize_schedule(ens)
            log.debug("schedule after pilot: %s", np.round(new.betas, 5))
            ens.retarget(new)
    return ens
