"""Two-stage conditional diffusion sampler.

Stage 1 runs NRPT on the conditional density ``pi_{t0|z}``, which for small
``t0`` is a shrunken copy of the target around the anchor ``z``.  Stage 2
carries those samples to ``t = 1`` along the conditional path, either with
the closed-form SDE (optionally MH-corrected), the probability-flow ODE, or
by applying ``F_{t0}^{-1}`` directly.

Target values are always cached in the pre-image ("y-space"): a state ``x``
at time ``t`` stores ``log pi(y)`` and ``grad log pi(y)`` with
``y = F_t^{-1}(x)``.  Conditional values at any ``t`` follow without a new
evaluation, which is what makes online ``t0`` tuning free.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .interpolant import T_MIN, ConditionalPath, LinearInterpolant, _check_time
from .kernels import ChainState, KernelConfig, kernel_step
from .targets import ReferenceDistribution, Target
from .tempering import AnnealingSchedule, PtDiagnostics, ReplicaEnsemble, nrpt_cost, run_nrpt

__all__ = [
    "CdsConfig",
    "CdsRun",
    "Stage1Result",
    "time_grid",
    "stage1",
    "stage2_sde",
    "stage2_ode",
    "inverse_map_transport",
    "skl_time_gradient",
    "optimize_t0",
    "run_cds",
    "stage2_cost",
]

log = logging.getLogger(__name__)

TRANSPORTS = ("SDE", "ODE", "INVERSE_MAP")


@dataclass
class CdsConfig:
    """Hyperparameters of one CDS run.

    ``sigma=None`` means a constant noise level equal to ``base_step``.
    ``n_steps`` is the number of integrator steps ``N`` and ``pt_steps`` the
    number of NRPT sweeps ``K``; :meth:`with_budget` derives both from a
    per-chain evaluation budget and the split ``rho``.
    """

    t0: float = 0.1
    n_steps: int = 100
    time_schedule: str = "uniform"
    sigma: float | list | None = None
    pt_steps: int = 100
    corrector_steps: int = 0
    corrector_kind: str = "MALA"
    transport: str = "SDE"
    base_step: float = 0.1
    n_replicas: int = 5
    beta_min: float = 0.01
    reference: str = "gaussian"
    kernel: str = "MALA"
    leapfrog_steps: int = 5
    adapt_rate: float = 0.1
    optimize_schedule: bool = True
    pilot_fraction: float = 0.2
    anchor: str = "mean"
    deterministic_init: bool = False
    optimize_t0: bool = False
    t0_lr: float = 0.01
    budget_split: float | None = None

    def __post_init__(self):
        self.transport = self.transport.upper()
        self.corrector_kind = self.corrector_kind.upper()
        self.kernel = self.kernel.upper()
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if not T_MIN < self.t0 <= 1.0:
            raise ValueError(f"t0 must lie in ({T_MIN}, 1]")
        if self.n_steps < 0 or self.pt_steps < 0 or self.corrector_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.time_schedule not in ("uniform", "geometric"):
            raise ValueError("time_schedule must be 'uniform' or 'geometric'")
        if self.anchor not in ("mean", "sample"):
            raise ValueError("anchor must be 'mean' or 'sample'")
        if self.reference not in ("flat", "gaussian"):
            raise ValueError("reference must be 'flat' or 'gaussian'")
        if self.n_replicas < 2:
            raise ValueError("NRPT needs at least two replicas")
        if self.budget_split is not None and not 0.0 <= self.budget_split <= 1.0:
            raise ValueError("budget_split must lie in [0, 1]")
        if self.sigma is not None and np.any(np.asarray(self.sigma, dtype=float) < 0):
            raise ValueError("noise levels must be non-negative")

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(kind=self.kernel, step_size=self.base_step, leapfrog_steps=self.leapfrog_steps,
                            adapt_rate=self.adapt_rate)

    def corrector_config(self) -> KernelConfig:
        return KernelConfig(kind=self.corrector_kind, step_size=self.base_step,
                            leapfrog_steps=self.leapfrog_steps, adapt=False)

    def schedule(self) -> AnnealingSchedule:
        return AnnealingSchedule.geometric(self.n_replicas, self.beta_min,
                                           include_zero=self.reference == "gaussian")

    def times(self) -> np.ndarray:
        return time_grid(self.t0, self.n_steps, self.time_schedule)

    def noise(self) -> np.ndarray:
        if self.sigma is None:
            return np.full(self.n_steps, self.base_step)
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim == 0:
            return np.full(self.n_steps, float(s))
        if s.shape != (self.n_steps,):
            raise ValueError("a sigma list needs one entry per integrator step")
        return s

    def stage1_cost(self, pt_steps: int | None = None) -> int:
        """Per-chain stage-1 evaluations including the one at initialization."""
        if self.deterministic_init:
            return 1
        k = self.pt_steps if pt_steps is None else pt_steps
        return 1 + nrpt_cost(self.schedule(), k, self.kernel_config().cost)

    def total_cost(self) -> int:
        return self.stage1_cost() + stage2_cost(self)

    def with_budget(self, budget: int, rho: float | None = None) -> "CdsConfig":
        """Split a per-chain budget: ``rho`` to stage 1, the rest to stage 2.

        Both stages get the largest step count that fits their share; the
        realized total never exceeds ``budget``.  When stage 2 is free
        (inverse map, or ODE without correctors) stage 1 gets everything.
        """
        rho = self.budget_split if rho is None else rho
        if rho is None:
            raise ValueError("no budget split given")
        free = self.transport == "INVERSE_MAP" or (self.transport == "ODE" and self.corrector_steps == 0)
        s1 = int(budget) if free else int(math.floor(rho * budget))
        k = 0
        if not self.deterministic_init:
            per = nrpt_cost(self.schedule(), 2, self.kernel_config().cost) / 2
            k = max(int((s1 - 1) // per) + 1, 0)
            while k > 0 and self.stage1_cost(k) > s1:
                k -= 1
        cfg = replace(self, pt_steps=k, budget_split=rho)
        left = budget - cfg.stage1_cost()
        if self.transport == "INVERSE_MAP":
            return cfg
        per_step = 1 + self.corrector_steps * cfg.corrector_config().cost
        if self.corrector_steps == 0 and self.transport == "SDE":
            n = max(left + 1, 1)  # the first drift reuses the stage-1 cache
        elif self.corrector_steps == 0:
            n = self.n_steps  # ODE without correction is free
        else:
            n = max(left // per_step, 1)
        if self.sigma is not None and np.ndim(self.sigma):
            raise ValueError("budget splitting needs a scalar sigma")
        return replace(cfg, n_steps=int(n))


def time_grid(t0: float, n_steps: int, kind: str = "uniform") -> np.ndarray:
    """``t0 = t_0 < ... < t_N = 1``; empty interval when ``t0 = 1``."""
    if n_steps == 0 or t0 >= 1.0:
        return np.array([min(t0, 1.0)])
    if kind == "geometric":
        ts = np.geomspace(t0, 1.0, n_steps + 1)
    else:
        ts = np.linspace(t0, 1.0, n_steps + 1)
    ts[0], ts[-1] = t0, 1.0
    return ts


def stage2_cost(cfg: CdsConfig) -> int:
    """Per-chain stage-2 evaluations.

    Each step after the first needs the score at its start; correctors need
    a value at the new time plus ``M`` kernel steps.  The first drift reuses
    the cached score at ``t0``; the probability-flow ODE needs no score.
    """
    n = len(cfg.times()) - 1
    if cfg.transport == "INVERSE_MAP" or n == 0:
        return 0
    m = cfg.corrector_steps
    if m > 0:
        return n * (1 + m * cfg.corrector_config().cost)
    if cfg.transport == "ODE":
        return 0
    return int(np.sum(cfg.noise()[1:n] > 0))


class _TimeConditioned:
    """Fused ``x -> (log pi_{t|z}, score, log pi(y), grad log pi(y))`` with mutable ``t``."""

    def __init__(self, target: Target, z: np.ndarray, t: float, n_chains: int):
        self.target = target
        self.z = z
        self.t = float(t)
        self.n_chains = n_chains

    def _z_rows(self, m):
        if self.z.ndim == 1:
            return self.z
        return np.tile(self.z, (m // self.n_chains, 1))

    def preimage(self, x):
        z = self._z_rows(x.shape[0])
        return z + (x - z) / self.t

    def conditional(self, ly, gy):
        return ly - self.target.dim * np.log(self.t), gy / self.t

    def __call__(self, x):
        ly, gy = self.target.value_and_score(self.preimage(x))
        lt, gt = self.conditional(ly, gy)
        return lt, gt, ly, gy


@dataclass
class Stage1Result:
    x: np.ndarray
    log_target: np.ndarray  # log pi at the pre-image of x
    score_target: np.ndarray
    t0: float
    diagnostics: PtDiagnostics | None
    ensemble: ReplicaEnsemble | None = None
    t0_trace: list = field(default_factory=list)
    step_size: np.ndarray | None = None  # adapted top-level step, target scale


def stage1(target: Target, reference: ReferenceDistribution, z, cfg: CdsConfig, n_chains: int,
           rng: np.random.Generator) -> Stage1Result:
    """NRPT on ``pi_{t0|z}`` from all replicas at ``z``; returns the ``beta = 1`` level.

    ``t0`` may move during the pilot phase when ``cfg.optimize_t0`` is set.
    """
    z = np.asarray(z, dtype=float)
    t0 = _check_time(cfg.t0)
    fn = _TimeConditioned(target, z, t0, n_chains)
    x_init = np.broadcast_to(z, (n_chains, target.dim)).copy()
    cached = fn(x_init)
    if cfg.deterministic_init or cfg.pt_steps == 0:
        return Stage1Result(x_init, cached[2], cached[3], t0, None,
                            step_size=np.full(n_chains, cfg.base_step))

    flat = cfg.reference == "flat"
    trace = [t0]

    def on_sweep(ens, k, in_pilot):
        if not (cfg.optimize_t0 and in_pilot and k % 2 == 0):
            return
        t_old = fn.t
        if flat:
            # No reference level to borrow from: draw and evaluate a fresh batch.
            x_ref = reference.sample(n_chains, rng)
            ref_cache = fn(x_ref)[2:]
        else:
            x_ref, ref_cache = ens.position[0], (ens.extras[0][0], ens.extras[1][0])
        grad = skl_time_gradient(
            t_old, ens.position[-1], x_ref, None, reference, z=z,
            cond_cache=(ens.extras[0][-1], ens.extras[1][-1]), ref_cache=ref_cache)
        t_new = float(np.clip(t_old - cfg.t0_lr * grad, T_MIN, 1.0 - T_MIN))
        if t_new != t_old:
            _retime(ens, fn, t_new)
        trace.append(t_new)

    ens = run_nrpt(fn, None if flat else reference, cfg.schedule(), x_init, n_chains, cfg.pt_steps,
                   cfg.kernel_config(), rng, optimize=cfg.optimize_schedule,
                   pilot_fraction=cfg.pilot_fraction, cached=cached, on_sweep=on_sweep)
    return Stage1Result(ens.position[-1].copy(), ens.extras[0][-1].copy(), ens.extras[1][-1].copy(),
                        fn.t, ens.diagnostics(), ens, trace, ens.step_size[-1] / fn.t)


def _retime(ens: ReplicaEnsemble, fn: _TimeConditioned, t_new: float):
    """Move every replica to time ``t_new`` keeping its pre-image (and cache) fixed."""
    ratio = t_new / fn.t
    zr = fn._z_rows(ens.n_chains)
    ens.position = zr + ratio * (ens.position - zr)
    fn.t = t_new
    ens.lt, ens.gt = fn.conditional(ens.extras[0], ens.extras[1])
    ens.step_size = ens.step_size * np.where(ens.betas > 0, ratio, 1.0)[:, None]


def _path(target, z):
    return ConditionalPath(LinearInterpolant(z), target)


def _cond_from_cache(ly, gy, t, dim):
    return ly - dim * np.log(t), gy / t


def _mark_failed(failed, x_new, x_old):
    bad = ~np.all(np.isfinite(x_new), axis=-1)
    newly = bad & ~failed
    if newly.any():
        log.warning("%d chain(s) diverged during transport", int(newly.sum()))
    failed = failed | bad
    return failed, np.where(failed[:, None], x_old, x_new)


def _transport(x0, cache, cfg: CdsConfig, path: ConditionalPath, rng, sigmas, step_size=None,
               on_step=None):
    x = np.array(x0, dtype=float)
    ly, gy = (np.asarray(c, dtype=float).copy() for c in cache)
    ts = cfg.times()
    dim = x.shape[-1]
    failed = ~np.all(np.isfinite(x), axis=-1)
    m = cfg.corrector_steps
    ccfg = cfg.corrector_config()
    if step_size is None:
        step_size = np.full(x.shape[0], cfg.base_step)
    have_cache = True
    for n in range(len(ts) - 1):
        t, dt = ts[n], ts[n + 1] - ts[n]
        s = sigmas[n]
        drift = path.velocity(t, x)
        if s > 0:
            if not have_cache:
                ly, gy = path.target.value_and_score(path.interpolant.inverse(t, x))
            drift = drift + 0.5 * s**2 * gy / t
        with np.errstate(invalid="ignore", over="ignore"):
            x_new = x + dt * drift
            if s > 0:
                x_new = x_new + s * np.sqrt(dt) * rng.standard_normal(x.shape)
        failed, x = _mark_failed(failed, x_new, x)
        have_cache = False
        if m > 0:
            t1 = ts[n + 1]
            ly, gy = path.target.value_and_score(path.interpolant.inverse(t1, x))
            lt, gt = _cond_from_cache(ly, gy, t1, dim)
            state = ChainState(x, lt, gt, step_size.copy(), extras=(ly, gy),
                               n_accepted=np.zeros(x.shape[0], dtype=np.int64))

            def fn(xp, t1=t1):
                a, b = path.target.value_and_score(path.interpolant.inverse(t1, xp))
                return _cond_from_cache(a, b, t1, dim) + (a, b)

            for _ in range(m):
                state = kernel_step(state, fn, ccfg, rng, scale=t1)
            failed, x = _mark_failed(failed, state.position, x)
            ly, gy = state.extras
            have_cache = True
        if on_step is not None:
            on_step(n + 1, ts[n + 1], x)
    return x, failed


def stage2_sde(x0, cfg: CdsConfig, path: ConditionalPath, rng: np.random.Generator, cache=None,
               step_size=None, return_failed: bool = False, on_step=None):
    """Euler-Maruyama on the conditional diffusion from ``t0`` to 1, with optional correctors.

    ``cache = (log pi(y), grad log pi(y))`` at the pre-image of ``x0``; without
    it one evaluation per chain is spent to fill it.  ``on_step(n, t_n, x)``
    is called after every step, correctors included.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if cache is None:
        cache = path.target.value_and_score(path.interpolant.inverse(cfg.times()[0], x0))
    x, failed = _transport(x0, cache, cfg, path, rng, cfg.noise(), step_size, on_step)
    return (x, failed) if return_failed else x


def stage2_ode(x0, cfg: CdsConfig, path: ConditionalPath, rng: np.random.Generator | None = None,
               cache=None, step_size=None, return_failed: bool = False):
    """Euler on ``dx = u_{t|z}(x) dt``; with no correctors this needs no evaluations."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if cache is None:
        cache = (np.zeros(x0.shape[0]), np.zeros_like(x0))
    rng = np.random.default_rng(0) if rng is None else rng
    x, failed = _transport(x0, cache, cfg, path, rng, np.zeros(max(cfg.n_steps, 1)), step_size)
    return (x, failed) if return_failed else x


def inverse_map_transport(x0, t0: float, path: ConditionalPath):
    """Apply ``F_{t0}^{-1}``; zero evaluations."""
    return path.interpolant.inverse(t0, x0)


def skl_time_gradient(t, x_cond, x_ref, path, reference, *, z=None, cond_cache=None,
                      ref_cache=None, return_stderr: bool = False):
    """Monte Carlo estimate of ``d/dt SKL(nu_{t|z}, nu_ref)``.

    Uses ``s_t(x) = -(x - z) . grad log pi(y) / t^2 - D / t`` (``y`` the
    pre-image of ``x``), which is the exact time derivative of the
    normalized log density because the linear map preserves the normalizer.
    The unknown log-normalizer in ``log(pi_t / pi_ref)`` is cancelled by
    centering ``s_t`` over the conditional samples.

    Caches hold ``(log pi(y), grad log pi(y))`` per sample; when absent the
    target is evaluated through ``path``.
    """
    x_cond = np.atleast_2d(np.asarray(x_cond, dtype=float))
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=float))
    if x_cond.shape[0] == 0 or x_ref.shape[0] == 0:
        raise ValueError("skl_time_gradient needs non-empty sample sets")
    t = _check_time(t)
    if z is None:
        z = path.z
    z = np.asarray(z, dtype=float)
    dim = x_cond.shape[-1]

    def pieces(x, cache):
        if cache is None:
            if path is None:
                raise ValueError("need a path when no cache is provided")
            return path.target.value_and_score(path.interpolant.inverse(t, x))
        return cache

    ly_c, gy_c = pieces(x_cond, cond_cache)
    _, gy_r = pieces(x_ref, ref_cache)
    s_c = -np.sum((x_cond - z) * gy_c, axis=-1) / t**2 - dim / t
    s_r = -np.sum((x_ref - z) * gy_r, axis=-1) / t**2 - dim / t
    ell = ly_c - dim * np.log(t) - reference.log_density(x_cond)
    ok = np.isfinite(s_c) & np.isfinite(ell)
    s_c, ell = s_c[ok], ell[ok]
    s_r = s_r[np.isfinite(s_r)]
    a = (s_c - s_c.mean()) * (ell - ell.mean())
    est = float(a.mean() - s_r.mean())
    if not return_stderr:
        return est
    se = math.sqrt(a.var(ddof=1) / a.size + s_r.var(ddof=1) / s_r.size)
    return est, se


def optimize_t0(initial_t: float, iterations: int, lr: float, gradient_fn, t_min: float = T_MIN) -> float:
    """Projected SGD ``t <- clip(t - lr * g(t), t_min, 1 - t_min)``."""
    t = float(np.clip(initial_t, t_min, 1.0 - t_min))
    if lr == 0:
        return float(initial_t)
    for _ in range(int(iterations)):
        t = float(np.clip(t - lr * gradient_fn(t), t_min, 1.0 - t_min))
    return t


@dataclass
class CdsRun:
    anchor: np.ndarray
    samples: np.ndarray
    failed: np.ndarray
    t0: float
    stage1_diag: PtDiagnostics | None
    ledger: dict
    config: dict
    seed: int | None = None
    t0_trace: list = field(default_factory=list)
    stage1_samples: np.ndarray | None = None

    @property
    def valid_samples(self) -> np.ndarray:
        return self.samples[~self.failed]

    @property
    def evaluations(self) -> int:
        """Per-chain target evaluations over the whole run."""
        return int(self.ledger["total"])

    def manifest(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "t0": self.t0,
            "t0_trace": [float(v) for v in self.t0_trace],
            "ledger": self.ledger,
            "n_failed": int(self.failed.sum()),
            "stage1": None if self.stage1_diag is None else self.stage1_diag.to_dict(),
        }


def _per_chain(delta: int, n_chains: int) -> int:
    if delta % n_chains:
        raise AssertionError("evaluation count is not a multiple of the chain count")
    return delta // n_chains


def run_cds(target: Target, reference: ReferenceDistribution, cfg: CdsConfig, n_chains: int,
            seed: int | np.random.Generator | None = None, stage1_result: Stage1Result | None = None) -> CdsRun:
    """Full sampler: anchor, stage 1 and the configured transport.

    Passing ``stage1_result`` reuses a previous stage-1 output (its cost is
    then reported as zero here).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if cfg.anchor == "mean":
        z = reference.mean.copy()
    else:
        z = reference.sample(n_chains, rng)
    c0 = target.counter.count
    if stage1_result is None:
        s1 = stage1(target, reference, z, cfg, n_chains, rng)
    else:
        s1 = stage1_result
        z = s1.ensemble.log_target.z if s1.ensemble is not None else z
    c1 = target.counter.count
    path = _path(target, z)
    run_cfg = replace(cfg, t0=s1.t0) if s1.t0 != cfg.t0 else cfg
    if cfg.transport == "INVERSE_MAP":
        x = inverse_map_transport(s1.x, s1.t0, path)
        failed = ~np.all(np.isfinite(x), axis=-1)
    elif cfg.transport == "SDE":
        x, failed = stage2_sde(s1.x, run_cfg, path, rng, cache=(s1.log_target, s1.score_target),
                               step_size=s1.step_size, return_failed=True)
    else:
        x, failed = stage2_ode(s1.x, run_cfg, path, rng, cache=(s1.log_target, s1.score_target),
                               step_size=s1.step_size, return_failed=True)
    c2 = target.counter.count
    ledger = {
        "stage1": _per_chain(c1 - c0, n_chains),
        "stage2": _per_chain(c2 - c1, n_chains),
    }
    ledger["total"] = ledger["stage1"] + ledger["stage2"]
    conf = asdict(cfg)
    return CdsRun(anchor=np.asarray(z), samples=x, failed=failed, t0=s1.t0, stage1_diag=s1.diagnostics,
                  ledger=ledger, config=conf, seed=seed if isinstance(seed, (int, type(None))) else None,
                  t0_trace=s1.t0_trace, stage1_samples=s1.x)
