"""Local MCMC kernels (MALA, HMC, random-walk MH) over batches of chains.

Kernels act on a :class:`ChainState` holding ``C`` independent chains at
once.  The log density is any callable ``logpi(x) -> (logp, score, *extras)``
on ``(C, D)`` arrays; ``extras`` are per-chain arrays (leading axis ``C``)
that the kernel carries along and swaps in on acceptance, so callers can
cache quantities such as the raw target value alongside an annealed one.

Each state stores a per-chain step size ``h`` in the target's own scale.
Passing ``scale=s`` runs the kernel with step ``s * h``; for the linear
interpolant this is exactly the pushforward of the base kernel through
``F_t`` when ``s = t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

__all__ = [
    "KernelConfig",
    "ChainState",
    "init_chain",
    "mala_log_accept_ratio",
    "mala_step",
    "hmc_step",
    "leapfrog",
    "rwmh_step",
    "kernel_step",
    "adapt_step_size",
    "rescaled_kernel_step",
]

LogDensityFn = Callable[[np.ndarray], tuple]

DEFAULT_ACCEPTANCE = {"MALA": 0.574, "HMC": 0.651, "RWMH": 0.234}
STEP_BOUNDS = (1e-12, 1e3)


@dataclass
class KernelConfig:
    kind: str = "MALA"
    step_size: float = 0.1
    leapfrog_steps: int = 5
    target_acceptance: float | None = None
    adapt: bool = True
    adapt_rate: float = 0.1

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in DEFAULT_ACCEPTANCE:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.kind == "HMC" and self.leapfrog_steps < 1:
            raise ValueError("HMC needs leapfrog_steps >= 1")
        if self.target_acceptance is None:
            self.target_acceptance = DEFAULT_ACCEPTANCE[self.kind]
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")

    @property
    def cost(self) -> int:
        """Target evaluations per kernel step (per chain)."""
        return self.leapfrog_steps if self.kind == "HMC" else 1


@dataclass
class ChainState:
    position: np.ndarray
    log_density: np.ndarray
    score: np.ndarray
    step_size: np.ndarray
    extras: tuple = ()
    n_adapt: int = 0
    accepted: np.ndarray | None = None
    n_accepted: np.ndarray = field(default=None)
    n_steps: int = 0

    @property
    def n_chains(self) -> int:
        return self.position.shape[0]

    @property
    def acceptance_rate(self) -> np.ndarray:
        return self.n_accepted / max(self.n_steps, 1)


def _unpack(out):
    return out[0], out[1], tuple(out[2:])


def init_chain(logpi: LogDensityFn, x, step_size, cached=None) -> ChainState:
    """Build a state at ``x`` (shape ``(C, D)``); evaluates once unless ``cached`` given."""
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    lp, g, extras = _unpack(logpi(x) if cached is None else cached)
    c = x.shape[0]
    return ChainState(
        position=x,
        log_density=np.asarray(lp, dtype=float).copy(),
        score=np.asarray(g, dtype=float).copy(),
        step_size=np.broadcast_to(np.asarray(step_size, dtype=float), (c,)).copy(),
        extras=tuple(np.asarray(e).copy() for e in extras),
        n_accepted=np.zeros(c, dtype=np.int64),
    )


def _select(mask, new, old):
    m = mask.reshape(mask.shape + (1,) * (np.ndim(new) - 1))
    return np.where(m, new, old)


def _finalize(state, cfg, accept, prop, lp, g, extras) -> ChainState:
    new = replace(
        state,
        position=_select(accept, prop, state.position),
        log_density=np.where(accept, lp, state.log_density),
        score=_select(accept, g, state.score),
        extras=tuple(_select(accept, e_new, e_old) for e_new, e_old in zip(extras, state.extras)),
        accepted=accept,
        n_accepted=state.n_accepted + accept,
        n_steps=state.n_steps + 1,
    )
    if cfg.adapt:
        new = adapt_step_size(new, accept, cfg)
    return new


def _accept(log_alpha, rng, n):
    u = rng.uniform(size=n)
    log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
    with np.errstate(divide="ignore"):
        return np.log(u) < log_alpha


def mala_log_accept_ratio(x, lp, g, x_prop, lp_prop, g_prop, h):
    """Log Metropolis-Hastings ratio for the Langevin proposal with step ``h``."""
    h2 = np.asarray(h, dtype=float) ** 2
    hb = h2[..., None] if np.ndim(h2) else h2
    fwd = x_prop - x - 0.5 * hb * g
    bwd = x - x_prop - 0.5 * hb * g_prop
    with np.errstate(invalid="ignore", over="ignore"):
        log_q = (np.sum(fwd * fwd, axis=-1) - np.sum(bwd * bwd, axis=-1)) / (2.0 * h2)
        out = lp_prop - lp + log_q
    return np.where(np.isfinite(out) | (out == np.inf), out, -np.inf)


def mala_step(state: ChainState, logpi: LogDensityFn, cfg: KernelConfig,
              rng: np.random.Generator, scale: float = 1.0) -> ChainState:
    """One MALA step; one fused evaluation per chain (the proposal)."""
    h = state.step_size * scale
    x = state.position
    xi = rng.standard_normal(x.shape)
    with np.errstate(invalid="ignore", over="ignore"):
        prop = x + 0.5 * (h**2)[:, None] * state.score + h[:, None] * xi
    lp, g, extras = _unpack(logpi(prop))
    log_alpha = mala_log_accept_ratio(x, state.log_density, state.score, prop, lp, g, h)
    return _finalize(state, cfg, _accept(log_alpha, rng, x.shape[0]), prop, lp, g, extras)


def rwmh_step(state: ChainState, logpi: LogDensityFn, cfg: KernelConfig,
              rng: np.random.Generator, scale: float = 1.0) -> ChainState:
    h = state.step_size * scale
    x = state.position
    prop = x + h[:, None] * rng.standard_normal(x.shape)
    lp, g, extras = _unpack(logpi(prop))
    with np.errstate(invalid="ignore"):
        log_alpha = lp - state.log_density
    return _finalize(state, cfg, _accept(log_alpha, rng, x.shape[0]), prop, lp, g, extras)


def leapfrog(x, p, score, logpi: LogDensityFn, h, n_steps: int):
    """``n_steps`` leapfrog steps of size ``h`` (broadcast per chain) with unit mass.

    Returns the end point, end momentum and ``logpi`` output there; costs
    ``n_steps`` evaluations per chain.
    """
    with np.errstate(invalid="ignore", over="ignore"):
        p = p + 0.5 * h * score
        for i in range(n_steps):
            x = x + h * p
            out = logpi(x)
            p = p + (h if i < n_steps - 1 else 0.5 * h) * out[1]
    return x, p, out


def hmc_step(state: ChainState, logpi: LogDensityFn, cfg: KernelConfig,
             rng: np.random.Generator, scale: float = 1.0) -> ChainState:
    """Unit-mass HMC with ``cfg.leapfrog_steps`` leapfrog steps.

    Costs ``leapfrog_steps`` evaluations per chain; the starting point is cached.
    """
    if cfg.leapfrog_steps < 1:
        raise ValueError("HMC needs leapfrog_steps >= 1")
    h = (state.step_size * scale)[:, None]
    p0 = rng.standard_normal(state.position.shape)
    x, p, out = leapfrog(state.position, p0, state.score, logpi, h, cfg.leapfrog_steps)
    lp, g, extras = _unpack(out)
    with np.errstate(invalid="ignore", over="ignore"):
        h_old = -state.log_density + 0.5 * np.sum(p0 * p0, axis=-1)
        h_new = -lp + 0.5 * np.sum(p * p, axis=-1)
        log_alpha = h_old - h_new
    log_alpha = np.where(np.isfinite(log_alpha), log_alpha, -np.inf)
    return _finalize(state, cfg, _accept(log_alpha, rng, x.shape[0]), x, lp, g, extras)


_KERNELS = {"MALA": mala_step, "HMC": hmc_step, "RWMH": rwmh_step}


def kernel_step(state: ChainState, logpi: LogDensityFn, cfg: KernelConfig,
                rng: np.random.Generator, scale: float = 1.0) -> ChainState:
    return _KERNELS[cfg.kind](state, logpi, cfg, rng, scale)


def adapt_step_size(state: ChainState, accepted, cfg: KernelConfig) -> ChainState:
    """Robbins-Monro update ``log h += rate / sqrt(k) * (1[accepted] - target)``."""
    if not cfg.adapt:
        raise ValueError("adaptation is disabled in this config")
    k = state.n_adapt + 1
    gamma = cfg.adapt_rate / np.sqrt(k)
    log_h = np.log(state.step_size) + gamma * (np.asarray(accepted, dtype=float) - cfg.target_acceptance)
    return replace(state, step_size=np.clip(np.exp(log_h), *STEP_BOUNDS), n_adapt=k)


def rescaled_kernel_step(state: ChainState, path, t: float, cfg: KernelConfig,
                         rng: np.random.Generator) -> ChainState:
    """Base kernel pushed forward through ``F_t``; leaves ``pi_{t|z}`` invariant.

    ``state`` must cache values of ``path`` at time ``t``; its step sizes are
    in the target's scale and are contracted by ``t`` here.
    """
    return kernel_step(state, lambda x: path.value_and_score(t, x), cfg, rng, scale=t)
