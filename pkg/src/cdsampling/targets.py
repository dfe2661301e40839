"""Analytic target distributions with exact evaluation accounting.

Every target exposes an unnormalized ``log_density``, its analytic ``score``
and a fused ``value_and_score``.  All three accept a single point of shape
``(D,)`` or a batch of shape ``(..., D)``.  The evaluation counter is charged
one unit per *point*: a call on a batch of ``C`` points costs ``C``, and a
fused value+score call costs the same as a value-only call.  Samplers run
``C`` chains in lock-step, so the per-chain cost of a run is the counter
total divided by ``C``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "EvalCounter",
    "Target",
    "GaussianMixtureTarget",
    "LennardJonesTarget",
    "ReferenceDistribution",
    "ModeSearchError",
    "lj_energy",
    "lj_pair_energy",
    "find_mode",
    "make_target",
    "TASKS",
]


class EvalCounter:
    """Thread-safe monotone counter of density evaluations."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._count += int(n)

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> int:
        """Zero the counter and return the value it held."""
        with self._lock:
            value, self._count = self._count, 0
        return value


def _n_points(x: np.ndarray) -> int:
    return 1 if x.ndim == 1 else int(np.prod(x.shape[:-1]))


class Target:
    """Base class: subclasses implement ``_value_and_score`` on ``(..., D)``."""

    name = "target"

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(dim)
        self.counter = EvalCounter()

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected trailing dimension {self.dim}, got shape {x.shape}")
        return x

    def _value_and_score(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _value(self, x: np.ndarray) -> np.ndarray:
        return self._value_and_score(x)[0]

    def log_density(self, x) -> np.ndarray:
        x = self._check(x)
        self.counter.add(_n_points(x))
        return self._value(x)

    def score(self, x) -> np.ndarray:
        x = self._check(x)
        self.counter.add(_n_points(x))
        return self._value_and_score(x)[1]

    def value_and_score(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = self._check(x)
        self.counter.add(_n_points(x))
        return self._value_and_score(x)

    # Uncounted access for metrics and diagnostics ("cost of measurement").
    def energy(self, x) -> np.ndarray:
        return -self._value(self._check(x))


class GaussianMixtureTarget(Target):
    """Finite mixture of Gaussians with full or diagonal covariances."""

    name = "gm"

    def __init__(self, means, covariances=None, weights=None, name: str | None = None):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        k, dim = means.shape
        super().__init__(dim)
        if covariances is None:
            covariances = np.broadcast_to(np.eye(dim), (k, dim, dim))
        covariances = np.asarray(covariances, dtype=float)
        if covariances.shape == (k, dim):
            covariances = np.stack([np.diag(c) for c in covariances])
        if covariances.shape != (k, dim, dim):
            raise ValueError("covariances must have shape (K, D) or (K, D, D)")
        weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
        if weights.shape != (k,) or np.any(weights <= 0) or not np.isclose(weights.sum(), 1.0):
            raise ValueError("weights must be strictly positive and sum to one")
        try:
            chol = np.linalg.cholesky(covariances)
        except np.linalg.LinAlgError as err:
            raise ValueError("covariances must be symmetric positive definite") from err
        if not np.allclose(covariances, np.swapaxes(covariances, 1, 2)):
            raise ValueError("covariances must be symmetric positive definite")
        if name is not None:
            self.name = name
        self.means = means
        self.covariances = covariances
        self.weights = weights / weights.sum()
        self._chol = chol
        self._precisions = np.linalg.inv(covariances)
        off = covariances * (1.0 - np.eye(dim))
        # diagonal covariances skip the (K, D, D) contraction
        self._diag_prec = None if off.any() else 1.0 / np.diagonal(covariances, axis1=1, axis2=2)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        self._log_norm = np.log(self.weights) - 0.5 * (dim * np.log(2 * np.pi) + logdet)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _component_terms(self, x):
        diff = x[..., None, :] - self.means  # (..., K, D)
        if self._diag_prec is not None:
            pdiff = diff * self._diag_prec
        else:
            pdiff = np.einsum("kij,...kj->...ki", self._precisions, diff)
        quad = np.einsum("...ki,...ki->...k", diff, pdiff)
        return self._log_norm - 0.5 * quad, pdiff

    def _value(self, x):
        comp, _ = self._component_terms(x)
        return logsumexp(comp, axis=-1)

    def _value_and_score(self, x):
        comp, pdiff = self._component_terms(x)
        lp = logsumexp(comp, axis=-1)
        resp = np.exp(comp - lp[..., None])
        return lp, -np.einsum("...k,...ki->...i", resp, pdiff)

    def responsibilities(self, x) -> np.ndarray:
        comp, _ = self._component_terms(self._check(x))
        return np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact i.i.d. draws (uncounted)."""
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", self._chol[idx], eps)

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian_mixture",
            "name": self.name,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "weights": self.weights.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureTarget":
        return cls(d["means"], d["covariances"], d["weights"], name=d.get("name"))


def lj_pair_energy(r, epsilon: float = 1.0, sigma: float = 1.0):
    """12-6 pair potential ``4 eps [(s/r)^12 - (s/r)^6]``."""
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        s6 = (sigma / np.asarray(r, dtype=float)) ** 6
        return 4.0 * epsilon * (s6 * s6 - s6)


def lj_energy(x, n_particles: int, epsilon: float = 1.0, sigma: float = 1.0) -> np.ndarray:
    """Sum of 12-6 pair energies over all particle pairs.

    ``x`` has shape ``(..., 3N)``.  Coincident particles give ``+inf``.
    """
    pos = np.asarray(x, dtype=float).reshape(*np.shape(x)[:-1], n_particles, 3)
    i, j = np.triu_indices(n_particles, k=1)
    r = np.linalg.norm(pos[..., i, :] - pos[..., j, :], axis=-1)
    e = lj_pair_energy(r, epsilon, sigma)
    with np.errstate(invalid="ignore"):
        out = e.sum(axis=-1)
    return np.where(np.isnan(out), np.inf, out)


class LennardJonesTarget(Target):
    """Boltzmann density ``exp(-E)`` of a Lennard-Jones cluster.

    The cluster is kept bound by a harmonic pull of every particle towards
    the centroid, ``harmonic/2 * sum_i |x_i - mean(x)|^2``; without it the
    density is not normalizable.  Set ``harmonic=0`` for the bare potential.
    """

    name = "lj"

    def __init__(self, n_particles: int = 13, epsilon: float = 1.0, sigma: float = 1.0,
                 harmonic: float = 0.5):
        if epsilon <= 0 or sigma <= 0:
            raise ValueError("epsilon and sigma must be positive")
        super().__init__(3 * n_particles)
        self.n_particles = int(n_particles)
        self.epsilon = float(epsilon)
        self.sigma = float(sigma)
        self.harmonic = float(harmonic)
        self.name = f"lj{n_particles}"
        self._i, self._j = np.triu_indices(self.n_particles, k=1)

    def _value_and_score(self, x):
        n = self.n_particles
        pos = x.reshape(*x.shape[:-1], n, 3)
        diff = pos[..., :, None, :] - pos[..., None, :, :]  # (..., N, N, 3)
        r2 = np.einsum("...k,...k->...", diff, diff)
        r2 = r2 + np.where(np.eye(n, dtype=bool), np.inf, 0.0)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            s6 = (self.sigma**2 / r2) ** 3
            pair = 4.0 * self.epsilon * (s6 * s6 - s6)
            # (dE/dr) / r for every ordered pair; the diagonal is exactly 0
            coef = -24.0 * self.epsilon * (2.0 * s6 * s6 - s6) / r2
            energy = 0.5 * pair.sum(axis=(-1, -2))
            grad = np.einsum("...ij,...ijk->...ik", coef, diff)
        centered = pos - pos.mean(axis=-2, keepdims=True)
        energy = energy + 0.5 * self.harmonic * np.einsum("...ij,...ij->...", centered, centered)
        grad = grad + self.harmonic * centered
        bad = ~np.isfinite(energy) | ~np.all(np.isfinite(grad), axis=(-1, -2))
        logp = np.where(bad, -np.inf, -energy)
        score = np.where(bad[..., None], np.nan, -grad.reshape(x.shape))
        return logp, score

    def _value(self, x):
        e = lj_energy(x, self.n_particles, self.epsilon, self.sigma)
        pos = x.reshape(*x.shape[:-1], self.n_particles, 3)
        centered = pos - pos.mean(axis=-2, keepdims=True)
        e = e + 0.5 * self.harmonic * np.einsum("...ij,...ij->...", centered, centered)
        return np.where(np.isfinite(e), -e, -np.inf)

    def to_dict(self) -> dict:
        return {"kind": "lennard_jones", "n_particles": self.n_particles,
                "epsilon": self.epsilon, "sigma": self.sigma, "harmonic": self.harmonic}


class ReferenceDistribution:
    """Isotropic Gaussian ``N(mean, std^2 I)`` with exact sampling."""

    def __init__(self, mean, std: float = 1.0):
        if std <= 0:
            raise ValueError("std must be positive")
        self.mean = np.asarray(mean, dtype=float)
        self.std = float(std)
        self.dim = self.mean.shape[-1]

    def log_density(self, x) -> np.ndarray:
        d = (np.asarray(x, dtype=float) - self.mean) / self.std
        return -0.5 * np.sum(d * d, axis=-1) - self.dim * (np.log(self.std) + 0.5 * np.log(2 * np.pi))

    def score(self, x) -> np.ndarray:
        return -(np.asarray(x, dtype=float) - self.mean) / self.std**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, self.dim))


class ModeSearchError(RuntimeError):
    """Gradient ascent produced a non-finite iterate."""

    def __init__(self, message: str, last_finite: np.ndarray, step: int):
        super().__init__(message)
        self.last_finite = last_finite
        self.step = step


def find_mode(target: Target, x_init, steps: int = 1000, lr: float = 0.1,
              max_move: float | None = None) -> np.ndarray:
    """Plain gradient ascent on ``log_density``.

    ``max_move`` optionally caps the Euclidean length of each update, which
    keeps stiff potentials (Lennard-Jones) from blowing up on the first step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x_init, dtype=float).copy()
    for k in range(steps):
        _, g = target.value_and_score(x)
        move = lr * g
        if max_move is not None:
            norm = np.linalg.norm(move)
            if norm > max_move:
                move *= max_move / norm
        new = x + move
        if not np.all(np.isfinite(new)):
            raise ModeSearchError(f"non-finite iterate at step {k}", x, k)
        x = new
    return x


# -- task registry -----------------------------------------------------------

def _spread_means(k: int, dim: int, half_width: float, seed: int, min_sep: float) -> np.ndarray:
    """Uniform means in ``[-a, a]^D`` placed one at a time, each at least ``min_sep`` from the rest.

    A placement that gets stuck is restarted from scratch (same generator).
    """
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        means = []
        for _ in range(1000):
            m = rng.uniform(-half_width, half_width, size=dim)
            if all(np.linalg.norm(m - q) >= min_sep for q in means):
                means.append(m)
                if len(means) == k:
                    return np.array(means)
    raise RuntimeError("could not place mixture means; relax min_sep")


def _cluster_means(k: int, dim: int, half_width: float, seed: int, min_sep: float,
                   n_isolated: int, gap: tuple[float, float]) -> np.ndarray:
    """A spread cluster of ``k - n_isolated`` means plus remote ones.

    Each remote mean lies between ``gap[0]`` and ``gap[1]`` from the nearest
    mean already placed.
    """
    means = _spread_means(k - n_isolated, dim, half_width, seed, min_sep)
    rng = np.random.default_rng(seed + 1)
    reach = half_width + gap[1]
    while len(means) < k:
        p = rng.uniform(-reach, reach, size=dim)
        d = np.min(np.linalg.norm(means - p, axis=1))
        if gap[0] <= d <= gap[1]:
            means = np.vstack([means, p])
    return means


@dataclass(frozen=True)
class GmLayout:
    """Mixture geometry in units of the component standard deviation ``std``."""

    n_components: int
    dim: int
    half_width: float
    min_sep: float
    seed: int
    uniform: bool
    std: float = 1.0
    n_isolated: int = 0
    gap: tuple = (8.0, 10.0)

    def means(self) -> np.ndarray:
        if self.n_isolated:
            unit = _cluster_means(self.n_components, self.dim, self.half_width, self.seed,
                                  self.min_sep, self.n_isolated, self.gap)
        else:
            unit = _spread_means(self.n_components, self.dim, self.half_width, self.seed, self.min_sep)
        return unit * self.std


# GM-2: seven overlapping broad components that local kernels can traverse,
# plus one component 8-10 standard deviations away from the rest.
_GM2 = dict(n_components=8, dim=2, half_width=4.0, min_sep=3.0, seed=0, std=3.0, n_isolated=1)
_GM16 = dict(n_components=8, dim=16, half_width=3.0, min_sep=6.0, seed=2025)

TASKS = {
    "gm2": GmLayout(uniform=True, **_GM2),
    "gmnu2": GmLayout(uniform=False, **_GM2),
    "gm16": GmLayout(uniform=True, **_GM16),
    "gmnu16": GmLayout(uniform=False, **_GM16),
}


def make_target(task: str, **kwargs) -> Target:
    """Build a named benchmark target.

    ``gm2``, ``gmnu2``, ``gm16``, ``gmnu16`` and ``lj13`` are the benchmark
    tasks; ``gauss1`` is a standard normal used for smoke tests.
    """
    task = task.lower()
    if task == "gauss1":
        return GaussianMixtureTarget(np.zeros((1, 1)), name=task)
    if task in TASKS:
        lay = TASKS[task]
        means = lay.means()
        if lay.uniform:
            weights = None
        else:
            weights = np.arange(1, lay.n_components + 1, dtype=float)
            weights /= weights.sum()
        cov = np.full((lay.n_components, lay.dim), lay.std**2)
        return GaussianMixtureTarget(means, covariances=cov, weights=weights, name=task)
    if task.startswith("lj"):
        return LennardJonesTarget(n_particles=int(task[2:] or 13), **kwargs)
    raise KeyError(f"unknown task {task!r}")
