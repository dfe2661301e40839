"""Fast invariant checks behind ``cdsampling validate``.

Each check returns ``(name, passed, detail)``; the suite takes a few
seconds and needs no output directory.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.integrate import trapezoid

from ..interpolant import ConditionalPath, LinearInterpolant
from ..kernels import KernelConfig
from ..metrics import hypervolume, pareto_front, wasserstein2
from ..targets import ReferenceDistribution, make_target
from ..tempering import AnnealingSchedule, ReplicaEnsemble

__all__ = ["run_checks"]


def _fd_score(target, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = h
        g[:, i] = (target.log_density(x + e) - target.log_density(x - e)) / (2 * h)
    return g


def check_scores(rng):
    worst = 0.0
    for task in ("gm2", "gmnu2", "gm16", "gmnu16"):
        t = make_target(task)
        x = t.sample(20, rng) + 0.5 * rng.standard_normal((20, t.dim))
        g = t.score(x)
        fd = _fd_score(t, x)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(g), 1e-2))))
    return "score vs finite differences", worst < 1e-4, f"max rel err {worst:.2e}"


def check_round_trip(rng):
    z = rng.standard_normal(5)
    f = LinearInterpolant(z)
    x = rng.standard_normal((100, 5))
    err = max(float(np.max(np.abs(f.inverse(t, f.forward(t, x)) - x))) for t in (0.01, 0.1, 0.5, 1.0))
    return "interpolant round trip", err < 1e-12, f"max abs err {err:.1e}"


def check_conditional_normalization(rng):
    t = make_target("gm2")
    path = ConditionalPath(LinearInterpolant(np.array([1.0, -2.0])), t)
    res = []
    for tt in (0.2, 0.7):
        xs = np.linspace(-60, 60, 1201) * tt
        xs = xs + path.z[0] * (1 - tt)
        ys = np.linspace(-60, 60, 1201) * tt + path.z[1] * (1 - tt)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        dens = np.exp(path.log_density(tt, pts)).reshape(gx.shape)
        res.append(abs(trapezoid(trapezoid(dens, ys, axis=1), xs) - 1.0))
    return "conditional density integrates to 1", max(res) < 1e-3, f"max |int - 1| = {max(res):.1e}"


def check_swap_identity(rng):
    t = make_target("gm2")
    ref = ReferenceDistribution(np.zeros(2), 2.0)
    sched = AnnealingSchedule.geometric(4, 0.05)
    ens = ReplicaEnsemble(t.value_and_score, ref, sched, np.zeros(2), 8, KernelConfig("MALA", 0.1))
    ens.position = rng.standard_normal(ens.position.shape) * 3
    ens.lt = t.log_density(ens.position.reshape(-1, 2)).reshape(ens.lt.shape)
    worst = 0.0
    for n in range(sched.n_levels - 1):
        a, b = ens.position[n], ens.position[n + 1]
        ell = lambda x: t.log_density(x) - ref.log_density(x)  # noqa: E731
        expect = (sched.betas[n + 1] - sched.betas[n]) * (ell(a) - ell(b))
        worst = max(worst, float(np.max(np.abs(ens.swap_log_ratio(n) - expect))))
    return "swap ratio identity", worst < 1e-10, f"max abs err {worst:.1e}"


def check_w2_bruteforce(rng):
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    cost = ((a[:, None] - b[None]) ** 2).sum(-1)
    brute = min(np.mean(cost[np.arange(5), list(p)]) for p in itertools.permutations(range(5)))
    err = abs(wasserstein2(a, b) - np.sqrt(brute))
    return "W2 vs 5! enumeration", err < 1e-12, f"abs err {err:.1e}"


def check_pareto_hv(rng):
    pts = rng.uniform(size=(20, 2))
    front = pareto_front(pts).front
    brute = np.array([p for p in pts if not np.any(np.all(pts <= p, axis=1) & np.any(pts < p, axis=1))])
    brute = brute[np.argsort(brute[:, 0])]
    same = brute.shape == front.shape and np.allclose(brute, front)
    g = np.linspace(0, 1.1, 1101) + 0.0005
    gx, gy = np.meshgrid(g[:-1], g[:-1], indexing="ij")
    dom = np.zeros(gx.shape, dtype=bool)
    for c, v in pts:
        dom |= (gx >= c) & (gy >= v)
    hv_grid = dom.mean() * 1.1**2
    err = abs(hypervolume(pts) - hv_grid)
    return "Pareto front and hypervolume", same and err < 5e-3, f"front match {same}, HV grid err {err:.1e}"


def check_counter(rng):
    t = make_target("gm2")
    x = rng.standard_normal((7, 2))
    t.log_density(x)
    t.value_and_score(x)
    t.energy(x)
    return "evaluation counter", t.counter.count == 14, f"count {t.counter.count} (expect 14)"


CHECKS = (check_scores, check_round_trip, check_conditional_normalization, check_swap_identity,
          check_w2_bruteforce, check_pareto_hv, check_counter)


def run_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    return [(name, bool(ok), detail) for name, ok, detail in (c(rng) for c in CHECKS)]
