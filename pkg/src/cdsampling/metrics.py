"""Sample-quality metrics and Pareto-front utilities.

Distances between sample sets (exact W2, Kabsch RMSD), energy-based
discrepancies (MMD, histogram TV), a moment error, and the machinery for
cost/quality trade-offs: Pareto fronts, 2-D hypervolume and bootstrap bands.

All functions are pure; the only density evaluations happen in the
energy-based metrics and go through the uncounted ``energy`` accessor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

__all__ = [
    "SampleSet",
    "ParetoRecord",
    "wasserstein2",
    "kabsch_rmsd",
    "pairwise_kabsch_rmsd",
    "mmd_energy",
    "tv_histogram",
    "relative_mae",
    "pareto_front",
    "hypervolume",
    "hypervolume_ratio",
    "bootstrap_front",
    "step_values",
]

log = logging.getLogger(__name__)

EXACT_LIMIT = 2048


@dataclass
class SampleSet:
    points: np.ndarray
    weights: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.all(np.isfinite(self.points)):
            raise ValueError("sample set contains non-finite entries")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(self.points),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be a probability vector over the points")
            self.weights = w

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _points(a) -> np.ndarray:
    return a.points if isinstance(a, SampleSet) else np.atleast_2d(np.asarray(a, dtype=float))


def _subsample(x: np.ndarray, n: int, seed: int) -> np.ndarray:
    if len(x) <= n:
        return x
    idx = np.random.default_rng(seed).choice(len(x), n, replace=False)
    return x[np.sort(idx)]


# -- transport-type distances ------------------------------------------------

def kabsch_rmsd(x, y) -> float:
    """RMSD after optimal proper rotation and translation of ``x`` onto ``y``."""
    p = np.asarray(x, dtype=float).reshape(-1, 3)
    q = np.asarray(y, dtype=float).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError("configurations differ in particle count")
    p = p - p.mean(axis=0)
    q = q - q.mean(axis=0)
    h = p.T @ q
    u, sv, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    # Optimal residual: |p|^2 + |q|^2 - 2 * trace(R H), with the sign fix on the last singular value.
    msd = (np.sum(p * p) + np.sum(q * q) - 2.0 * (sv[0] + sv[1] + d * sv[2])) / len(p)
    return float(np.sqrt(max(msd, 0.0)))


def pairwise_kabsch_rmsd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of Kabsch RMSDs between rows of ``a`` (n, 3N) and ``b`` (m, 3N)."""
    n_part = a.shape[1] // 3
    pa = a.reshape(len(a), n_part, 3)
    pb = b.reshape(len(b), n_part, 3)
    pa = pa - pa.mean(axis=1, keepdims=True)
    pb = pb - pb.mean(axis=1, keepdims=True)
    out = np.empty((len(a), len(b)))
    sq_b = np.sum(pb * pb, axis=(1, 2))
    for i in range(len(a)):
        h = np.einsum("pi,mpj->mij", pa[i], pb)
        u, sv, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(u @ vt))
        d[d == 0] = 1.0
        tr = sv[:, 0] + sv[:, 1] + d * sv[:, 2]
        msd = (np.sum(pa[i] ** 2) + sq_b - 2.0 * tr) / n_part
        out[i] = np.sqrt(np.maximum(msd, 0.0))
    return out


def wasserstein2(a, b, align: bool = False, max_exact: int = EXACT_LIMIT, seed: int = 0) -> float:
    """Exact W2 between two empirical measures with uniform weights.

    Solves the assignment problem on the squared-distance cost (equal sizes)
    or the transport LP for unequal sizes via assignment on replicated
    points.  Sets above ``max_exact`` points are subsampled with ``seed``.
    With ``align`` the ground distance is the Kabsch RMSD of 3-D particle
    configurations.
    """
    x, y = _points(a), _points(b)
    if x.shape[1] != y.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if align and x.shape[1] % 3:
        raise ValueError("aligned W2 needs a dimension divisible by 3")
    x = _subsample(x, max_exact, seed)
    y = _subsample(y, max_exact, seed + 1)
    if align:
        cost = pairwise_kabsch_rmsd(x, y) ** 2
    else:
        cost = cdist(x, y, "sqeuclidean")
    if len(x) != len(y):
        # Balance by replication to a common multiple when sizes are small.
        g = np.lcm(len(x), len(y))
        if g > 4 * max_exact:
            m = min(len(x), len(y))
            x, y = x[:m], y[:m]
            cost = cost[:m, :m]
        else:
            cost = np.repeat(np.repeat(cost, g // len(x), axis=0), g // len(y), axis=1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].mean(), 0.0)))


# -- energy-based discrepancies ---------------------------------------------

def _features(s, target) -> np.ndarray:
    """Negative log densities as a column, or the raw points when ``target`` is None."""
    if target is None:
        return _points(s)
    return np.asarray(target.energy(_points(s)), dtype=float).reshape(-1, 1)


def mmd_energy(a, b, target=None, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel on negative log densities.

    ``target`` supplies ``energy(x) = -log pi(x)``; with ``target=None`` the
    points themselves are the features.  The bandwidth defaults to the
    median pairwise distance of the pooled features.
    """
    ea, eb = _features(a, target), _features(b, target)
    n, m = len(ea), len(eb)
    if n < 2 or m < 2:
        raise ValueError("the unbiased estimator needs at least two points per set")
    if bandwidth is None:
        pooled = np.concatenate([ea, eb])
        d = cdist(pooled, pooled)
        med = np.median(d[np.triu_indices(len(pooled), 1)])
        bandwidth = med if med > 0 else 1.0

    def k(u, v):
        return np.exp(-cdist(u, v, "sqeuclidean") / (2.0 * bandwidth**2))

    kaa, kbb, kab = k(ea, ea), k(eb, eb), k(ea, eb)
    saa = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    return float(saa + sbb - 2.0 * kab.mean())


def tv_histogram(a, b, target=None, bins: int = 100) -> float:
    """Half the L1 distance between normalized histograms over the pooled range."""
    if bins < 2:
        raise ValueError("need at least two bins")
    ea, eb = _features(a, target), _features(b, target)
    if ea.shape[1] != 1 or eb.shape[1] != 1:
        raise ValueError("histograms need scalar features; pass a target")
    ea, eb = ea[:, 0], eb[:, 0]
    ea, eb = ea[np.isfinite(ea)], eb[np.isfinite(eb)]
    lo = min(ea.min(), eb.min())
    hi = max(ea.max(), eb.max())
    if hi <= lo:
        hi = lo + 1.0
    ha, _ = np.histogram(ea, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(eb, bins=bins, range=(lo, hi))
    return float(0.5 * np.abs(ha / ha.sum() - hb / hb.sum()).sum())


def relative_mae(a, truth, observable=None) -> float:
    """``|E_a f - E_truth f| / |E_truth f|`` with ``f(x) = |x|^2`` by default."""
    f = observable or (lambda x: np.sum(x * x, axis=-1))
    ref = float(np.mean(f(_points(truth))))
    if ref == 0:
        raise ValueError("the reference expectation is zero")
    return abs(float(np.mean(f(_points(a)))) - ref) / abs(ref)


# -- Pareto fronts -------------------------------------------------------------

@dataclass
class ParetoRecord:
    points: np.ndarray  # (n, 2) of (cost, value)
    front: np.ndarray  # non-dominated subset sorted by cost
    grid: np.ndarray | None = None
    median: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def value_at(self, cost) -> np.ndarray:
        return step_values(self.front, cost)


def pareto_front(points) -> ParetoRecord:
    """Non-dominated subset under (minimize cost, minimize value).

    Exact duplicates are kept once.  The front, sorted by cost, has strictly
    decreasing values and reads as a right-continuous step function.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("need at least one point")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    front = []
    best = np.inf
    for i in order:
        c, v = pts[i]
        if v < best:
            front.append((c, v))
            best = v
    return ParetoRecord(points=pts, front=np.array(front))


def step_values(front: np.ndarray, cost) -> np.ndarray:
    """Best value reachable at each ``cost`` (``inf`` below the cheapest point)."""
    cost = np.atleast_1d(np.asarray(cost, dtype=float))
    idx = np.searchsorted(front[:, 0], cost, side="right") - 1
    out = np.full(cost.shape, np.inf)
    ok = idx >= 0
    out[ok] = front[idx[ok], 1]
    return out


def hypervolume(front, ref=(1.1, 1.1)) -> float:
    """Area dominated by ``front`` and bounded by ``ref`` (both objectives minimized)."""
    f = pareto_front(front).front
    f = f[(f[:, 0] < ref[0]) & (f[:, 1] < ref[1])]
    if len(f) == 0:
        return 0.0
    xs = np.append(f[:, 0], ref[0])
    return float(np.sum((xs[1:] - xs[:-1]) * (ref[1] - f[:, 1])))


def _normalize(values, lo, hi):
    rng = hi - lo
    if rng <= 0:
        return np.full_like(values, 0.5, dtype=float)
    return (values - lo) / rng


def hypervolume_ratio(fronts: dict, ref=(1.1, 1.1)) -> dict:
    """HV of each method's front over HV of the pooled non-dominated front.

    Objectives are min-max normalized over all methods' points first; an
    objective with zero range is set to 0.5.
    """
    if not fronts:
        raise ValueError("need at least one method")
    allp = np.concatenate([np.atleast_2d(np.asarray(p, dtype=float)) for p in fronts.values()])
    lo, hi = allp.min(axis=0), allp.max(axis=0)

    def norm(p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return np.column_stack([_normalize(p[:, j], lo[j], hi[j]) for j in range(2)])

    ref_hv = hypervolume(norm(allp), ref)
    out = {}
    for name, p in fronts.items():
        out[name] = hypervolume(norm(p), ref) / ref_hv if ref_hv > 0 else 1.0
    return out


def bootstrap_front(replicates: dict, iterations: int = 50, seed: int = 0, grid=None,
                    quantiles=(5.0, 95.0)) -> ParetoRecord:
    """Median Pareto front with percentile bands from resampled replicates.

    ``replicates`` maps a configuration key to a list of ``(cost, value)``
    pairs, one per replicate.  Each iteration resamples every
    configuration's replicates with replacement, averages them, and builds
    the front of the resulting configuration means.  Fronts are evaluated on
    a common cost grid (the union of observed costs by default).
    """
    rng = np.random.default_rng(seed)
    keys = list(replicates)
    reps = [np.atleast_2d(np.asarray(replicates[k], dtype=float)) for k in keys]
    if grid is None:
        grid = np.unique(np.concatenate([r[:, 0] for r in reps]))
    grid = np.asarray(grid, dtype=float)
    curves = []
    for _ in range(int(iterations)):
        means = []
        for r in reps:
            idx = rng.integers(0, len(r), len(r))
            means.append(r[idx].mean(axis=0))
        curves.append(step_values(pareto_front(np.array(means)).front, grid))
    curves = np.array(curves)
    with np.errstate(invalid="ignore"):
        med = np.median(curves, axis=0)
        lower = np.percentile(curves, quantiles[0], axis=0)
        upper = np.percentile(curves, quantiles[1], axis=0)
    allp = np.concatenate(reps)
    rec = pareto_front(allp)
    rec.grid, rec.median, rec.lower, rec.upper = grid, med, lower, upper
    rec.meta = {"iterations": int(iterations), "configs": [str(k) for k in keys]}
    return rec
