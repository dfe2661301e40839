import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdsampling.kernels import KernelConfig
from cdsampling.targets import GaussianMixtureTarget, ReferenceDistribution, make_target
from cdsampling.tempering import (
    AnnealingSchedule,
    InsufficientDataError,
    ReplicaEnsemble,
    annealed_log_density,
    estimate_gcb,
    nrpt_cost,
    nrpt_sweep,
    optimize_schedule,
    round_trip_count,
    run_nrpt,
    swap_log_ratio,
)

from conftest import gaussian


def make_ensemble(target, ref, betas, n_chains=4, x0=None, step=0.5):
    sched = AnnealingSchedule(np.asarray(betas, dtype=float))
    x0 = np.zeros(target.dim) if x0 is None else x0
    return ReplicaEnsemble(target.value_and_score, ref, sched, x0, n_chains, KernelConfig("MALA", step))


def test_schedule_contract():
    with pytest.raises(ValueError):
        AnnealingSchedule([0.0, 0.5, 0.4, 1.0])
    with pytest.raises(ValueError):
        AnnealingSchedule([0.0, 0.9])
    g = AnnealingSchedule.geometric(5, 0.01)
    assert g.betas[0] == 0.0 and g.betas[1] == pytest.approx(0.01) and g.betas[-1] == 1.0
    flat = AnnealingSchedule.geometric(5, 0.01, include_zero=False)
    assert flat.betas[0] == pytest.approx(0.01) and flat.n_levels == 5
    with pytest.raises(ValueError):
        ReplicaEnsemble(gaussian(1).value_and_score, None, g, np.zeros(1), 2, KernelConfig())


def test_annealed_endpoints():
    lt, lr = np.array([-3.0, -np.inf]), np.array([-1.0, -2.0])
    np.testing.assert_array_equal(annealed_log_density(1.0, lt, lr), lt)
    np.testing.assert_array_equal(annealed_log_density(0.0, lt, lr), lr)
    np.testing.assert_array_equal(annealed_log_density(0.5, lt, None), 0.5 * lt)


def test_collapsed_path_has_constant_ratios(rng):
    ref = ReferenceDistribution(np.zeros(2), 1.0)
    t = gaussian(2)
    ens = make_ensemble(t, ref, [0.0, 0.5, 1.0])
    ens.position = rng.normal(size=ens.position.shape)
    ens.lt = t.log_density(ens.position)
    for n in range(2):
        np.testing.assert_allclose(ens.swap_log_ratio(n), 0.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_levels=st.integers(2, 7), flat=st.booleans())
def test_swap_ratio_geometric_identity(seed, n_levels, flat):
    rng = np.random.default_rng(seed)
    t = make_target("gmnu2")
    ref = None if flat else ReferenceDistribution(rng.normal(size=2), 2.0)
    sched = AnnealingSchedule.geometric(n_levels, 0.02, include_zero=not flat)
    ens = ReplicaEnsemble(t.value_and_score, ref, sched, np.zeros(2), 6, KernelConfig())
    ens.position = rng.normal(size=ens.position.shape) * 4
    ens.lt = t.log_density(ens.position)
    before = t.counter.count
    for n in range(n_levels - 1):
        a, b = ens.position[n], ens.position[n + 1]
        lr_a = 0.0 if flat else ref.log_density(a)
        lr_b = 0.0 if flat else ref.log_density(b)
        ell_a, ell_b = t.energy(a) * -1 - lr_a, t.energy(b) * -1 - lr_b
        expect = (sched.betas[n + 1] - sched.betas[n]) * (ell_a - ell_b)
        np.testing.assert_allclose(swap_log_ratio(ens, n), expect, rtol=1e-10, atol=1e-10)
    assert t.counter.count == before


def test_identical_states_accept():
    t = make_target("gm2")
    ens = make_ensemble(t, ReferenceDistribution(np.zeros(2), 3.0), [0.0, 0.3, 1.0], x0=np.array([1.0, 2.0]))
    for n in range(2):
        r = ens.swap_log_ratio(n)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)
        np.testing.assert_allclose(np.exp(np.minimum(r, 0.0)), 1.0, atol=1e-12)


def test_swap_is_an_involution(rng):
    t = make_target("gm2")
    ens = make_ensemble(t, ReferenceDistribution(np.zeros(2), 3.0), [0.0, 0.3, 0.6, 1.0], n_chains=5)
    ens.position = rng.normal(size=ens.position.shape)
    ens.lt = t.log_density(ens.position)
    snap = [a.copy() for a in (ens.position, ens.lt, ens.gt, ens.particle)]
    mask = np.array([True, False, True, True, False])
    ens.apply_swap(1, mask)
    assert not np.array_equal(ens.position, snap[0])
    ens.apply_swap(1, mask)
    for a, b in zip((ens.position, ens.lt, ens.gt, ens.particle), snap):
        np.testing.assert_array_equal(a, b)


def test_parity_alternates():
    ens = make_ensemble(gaussian(1), ReferenceDistribution(np.zeros(1)), np.linspace(0, 1, 6))
    np.testing.assert_array_equal(ens.pairs_for(1), [1, 3])
    np.testing.assert_array_equal(ens.pairs_for(2), [0, 2, 4])
    rng = np.random.default_rng(0)
    for k in range(1, 7):
        before = ens.swap_proposed.copy()
        nrpt_sweep(ens, rng)
        touched = np.flatnonzero(ens.swap_proposed != before)
        assert np.all(touched % 2 == k % 2)


def test_identical_distributions_always_swap():
    t = gaussian(1)
    ens = make_ensemble(t, ReferenceDistribution(np.zeros(1)), [0.0, 1.0], n_chains=20)
    rng = np.random.default_rng(0)
    for _ in range(200):
        nrpt_sweep(ens, rng)
    assert ens.swap_rejected.sum() == 0
    assert estimate_gcb(ens) == pytest.approx(0.0, abs=1e-12)


def test_two_level_round_trips_are_deterministic():
    t = gaussian(1)
    ens = make_ensemble(t, ReferenceDistribution(np.zeros(1)), [0.0, 1.0], n_chains=3)
    rng = np.random.default_rng(0)
    for _ in range(400):
        nrpt_sweep(ens, rng)
    diag = round_trip_count(ens)
    # Pair 0 is proposed on even sweeps only: the particles alternate ends
    # every two sweeps and together finish one round trip per two sweeps.
    assert diag.round_trips == 3 * 199
    assert diag.round_trip_rate == pytest.approx(199 / 400)


def test_no_accepted_swaps_no_round_trips():
    t = GaussianMixtureTarget([[50.0]])
    ens = make_ensemble(t, ReferenceDistribution(np.zeros(1)), [0.0, 1.0], n_chains=3, x0=np.array([50.0]))
    rng = np.random.default_rng(0)
    for _ in range(50):
        nrpt_sweep(ens, rng)
    assert ens.swap_rejected.sum() == ens.swap_proposed.sum() > 0
    assert round_trip_count(ens).round_trips == 0


def test_round_trips_invariant_to_relabeling():
    def run(perm):
        t = make_target("gm2")
        ens = make_ensemble(t, ReferenceDistribution(np.zeros(2), 4.0), [0.0, 0.2, 0.5, 1.0], n_chains=8)
        if perm is not None:
            ens.particle = perm[ens.particle]
            inv = np.argsort(perm)
            ens.direction, ens.trips = ens.direction[inv], ens.trips[inv]
        rng = np.random.default_rng(2)
        for _ in range(300):
            nrpt_sweep(ens, rng)
        return round_trip_count(ens).round_trips

    assert run(None) == run(np.array([3, 1, 0, 2])) > 0


def test_gcb_requires_proposals():
    ens = make_ensemble(gaussian(1), ReferenceDistribution(np.zeros(1)), [0.0, 0.5, 1.0])
    with pytest.raises(InsufficientDataError):
        estimate_gcb(ens)
    assert np.isnan(round_trip_count(ens).gcb_estimate)


def test_gcb_extremes():
    ens = make_ensemble(gaussian(1), ReferenceDistribution(np.zeros(1)), np.linspace(0, 1, 5))
    ens.swap_proposed[:] = 10
    assert estimate_gcb(ens) == 0.0
    ens.swap_rejection_mass[:] = 10
    assert estimate_gcb(ens) == pytest.approx(4.0)


def gaussian_path_gcb(n_levels, mu=3.0, seed=0):
    t = GaussianMixtureTarget([[mu]])
    ref = ReferenceDistribution(np.zeros(1))
    ens = run_nrpt(t.value_and_score, ref, AnnealingSchedule(np.linspace(0, 1, n_levels)), np.zeros(1),
                   200, 600, KernelConfig("MALA", 1.0), np.random.default_rng(seed), optimize=False)
    return ens


def test_gcb_stable_under_refinement():
    mu = 3.0
    coarse = estimate_gcb(gaussian_path_gcb(9, mu))
    fine = estimate_gcb(gaussian_path_gcb(17, mu))
    assert abs(fine - coarse) / fine < 0.10
    # mean-shift path: the barrier is mu / sqrt(pi)
    assert fine == pytest.approx(mu / np.sqrt(np.pi), rel=0.1)


def test_round_trip_rate_relation():
    ens = gaussian_path_gcb(17)
    lam = estimate_gcb(ens)
    tau = round_trip_count(ens).round_trip_rate
    expect = 1.0 / (2.0 + 2.0 * lam)
    assert expect / 2 < tau < expect * 2


def _ens_with_rates(rates):
    n = len(rates) + 1
    ens = make_ensemble(gaussian(1), ReferenceDistribution(np.zeros(1)), np.linspace(0, 1, n))
    ens.swap_proposed[:] = 1000
    ens.swap_rejection_mass[:] = 1000 * np.asarray(rates, dtype=float)
    return ens


def test_optimize_schedule_fixed_point():
    ens = _ens_with_rates([0.3] * 5)
    np.testing.assert_allclose(optimize_schedule(ens).betas, ens.betas, atol=1e-6)


def test_optimize_schedule_clusters_barrier():
    ens = _ens_with_rates([0.01, 0.01, 0.9, 0.01])
    new = optimize_schedule(ens).betas
    lo, hi = ens.betas[2], ens.betas[3]
    inside = np.sum((new > lo) & (new < hi))
    assert inside >= 2
    assert new[0] == 0.0 and new[-1] == 1.0 and np.all(np.diff(new) > 0)


@settings(max_examples=40, deadline=None)
@given(rates=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
def test_optimize_schedule_contract(rates):
    ens = _ens_with_rates(rates)
    new = optimize_schedule(ens).betas
    assert new[0] == ens.betas[0] and new[-1] == 1.0
    assert np.all(np.diff(new) > 0)
    assert new.size == ens.betas.size


def test_optimize_schedule_degenerate_input():
    ens = make_ensemble(gaussian(1), ReferenceDistribution(np.zeros(1)), [0.0, 0.5, 1.0])
    assert optimize_schedule(ens) is ens.schedule
    ens.swap_proposed[:] = 5
    assert optimize_schedule(ens) is ens.schedule


@pytest.mark.parametrize("flat,kind", [(False, "MALA"), (True, "MALA"), (False, "HMC"), (True, "HMC")])
def test_cost_matches_counter(flat, kind):
    t = make_target("gm2")
    ref = None if flat else ReferenceDistribution(np.zeros(2), 3.0)
    sched = AnnealingSchedule.geometric(5, 0.05, include_zero=not flat)
    cfg = KernelConfig(kind, 0.3, leapfrog_steps=3)
    ens = run_nrpt(t.value_and_score, ref, sched, np.zeros(2), 7, 33, cfg, np.random.default_rng(0))
    assert t.counter.count == 7 * (1 + nrpt_cost(sched, 33, cfg.cost))
    assert ens.iteration == 33


class ThreeStateReference:
    """Law ``q`` on {0, 1, 2}; states are stored as floats in a 1-D column."""

    def __init__(self, q):
        self.logq = np.log(np.asarray(q))

    def log_density(self, x):
        return self.logq[np.asarray(x)[..., 0].astype(int)]

    def score(self, x):
        return np.zeros_like(x)

    def sample(self, n, rng):
        return rng.choice(3, size=(n, 1), p=np.exp(self.logq)).astype(float)


def test_discrete_toy_matches_product_measure():
    p = np.array([0.7, 0.05, 0.25])
    q = np.array([0.2, 0.5, 0.3])
    logp = np.log(p)

    def log_target(x):
        return logp[x[:, 0].astype(int)], np.zeros_like(x)

    ref = ThreeStateReference(q)
    betas = np.array([0.0, 0.5, 1.0])
    sched = AnnealingSchedule(betas)
    C = 100
    ens = ReplicaEnsemble(log_target, ref, sched, np.zeros(1), C, KernelConfig())

    def local_move(ens, rng, k):
        # MH with a uniform proposal on every level, target pi_beta
        for n, b in enumerate(betas):
            prop = rng.integers(0, 3, size=(C, 1)).astype(float)
            lt_new = log_target(prop)[0]
            cur = annealed_log_density(b, ens.lt[n], ref.log_density(ens.position[n]))
            new = annealed_log_density(b, lt_new, ref.log_density(prop))
            acc = np.log(rng.uniform(size=C)) < new - cur
            ens.position[n] = np.where(acc[:, None], prop, ens.position[n])
            ens.lt[n] = np.where(acc, lt_new, ens.lt[n])

    rng = np.random.default_rng(0)
    counts = np.zeros((3, 3, 3))
    for k in range(1100):
        nrpt_sweep(ens, rng, local_move)
        if k >= 100:
            idx = ens.position[:, :, 0].astype(int)
            np.add.at(counts, (idx[0], idx[1], idx[2]), 1)
    emp = counts / counts.sum()
    levels = []
    for b in betas:
        w = q ** (1 - b) * p**b
        levels.append(w / w.sum())
    prod = np.zeros((3, 3, 3))
    for i, j, k in itertools.product(range(3), repeat=3):
        prod[i, j, k] = levels[0][i] * levels[1][j] * levels[2][k]
    assert counts.sum() == 100_000
    assert 0.5 * np.abs(emp - prod).sum() < 0.02


def test_retarget_resets_statistics():
    t = make_target("gm2")
    ens = run_nrpt(t.value_and_score, ReferenceDistribution(np.zeros(2), 3.0), AnnealingSchedule.geometric(4, 0.05),
                   np.zeros(2), 5, 20, KernelConfig(), np.random.default_rng(0), optimize=False)
    new = AnnealingSchedule(np.array([0.0, 0.1, 0.4, 1.0]))
    ens.retarget(new)
    assert ens.swap_proposed.sum() == 0
    np.testing.assert_array_equal(ens.betas, new.betas)
    assert ens.step_size.shape == (4, 5)


def test_run_nrpt_is_deterministic():
    def once():
        t = make_target("gm2")
        ens = run_nrpt(t.value_and_score, None, AnnealingSchedule.geometric(5, 0.01, include_zero=False),
                       np.zeros(2), 4, 60, KernelConfig(), np.random.default_rng(42))
        return ens.position, ens.diagnostics().to_dict()

    (a, da), (b, db) = once(), once()
    np.testing.assert_array_equal(a, b)
    assert da == db
