from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from cdsampling.interpolant import ConditionalPath, LinearInterpolant
from cdsampling.kernels import (
    KernelConfig,
    adapt_step_size,
    hmc_step,
    init_chain,
    kernel_step,
    leapfrog,
    mala_log_accept_ratio,
    mala_step,
    rescaled_kernel_step,
)
from cdsampling.targets import GaussianMixtureTarget

from conftest import gaussian


def run_chains(target, kind, n_chains=1000, n_steps=300, burn=100, step=1.0, adapt=True, seed=0, **kw):
    rng = np.random.default_rng(seed)
    cfg = KernelConfig(kind=kind, step_size=step, adapt=adapt, **kw)
    state = init_chain(target.value_and_score, np.zeros((n_chains, target.dim)), step)
    out = []
    for k in range(n_steps):
        state = kernel_step(state, target.value_and_score, cfg, rng)
        if k >= burn:
            out.append(state.position.copy())
    return np.concatenate(out), state


def hist_tv(samples, cdf, lo, hi, bins=100):
    edges = np.linspace(lo, hi, bins + 1)
    h, _ = np.histogram(samples, bins=edges)
    p = np.diff(cdf(edges))
    return 0.5 * np.abs(h / samples.size - p / p.sum()).sum()


def test_defaults_and_contracts():
    assert KernelConfig("MALA").target_acceptance == 0.574
    assert KernelConfig("hmc").target_acceptance == 0.651
    with pytest.raises(ValueError):
        KernelConfig("HMC", leapfrog_steps=0)
    with pytest.raises(ValueError):
        KernelConfig("MALA", step_size=0.0)
    with pytest.raises(ValueError):
        KernelConfig("NUTS")
    cfg = KernelConfig("HMC", leapfrog_steps=3)
    cfg.leapfrog_steps = 0
    t = gaussian(1)
    with pytest.raises(ValueError):
        hmc_step(init_chain(t.value_and_score, np.zeros((1, 1)), 0.1), t.value_and_score, cfg,
                 np.random.default_rng(0))


def test_mala_gaussian_moments():
    x, _ = run_chains(gaussian(1), "MALA", n_chains=500, n_steps=300, burn=100)
    assert x.size == 100_000
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_mala_identity_proposal_accepts():
    t = gaussian(2)
    x = np.array([[0.3, -1.2]])
    lp, g = t.value_and_score(x)
    assert mala_log_accept_ratio(x, lp, g, x, lp, g, 0.5)[0] == pytest.approx(0.0, abs=1e-14)


def test_zero_density_proposal_is_rejected():
    def logpi(x):
        lp = np.where(x[:, 0] > 0, -np.inf, -0.5 * x[:, 0] ** 2)
        return lp, -x

    rng = np.random.default_rng(0)
    cfg = KernelConfig("MALA", step_size=50.0, adapt=False)
    state = init_chain(logpi, np.full((2000, 1), -1.0), 50.0)
    new = mala_step(state, logpi, cfg, rng)
    moved_right = new.position[:, 0] > 0
    assert not moved_right.any()


def test_nonfinite_proposal_counts_evaluation():
    t = GaussianMixtureTarget([[0.0]])
    calls = []

    def logpi(x):
        calls.append(len(x))
        lp, g = t.value_and_score(x)
        return np.full_like(lp, np.nan), g

    rng = np.random.default_rng(0)
    state = init_chain(t.value_and_score, np.zeros((5, 1)), 0.5)
    new = mala_step(state, logpi, KernelConfig("MALA", 0.5, adapt=False), rng)
    assert calls == [5]
    assert not new.accepted.any()
    np.testing.assert_array_equal(new.position, state.position)


def test_leapfrog_energy_error_is_second_order():
    t = gaussian(1)
    x0, p0 = np.array([[1.0]]), np.array([[0.5]])
    errors = []
    for h in (0.02, 0.01, 0.005):
        n = int(round(1.0 / h))
        lp0, g0 = t.value_and_score(x0)
        x, p, (lp, _) = leapfrog(x0, p0, g0, t.value_and_score, h, n)
        errors.append(abs((-lp + 0.5 * p[:, 0] ** 2) - (-lp0 + 0.5 * p0[:, 0] ** 2))[0])
    assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.05)
    assert errors[1] / errors[2] == pytest.approx(4.0, rel=0.05)


def test_hmc_gaussian_16d_variance():
    x, _ = run_chains(gaussian(16), "HMC", n_chains=200, n_steps=150, burn=100, step=0.5, leapfrog_steps=5)
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 0.1)


@pytest.mark.parametrize("kind", ["MALA", "HMC", "RWMH"])
def test_stationarity_histograms(kind, bimodal_1d):
    x, _ = run_chains(gaussian(1), kind, n_chains=500, n_steps=300, burn=100)
    assert hist_tv(x[:, 0], stats.norm.cdf, -5, 5) < 0.03
    gm = GaussianMixtureTarget([[-1.0], [1.5]], weights=[0.4, 0.6])
    x, _ = run_chains(gm, kind, n_chains=500, n_steps=400, burn=200)

    def cdf(v):
        return 0.4 * stats.norm.cdf(v, -1.0) + 0.6 * stats.norm.cdf(v, 1.5)

    assert hist_tv(x[:, 0], cdf, -6, 7) < 0.03


def test_adaptation_direction():
    cfg = KernelConfig("MALA", 0.1)
    state = init_chain(gaussian(1).value_and_score, np.zeros((2, 1)), 0.1)
    up = adapt_step_size(state, np.array([True, False]), cfg)
    assert up.step_size[0] > 0.1 > up.step_size[1]
    with pytest.raises(ValueError):
        adapt_step_size(state, np.array([True, True]), replace(cfg, adapt=False))


def test_adaptation_reaches_target_acceptance():
    t = gaussian(1)
    rng = np.random.default_rng(3)
    cfg = KernelConfig("MALA", step_size=0.5)
    state = init_chain(t.value_and_score, np.zeros((200, 1)), 0.5)
    for _ in range(4000):
        state = mala_step(state, t.value_and_score, cfg, rng)
    acc = []
    for _ in range(1000):
        state = mala_step(state, t.value_and_score, cfg, rng)
        acc.append(state.accepted.mean())
    assert abs(np.mean(acc) - 0.574) < 0.05


def test_step_size_is_clamped():
    cfg = KernelConfig("MALA", 1e3, adapt_rate=100.0)
    state = init_chain(gaussian(1).value_and_score, np.zeros((1, 1)), 1e3)
    assert adapt_step_size(state, np.array([True]), cfg).step_size[0] == 1e3


def test_rescaled_kernel_at_t1_is_base_kernel(bimodal_1d):
    path = ConditionalPath(LinearInterpolant(np.array([0.3])), bimodal_1d)
    cfg = KernelConfig("MALA", 0.7)
    x = np.random.default_rng(0).normal(size=(50, 1))
    a = init_chain(bimodal_1d.value_and_score, x, 0.7)
    b = init_chain(lambda v: path.value_and_score(1.0, v), x, 0.7)
    for _ in range(20):
        a = kernel_step(a, bimodal_1d.value_and_score, cfg, np.random.default_rng(_))
        b = rescaled_kernel_step(b, path, 1.0, cfg, np.random.default_rng(_))
    np.testing.assert_array_equal(a.position, b.position)


def test_rescaled_kernel_stationary_variance():
    t = 0.1
    path = ConditionalPath(LinearInterpolant(np.zeros(1)), gaussian(1))
    cfg = KernelConfig("MALA", 1.0, adapt=False)
    rng = np.random.default_rng(5)
    state = init_chain(lambda v: path.value_and_score(t, v), np.zeros((500, 1)), 1.0)
    xs = []
    for k in range(300):
        state = rescaled_kernel_step(state, path, t, cfg, rng)
        if k >= 100:
            xs.append(state.position[:, 0].copy())
    assert np.var(xs) == pytest.approx(t**2, rel=0.05)


@pytest.mark.parametrize("kind", ["MALA", "HMC", "RWMH"])
def test_rescaled_chain_is_pushforward(kind, bimodal_1d):
    """Shared noise couples the two chains exactly: rescaled = F_t(base)."""
    z, t = np.array([0.5]), 0.25
    f = LinearInterpolant(z)
    path = ConditionalPath(f, bimodal_1d)
    cfg = KernelConfig(kind, 0.8, leapfrog_steps=3, adapt=False)
    x0 = np.broadcast_to(z, (100, 1))
    a = init_chain(bimodal_1d.value_and_score, x0, 0.8)
    b = init_chain(lambda v: path.value_and_score(t, v), x0, 0.8)
    for k in range(30):
        a = kernel_step(a, bimodal_1d.value_and_score, cfg, np.random.default_rng(k))
        b = rescaled_kernel_step(b, path, t, cfg, np.random.default_rng(k))
    np.testing.assert_allclose(b.position, f.forward(t, a.position), atol=1e-9)


def test_determinism(bimodal_1d):
    _, a = run_chains(bimodal_1d, "HMC", n_chains=10, n_steps=50, burn=0, seed=9, leapfrog_steps=3)
    _, b = run_chains(bimodal_1d, "HMC", n_chains=10, n_steps=50, burn=0, seed=9, leapfrog_steps=3)
    np.testing.assert_array_equal(a.position, b.position)
    np.testing.assert_array_equal(a.step_size, b.step_size)


@pytest.mark.parametrize("kind,cost", [("MALA", 1), ("RWMH", 1), ("HMC", 4)])
def test_evaluation_accounting(kind, cost, bimodal_1d):
    cfg = KernelConfig(kind, 0.5, leapfrog_steps=4)
    rng = np.random.default_rng(0)
    state = init_chain(bimodal_1d.value_and_score, np.zeros((3, 1)), 0.5)
    start = bimodal_1d.counter.count
    assert start == 3
    for _ in range(25):
        state = kernel_step(state, bimodal_1d.value_and_score, cfg, rng)
    assert bimodal_1d.counter.count - start == 3 * 25 * cost
    assert cfg.cost == cost


def test_cache_matches_position(bimodal_1d):
    _, state = run_chains(bimodal_1d, "MALA", n_chains=20, n_steps=40, burn=0)
    lp, g = bimodal_1d.value_and_score(state.position)
    np.testing.assert_allclose(state.log_density, lp, rtol=1e-12)
    np.testing.assert_allclose(state.score, g, rtol=1e-12)
