import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdsampling.targets import (
    TASKS,
    GaussianMixtureTarget,
    LennardJonesTarget,
    ModeSearchError,
    ReferenceDistribution,
    find_mode,
    lj_energy,
    lj_pair_energy,
    make_target,
)

from conftest import central_diff, gaussian


def test_standard_normal_at_mode():
    t = gaussian(1)
    assert t.log_density(np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
    assert t.log_density(np.zeros(1)) == pytest.approx(-0.9189385332, abs=1e-9)


def test_symmetric_pair_matches_direct_sum():
    a = 1.7
    t = GaussianMixtureTarget([[-a], [a]])
    direct = np.log(0.5 * np.exp(-0.5 * a**2) / np.sqrt(2 * np.pi) * 2)
    assert t.log_density(np.zeros(1)) == pytest.approx(direct, rel=1e-12)
    x = np.array([[0.3], [-0.3]])
    lp = t.log_density(x)
    assert lp[0] == pytest.approx(lp[1], abs=1e-14)


def test_dominant_component():
    mu = np.array([[0.0, 0.0], [40.0, 40.0]])
    cov = np.array([[[1.0, 0.3], [0.3, 2.0]], [[1.0, 0.0], [0.0, 1.0]]])
    t = GaussianMixtureTarget(mu, cov, weights=[0.9, 0.1])
    det = np.linalg.det(cov[0])
    dominant = np.log(0.9) - np.log(2 * np.pi) - 0.5 * np.log(det)
    assert t.log_density(mu[0]) == pytest.approx(dominant, abs=1e-10)


def test_full_and_diagonal_covariances_agree(rng):
    means = rng.normal(size=(3, 4))
    diag = rng.uniform(0.5, 2.0, size=(3, 4))
    a = GaussianMixtureTarget(means, diag)
    full = np.stack([np.diag(d) for d in diag])
    full[:, 0, 1] = full[:, 1, 0] = 1e-300  # forces the dense path
    b = GaussianMixtureTarget(means, full)
    x = rng.normal(size=(20, 4))
    np.testing.assert_allclose(a.log_density(x), b.log_density(x), rtol=1e-12)
    np.testing.assert_allclose(a.score(x), b.score(x), rtol=1e-10, atol=1e-12)


def test_gaussian_score_is_minus_x(rng):
    x = rng.normal(size=(10, 3))
    np.testing.assert_allclose(gaussian(3).score(x), -x, atol=1e-14)


@pytest.mark.parametrize("task", sorted(TASKS))
def test_gm_scores_match_finite_differences(task, rng):
    t = make_target(task)
    x = t.sample(100, rng) + rng.normal(size=(100, t.dim))
    fd = central_diff(t.log_density, x)
    g = t.score(x)
    rel = np.abs(g - fd) / np.maximum(np.abs(g), 1e-2)
    assert rel.max() < 1e-4


def test_lj_score_matches_finite_differences(rng):
    t = LennardJonesTarget(13)
    base = make_target("lj13")
    x0 = _icosahedron_like(rng)
    x = x0 + 0.05 * rng.normal(size=(100, 39))
    fd = central_diff(t.log_density, x, h=1e-6)
    g = t.score(x)
    rel = np.abs(g - fd) / np.maximum(np.abs(g), 1e-2)
    assert rel.max() < 1e-4
    assert base.dim == 39


def _icosahedron_like(rng):
    phi = (1 + 5**0.5) / 2
    v = [(0, s1, s2 * phi) for s1 in (-1, 1) for s2 in (-1, 1)]
    v = [p for q in v for p in (q, (q[1], q[2], q[0]), (q[2], q[0], q[1]))]
    pts = np.vstack([[0.0, 0.0, 0.0], np.array(v) / np.linalg.norm(v[0]) * 1.1])
    return pts.ravel()


def test_lj_pair_energy_landmarks():
    assert lj_pair_energy(1.0) == pytest.approx(0.0, abs=1e-15)
    assert lj_pair_energy(2 ** (1 / 6)) == pytest.approx(-1.0, abs=1e-12)
    assert lj_pair_energy(2 * 2 ** (1 / 6), epsilon=2.0, sigma=2.0) == pytest.approx(-2.0, abs=1e-12)


def test_lj_three_particles_pair_sum(rng):
    x = rng.uniform(-1.5, 1.5, size=9)
    p = x.reshape(3, 3)
    brute = sum(lj_pair_energy(np.linalg.norm(p[i] - p[j])) for i, j in itertools.combinations(range(3), 2))
    assert lj_energy(x, 3) == pytest.approx(brute, rel=1e-12)
    bare = LennardJonesTarget(3, harmonic=0.0)
    assert -bare.log_density(x) == pytest.approx(brute, rel=1e-12)


def test_lj_axis_force_matches_derivative():
    t = LennardJonesTarget(2, harmonic=0.0)
    for r in (0.95, 1.12, 1.5):
        x = np.array([0.0, 0.0, 0.0, r, 0.0, 0.0])
        h = 1e-6
        dEdr = (lj_pair_energy(r + h) - lj_pair_energy(r - h)) / (2 * h)
        s = t.score(x)
        assert s[3] == pytest.approx(-dEdr, rel=1e-6)
        assert s[0] == pytest.approx(dEdr, rel=1e-6)


def test_lj_coincident_particles_are_rejected():
    t = LennardJonesTarget(2)
    lp, g = t.value_and_score(np.zeros(6))
    assert lp == -np.inf
    assert t.log_density(np.zeros(6)) == -np.inf


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_lj_permutation_and_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    x = _icosahedron_like(rng) + 0.1 * rng.normal(size=39)
    t = LennardJonesTarget(13)
    perm = rng.permutation(13)
    xp = x.reshape(13, 3)[perm].ravel()
    xt = (x.reshape(13, 3) + np.asarray(shift)).ravel()
    e = t.energy(x)
    assert abs(t.energy(xp) - e) < 1e-10
    assert abs(t.energy(xt) - e) < 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gm_component_order_invariance(seed):
    rng = np.random.default_rng(seed)
    k = 4
    means, cov = rng.normal(size=(k, 3)) * 3, rng.uniform(0.3, 2.0, size=(k, 3))
    w = rng.dirichlet(np.ones(k))
    perm = rng.permutation(k)
    a = GaussianMixtureTarget(means, cov, w)
    b = GaussianMixtureTarget(means[perm], cov[perm], w[perm])
    x = rng.normal(size=(10, 3)) * 4
    np.testing.assert_allclose(a.log_density(x), b.log_density(x), rtol=1e-12, atol=1e-12)


def test_counter_per_point_and_fused():
    t = make_target("gm2")
    x = np.zeros((7, 2))
    t.log_density(x)
    assert t.counter.count == 7
    t.score(x)
    assert t.counter.count == 14
    t.value_and_score(x)
    assert t.counter.count == 21
    t.log_density(x[0])
    assert t.counter.count == 22
    t.energy(x)  # measurement only
    assert t.counter.count == 22
    assert t.counter.reset() == 22
    assert t.counter.count == 0


def test_scores_have_length_d(rng):
    for task in list(TASKS) + ["lj13"]:
        t = make_target(task)
        x = np.zeros(t.dim) if task != "lj13" else _icosahedron_like(rng)
        assert t.score(x).shape == (t.dim,)
        assert np.isfinite(t.log_density(x))


def test_find_mode_gaussian():
    x = find_mode(gaussian(3), np.ones(3), steps=1000)
    assert np.max(np.abs(x)) < 1e-6


def test_find_mode_gm2_local_mode():
    t = make_target("gm2")
    mu = t.means[-1]  # the isolated component
    x = find_mode(t, mu + np.array([0.5, -0.5]), steps=2000)
    g = np.linspace(-2.5, 2.5, 501)
    gx, gy = np.meshgrid(g + mu[0], g + mu[1], indexing="ij")
    lp = t.energy(np.stack([gx.ravel(), gy.ravel()], axis=1))
    best = np.array([gx.ravel()[np.argmin(lp)], gy.ravel()[np.argmin(lp)]])
    assert np.linalg.norm(x - best) < 0.02


def test_find_mode_contract():
    with pytest.raises(ValueError):
        find_mode(gaussian(1), np.zeros(1), steps=0)


def test_find_mode_reports_divergence():
    t = LennardJonesTarget(2, harmonic=0.0)
    x = np.zeros(6)  # coincident particles: no finite gradient
    with pytest.raises(ModeSearchError) as err:
        find_mode(t, x, steps=50)
    assert np.all(np.isfinite(err.value.last_finite))


def test_layouts_are_reproducible():
    a, b = make_target("gm16"), make_target("gm16")
    np.testing.assert_array_equal(a.means, b.means)
    assert a.n_components == 8 and a.dim == 16
    nu = make_target("gmnu16")
    np.testing.assert_allclose(nu.weights, np.arange(1, 9) / 36)
    np.testing.assert_array_equal(nu.means, a.means)


def test_gm_json_round_trip():
    t = make_target("gmnu2")
    u = GaussianMixtureTarget.from_dict(__import__("json").loads(t.to_json()))
    np.testing.assert_array_equal(u.means, t.means)
    np.testing.assert_array_equal(u.weights, t.weights)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        GaussianMixtureTarget([[0.0]], weights=[0.0])
    with pytest.raises(ValueError):
        gaussian(2).log_density(np.zeros(3))
    with pytest.raises(KeyError):
        make_target("gm3")
    with pytest.raises(ValueError):
        ReferenceDistribution(np.zeros(2), 0.0)


def test_reference_distribution(rng):
    ref = ReferenceDistribution(np.array([1.0, -1.0]), 2.0)
    x = rng.normal(size=(5, 2))
    np.testing.assert_allclose(ref.score(x), -(x - ref.mean) / 4.0)
    fd = central_diff(ref.log_density, x)
    np.testing.assert_allclose(ref.score(x), fd, atol=1e-7)
    s = ref.sample(20000, rng)
    np.testing.assert_allclose(s.mean(0), ref.mean, atol=0.05)
    np.testing.assert_allclose(s.std(0), 2.0, rtol=0.03)
