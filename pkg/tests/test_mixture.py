import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import logsumexp

from orcea import gauss, mixture
from orcea.errors import ContractViolation, InsufficientData
from orcea.gauss import Gaussian
from orcea.mixture import EmConfig, Mixture

from test_gauss import random_gaussian, random_spd

seeds = st.integers(0, 2**32 - 1)


def bimodal_samples(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    side = rng.random(n) < 0.5
    return np.where(side, -5.0, 5.0)[:, None] + rng.standard_normal((n, 1))


# ------------------------------------------------------------------ container


def test_mixture_requires_components_of_one_dim():
    with pytest.raises(ContractViolation):
        Mixture("m", [])
    with pytest.raises(ContractViolation):
        Mixture("m", [Gaussian([0.0], [[1.0]]), Gaussian([0.0, 0.0], np.eye(2))])


def test_mixture_arrays_and_components_agree():
    rng = np.random.default_rng(0)
    comps = [random_gaussian(rng, 3) for _ in range(4)]
    mix = Mixture("model", comps)
    assert len(mix) == 4 and mix.dim == 3
    assert mix.log_mass == pytest.approx(logsumexp([g.log_weight for g in comps]))
    assert mix.weights.sum() == pytest.approx(1.0)
    for a, b in zip(mix.components, comps):
        assert a == b


# -------------------------------------------------------------- log density


def test_log_density_single_component_equals_gaussian():
    g = Gaussian([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]], 0.4)
    x = np.array([0.3, 0.2])
    assert mixture.log_density_mix(Mixture("m", [g]), x) == pytest.approx(gauss.log_density(g, x), abs=1e-14)


def test_log_density_symmetric_pair():
    mix = Mixture("m", [Gaussian([-2.0], [[1.0]], math.log(0.5)), Gaussian([2.0], [[1.0]], math.log(0.5))])
    for x in (0.3, 1.7, 4.0):
        assert mixture.log_density_mix(mix, [x]) == pytest.approx(mixture.log_density_mix(mix, [-x]), abs=1e-14)


def test_log_density_matches_direct_sum():
    rng = np.random.default_rng(1)
    comps = [random_gaussian(rng, 2) for _ in range(5)]
    mix = Mixture("m", comps)
    x = rng.normal(size=2)
    direct = sum(math.exp(gauss.log_density(g, x)) for g in comps)
    assert math.exp(mixture.log_density_mix(mix, x)) == pytest.approx(direct, rel=1e-12)


# ------------------------------------------------------------------------- EM


def test_fit_em_recovers_bimodal():
    mix = mixture.fit_em(bimodal_samples(), EmConfig(2, seed=7))
    order = np.argsort(mix.means[:, 0])
    np.testing.assert_allclose(mix.means[order, 0], [-5.0, 5.0], atol=0.3)
    np.testing.assert_allclose(mix.weights[order], [0.5, 0.5], atol=0.05)
    assert mix.log_mass == pytest.approx(0.0, abs=1e-12)


def test_fit_em_single_component_is_sample_moments():
    rng = np.random.default_rng(2)
    x = rng.multivariate_normal([1.0, -2.0, 0.5], random_spd(rng, 3), size=500)
    mix = mixture.fit_em(x, EmConfig(1))
    np.testing.assert_allclose(mix.means[0], x.mean(axis=0), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(mix.covs[0], np.cov(x.T, bias=True), rtol=1e-10, atol=1e-12)


def test_fit_em_identical_samples_give_floor():
    x = np.tile([3.0, 4.0], (50, 1))
    mix = mixture.fit_em(x, EmConfig(1, cov_floor_frac=1e-4))
    # zero variance falls back to unit scale for the floor
    np.testing.assert_allclose(mix.covs[0], 1e-4 * np.eye(2), rtol=1e-12)
    np.testing.assert_allclose(mix.means[0], [3.0, 4.0])


def test_fit_em_floors_every_diagonal():
    rng = np.random.default_rng(3)
    # a gridded data set: heavy duplication invites singular components
    g = np.stack(np.meshgrid(np.arange(6.0), np.arange(6.0)), -1).reshape(-1, 2)
    x = np.repeat(g, 10, axis=0) + 1e-9 * rng.standard_normal((360, 2))
    cfg = EmConfig(12, cov_floor_frac=1e-3, seed=1)
    mix = mixture.fit_em(x, cfg)
    floor = 1e-3 * x.var(axis=0)
    assert np.all(np.einsum("kii->ki", mix.covs) >= floor * (1 - 1e-9))
    for c in mix.covs:
        np.linalg.cholesky(c)


def test_fit_em_monotone_log_likelihood():
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.multivariate_normal(m, np.eye(2) * s, 300)
                        for m, s in (([0, 0], 1.0), ([4, 1], 0.5), ([1, 5], 2.0))])
    hist = []
    mixture.fit_em(x, EmConfig(3, restarts=3, seed=5), history=hist)
    assert len(hist) == 3
    for trace in hist:
        assert np.all(np.diff(trace) >= -1e-9 * np.abs(np.array(trace[1:])))


def test_fit_em_deterministic_and_seed_sensitive():
    x = bimodal_samples(600, 3)
    a = mixture.fit_em(x, EmConfig(3, seed=11))
    b = mixture.fit_em(x, EmConfig(3, seed=11))
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.covs, b.covs)


def test_fit_em_errors():
    with pytest.raises(InsufficientData):
        mixture.fit_em(np.zeros((3, 2)), EmConfig(4))
    with pytest.raises(ContractViolation):
        mixture.fit_em(np.zeros((10, 0)), EmConfig(1))
    with pytest.raises(ContractViolation):
        EmConfig(0)
    with pytest.raises(ContractViolation):
        EmConfig(2, cov_floor_frac=0.0)


def test_regression_floor_keeps_linear_relation_sharp():
    # feature = parameter exactly; data come from few distinct parameter values
    rng = np.random.default_rng(6)
    params = np.repeat(rng.uniform(0, 10, 8), 50)
    feats = params + 0.01 * rng.standard_normal(params.size)
    x = np.c_[feats, params]
    cfg = EmConfig(1, cov_floor_frac=(1e-6, 0.5), regressor_dims=1)
    c = mixture.fit_em(x, cfg).covs[0]
    resid = c[0, 0] - c[0, 1] ** 2 / c[1, 1]
    assert c[1, 1] >= 0.5 * params.var() * (1 - 1e-9)
    assert resid < 1e-3


# ---------------------------------------------------------------- conditional


def test_conditional_single_component_matches_gauss():
    g = Gaussian([0.0, 1.0, 2.0], [[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.5]])
    cond, log_ev = mixture.conditional(Mixture("j", [g]), [2], [2.5])
    ref, lm = gauss.condition(g, [2], [2.5])
    np.testing.assert_allclose(cond.means[0], ref.mean, rtol=1e-14)
    np.testing.assert_allclose(cond.covs[0], ref.cov, rtol=1e-14)
    assert cond.log_mass == pytest.approx(0.0, abs=1e-14)
    assert log_ev == pytest.approx(lm, abs=1e-12)


def test_conditional_responsibility_example():
    joint = Mixture("j", [
        Gaussian([0.0, 0.0], np.eye(2), math.log(0.5)),
        Gaussian([0.0, 100.0], np.eye(2), math.log(0.5)),
    ])
    cond, _ = mixture.conditional(joint, [1], [0.0])
    assert cond.weights[0] > 0.99


def test_conditional_log_evidence_matches_marginal_density():
    rng = np.random.default_rng(7)
    joint = Mixture("j", [random_gaussian(rng, 4) for _ in range(5)])
    v = rng.normal(size=2)
    _, log_ev = mixture.conditional(joint, [0, 3], v)
    assert log_ev == pytest.approx(mixture.log_density_mix(joint.marginal([0, 3]), v), abs=1e-10)


def test_conditional_evidence_matches_numeric_integration():
    rng = np.random.default_rng(8)
    joint = Mixture("j", [random_gaussian(rng, 2) for _ in range(3)])
    v = 0.4
    _, log_ev = mixture.conditional(joint, [1], [v])
    val, _ = quad(lambda m: math.exp(mixture.log_density_mix(joint, [m, v])), -60, 60, limit=400)
    assert math.exp(log_ev) == pytest.approx(val, rel=1e-3)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_conditional_bayes_decomposition(seed):
    rng = np.random.default_rng(seed)
    joint = Mixture("j", [random_gaussian(rng, 3) for _ in range(4)])
    x = rng.normal(0, 2, 3)
    cond, log_ev = mixture.conditional(joint, [0, 1], x[:2])
    lhs = mixture.log_density_mix(joint, x) - joint.log_mass
    rhs = mixture.log_density_mix(cond, x[2:]) + log_ev - joint.log_mass
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


# --------------------------------------------------------------------- merge


def test_moment_merge_examples():
    g = Gaussian([1.0], [[2.0]], math.log(0.5))
    m = mixture.moment_merge([g, g])
    assert m.log_weight == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(m.mean, [1.0])
    np.testing.assert_allclose(m.cov, [[2.0]])
    m = mixture.moment_merge([Gaussian([0.0], [[1.0]], math.log(0.5)),
                              Gaussian([2.0], [[1.0]], math.log(0.5))])
    assert m.mean[0] == pytest.approx(1.0) and m.cov[0, 0] == pytest.approx(2.0)
    first = Gaussian([3.0], [[0.5]], 0.0)
    m = mixture.moment_merge([first, Gaussian([-9.0], [[7.0]], -math.inf)])
    assert m == first
    with pytest.raises(ContractViolation):
        mixture.moment_merge([])


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 5), st.integers(1, 6))
def test_moment_merge_preserves_first_two_moments(seed, d, n):
    rng = np.random.default_rng(seed)
    comps = [random_gaussian(rng, d) for _ in range(n)]
    m = mixture.moment_merge(comps)
    w = np.exp([g.log_weight for g in comps])
    assert math.exp(m.log_weight) == pytest.approx(w.sum(), rel=1e-12)
    w = w / w.sum()
    mean = sum(wi * g.mean for wi, g in zip(w, comps))
    second = sum(wi * (g.cov + np.outer(g.mean, g.mean)) for wi, g in zip(w, comps))
    np.testing.assert_allclose(m.mean, mean, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(m.cov + np.outer(m.mean, m.mean), second, rtol=1e-10, atol=1e-10)


# -------------------------------------------------------------------- reduce


def test_reduce_merges_identical_components():
    g = Gaussian([0.0, 1.0], np.eye(2), -0.3)
    out = mixture.reduce(Mixture("m", [g, g]))
    assert len(out) == 1
    assert out.log_mass == pytest.approx(-0.3 + math.log(2), rel=1e-12)


def test_reduce_far_components_unchanged():
    comps = [Gaussian([10.0 * i], [[1.0]], -i) for i in range(3)]
    mix = Mixture("m", comps)
    out = mixture.reduce(mix, max_k=3)
    np.testing.assert_array_equal(out.means, mix.means)
    np.testing.assert_array_equal(out.log_weights, mix.log_weights)


def test_reduce_delete_mode_loses_lightest_mass():
    comps = [Gaussian([10.0 * i], [[1.0]], -float(i)) for i in range(3)]
    out = mixture.reduce(Mixture("m", comps), max_k=2, prune="delete")
    assert len(out) == 2
    np.testing.assert_allclose(sorted(out.means[:, 0]), [0.0, 10.0])


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 3), st.integers(2, 20), st.integers(1, 6))
def test_reduce_preserves_mass_and_is_idempotent(seed, d, n, max_k):
    rng = np.random.default_rng(seed)
    comps = [Gaussian(rng.normal(0, 1.5, d), random_spd(rng, d, 0.3, 1.5), rng.normal()) for _ in range(n)]
    mix = Mixture("m", comps)
    out = mixture.reduce(mix, max_k=max_k, merge_dist=0.3)
    assert len(out) <= max_k
    assert abs(math.exp(out.log_mass) - math.exp(mix.log_mass)) / math.exp(mix.log_mass) < 1e-12
    again = mixture.reduce(out, max_k=max_k, merge_dist=0.3)
    np.testing.assert_allclose(again.means, out.means, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(again.covs, out.covs, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(again.log_weights, out.log_weights, rtol=1e-12, atol=1e-12)


def test_sample_follows_weights():
    mix = Mixture("m", [Gaussian([-50.0], [[1.0]], math.log(0.2)), Gaussian([50.0], [[1.0]], math.log(0.8))])
    x = mix.sample(np.random.default_rng(0), 20000)
    assert (x[:, 0] > 0).mean() == pytest.approx(0.8, abs=0.015)
