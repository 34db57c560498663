import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from orcea import gauss
from orcea.errors import ContractViolation, NotPositiveDefinite
from orcea.gauss import Gaussian


def random_spd(rng, d, lo=0.2, hi=3.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q @ np.diag(rng.uniform(lo, hi, d)) @ q.T


def random_gaussian(rng, d, log_weight=None):
    lw = rng.normal() if log_weight is None else log_weight
    return Gaussian(rng.normal(0, 2, d), random_spd(rng, d), lw)


seeds = st.integers(0, 2**32 - 1)
dims = st.integers(1, 6)


# --------------------------------------------------------------- log_density


def test_log_density_standard_1d():
    assert gauss.log_density(Gaussian([0.0], [[1.0]]), [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-12)


def test_log_density_standard_2d():
    assert gauss.log_density(Gaussian([0.0, 0.0], np.eye(2)), [0.0, 0.0]) == pytest.approx(
        -1.8378770664093453, abs=1e-12)


def test_log_density_symmetric_about_mean():
    g = Gaussian([3.0], [[4.0]])
    assert gauss.log_density(g, [3.7]) == pytest.approx(gauss.log_density(g, [2.3]), abs=1e-14)


def test_log_density_matches_scipy():
    rng = np.random.default_rng(1)
    for d in range(1, 7):
        g = random_gaussian(rng, d, 0.0)
        x = rng.normal(size=d)
        ref = multivariate_normal(g.mean, g.cov).logpdf(x)
        assert gauss.log_density(g, x) == pytest.approx(ref, rel=1e-10)


def test_log_density_dimension_mismatch():
    with pytest.raises(ContractViolation):
        gauss.log_density(Gaussian([0.0, 0.0], np.eye(2)), [1.0])


def test_log_density_vectorized_rows():
    rng = np.random.default_rng(2)
    g = random_gaussian(rng, 3)
    xs = rng.normal(size=(7, 3))
    np.testing.assert_allclose(gauss.log_density(g, xs), [gauss.log_density(g, x) for x in xs], rtol=1e-13)


def test_gaussian_rejects_asymmetric_and_indefinite():
    with pytest.raises(ContractViolation):
        Gaussian([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(NotPositiveDefinite):
        Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


def test_gaussian_is_immutable():
    g = Gaussian([0.0], [[1.0]])
    with pytest.raises(ValueError):
        g.mean[0] = 1.0


# -------------------------------------------------------------------- product


def test_product_standard_pair():
    p = gauss.product(Gaussian([0.0], [[1.0]]), Gaussian([0.0], [[1.0]]))
    assert p.mean[0] == pytest.approx(0.0)
    assert p.cov[0, 0] == pytest.approx(0.5)
    assert math.exp(p.log_weight) == pytest.approx(0.28209479177387814, rel=1e-12)


def test_product_shifted_pair():
    p = gauss.product(Gaussian([0.0], [[1.0]]), Gaussian([2.0], [[1.0]]))
    assert p.mean[0] == pytest.approx(1.0)
    assert p.cov[0, 0] == pytest.approx(0.5)
    # N(2 | 0, 2)
    assert math.exp(p.log_weight) == pytest.approx(0.10377687435514868, rel=1e-12)


def test_product_with_broad_factor_is_near_identity():
    rng = np.random.default_rng(3)
    g = random_gaussian(rng, 3)
    p = gauss.product(g, Gaussian(g.mean, 1e6 * np.eye(3)))
    np.testing.assert_allclose(p.mean, g.mean, atol=1e-3)
    np.testing.assert_allclose(p.cov, g.cov, rtol=1e-3, atol=1e-3 * np.abs(g.cov).max())


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_product_pointwise_identity(seed, d):
    rng = np.random.default_rng(seed)
    g1, g2 = random_gaussian(rng, d), random_gaussian(rng, d)
    p = gauss.product(g1, g2)
    xs = rng.normal(0, 2, (20, d))
    lhs = gauss.log_density(p, xs)
    rhs = gauss.log_density(g1, xs) + gauss.log_density(g2, xs)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-8)


def test_product_dimension_mismatch():
    with pytest.raises(ContractViolation):
        gauss.product(Gaussian([0.0], [[1.0]]), Gaussian([0.0, 0.0], np.eye(2)))


# ------------------------------------------------------------------- quotient


def test_quotient_closed_form():
    q = gauss.quotient(Gaussian([0.0], [[1.0]]), Gaussian([0.0], [[4.0]]))
    assert q.cov[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert q.mean[0] == pytest.approx(0.0, abs=1e-15)


def test_quotient_narrow_denominator_fails():
    with pytest.raises(NotPositiveDefinite):
        gauss.quotient(Gaussian([0.0], [[4.0]]), Gaussian([0.0], [[1.0]]))


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_quotient_pointwise_identity_and_inverse(seed, d):
    rng = np.random.default_rng(seed)
    num = random_gaussian(rng, d)
    den = Gaussian(rng.normal(0, 2, d), num.cov * 3.0 + random_spd(rng, d), rng.normal())
    q = gauss.quotient(num, den)
    xs = rng.normal(0, 2, (20, d))
    np.testing.assert_allclose(
        gauss.log_density(q, xs), gauss.log_density(num, xs) - gauss.log_density(den, xs),
        rtol=1e-8, atol=1e-8)
    back = gauss.product(q, den)
    np.testing.assert_allclose(back.mean, num.mean, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(back.cov, num.cov, rtol=1e-8, atol=1e-10)
    assert back.log_weight == pytest.approx(num.log_weight, rel=1e-8, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_quotient_undoes_product(seed, d):
    rng = np.random.default_rng(seed)
    g1, g2 = random_gaussian(rng, d), random_gaussian(rng, d)
    back = gauss.quotient(gauss.product(g1, g2), g2)
    np.testing.assert_allclose(back.mean, g1.mean, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(back.cov, g1.cov, rtol=1e-8, atol=1e-9)
    assert back.log_weight == pytest.approx(g1.log_weight, rel=1e-8, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(seeds, dims)
def test_quotient_fails_exactly_when_precision_difference_indefinite(seed, d):
    rng = np.random.default_rng(seed)
    c1 = random_spd(rng, d)
    c2 = random_spd(rng, d)
    eig = np.linalg.eigvalsh(np.linalg.inv(c1) - np.linalg.inv(c2))
    if np.min(np.abs(eig)) < 1e-6:
        return  # too close to the boundary for a clean verdict
    ok = eig.min() > 0
    try:
        gauss.quotient(Gaussian(np.zeros(d), c1), Gaussian(np.zeros(d), c2))
        raised = False
    except NotPositiveDefinite:
        raised = True
    assert raised == (not ok)


# ------------------------------------------------------------- bhattacharyya


def test_bhattacharyya_examples():
    a = Gaussian([0.0], [[1.0]])
    assert gauss.bhattacharyya(a, a) == 0.0
    assert gauss.bhattacharyya(a, Gaussian([2.0], [[1.0]])) == pytest.approx(0.5, rel=1e-12)
    assert gauss.bhattacharyya(a, Gaussian([0.0], [[4.0]])) == pytest.approx(0.11157177565710485, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_bhattacharyya_symmetric_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    g1, g2 = random_gaussian(rng, d), random_gaussian(rng, d)
    assert gauss.bhattacharyya(g1, g2) == gauss.bhattacharyya(g2, g1)
    assert gauss.bhattacharyya(g1, g2) > 0
    assert gauss.bhattacharyya(g1, g1.with_log_weight(5.0)) == 0.0


# --------------------------------------------------------------- conditioning


def test_condition_schur_example():
    g, lm = gauss.condition(Gaussian([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]]), [1], [1.0])
    assert g.mean[0] == pytest.approx(0.5, rel=1e-12)
    assert g.cov[0, 0] == pytest.approx(0.75, rel=1e-12)
    assert lm == pytest.approx(-0.9189385332046727 - 0.5, rel=1e-12)


def test_condition_block_diagonal_ignores_values():
    joint = Gaussian([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]))
    for v in (-5.0, 0.0, 7.0):
        g, _ = gauss.condition(joint, [2], [v])
        np.testing.assert_allclose(g.mean, [1.0, 2.0])
        np.testing.assert_allclose(g.cov, np.diag([1.0, 2.0]))


def test_condition_log_marginal_matches_marginal_density():
    rng = np.random.default_rng(4)
    joint = random_gaussian(rng, 5)
    v = rng.normal(size=2)
    _, lm = gauss.condition(joint, [1, 3], v)
    assert lm == pytest.approx(gauss.log_density(gauss.marginal(joint, [1, 3]), v), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(2, 6))
def test_condition_and_marginal_reconstruct_joint(seed, d):
    rng = np.random.default_rng(seed)
    joint = random_gaussian(rng, d)
    k = int(rng.integers(1, d))
    obs = sorted(rng.choice(d, k, replace=False).tolist())
    free = [i for i in range(d) if i not in obs]
    x = rng.normal(0, 2, d)
    cond, lm = gauss.condition(joint, obs, x[obs])
    assert gauss.log_density(joint, x) == pytest.approx(gauss.log_density(cond, x[free]) + lm,
                                                         rel=1e-10, abs=1e-10)


def test_condition_conditional_cov_independent_of_values():
    rng = np.random.default_rng(5)
    joint = random_gaussian(rng, 4)
    a, _ = gauss.condition(joint, [0, 2], [0.0, 0.0])
    b, _ = gauss.condition(joint, [0, 2], [9.0, -4.0])
    np.testing.assert_array_equal(a.cov, b.cov)


def test_condition_errors():
    joint = Gaussian([0.0, 0.0], np.eye(2))
    with pytest.raises(ContractViolation):
        gauss.condition(joint, [0, 1], [0.0, 0.0])
    with pytest.raises(ContractViolation):
        gauss.condition(joint, [2], [0.0])
    with pytest.raises(ContractViolation):
        gauss.condition(joint, [0], [0.0, 1.0])


# ------------------------------------------------------------------ marginal


def test_marginal_examples():
    g = Gaussian([1.0, 2.0, 3.0], np.diag([4.0, 5.0, 6.0]), 0.7)
    m = gauss.marginal(g, [0])
    assert m.mean.tolist() == [1.0] and m.cov.tolist() == [[4.0]] and m.log_weight == 0.7
    assert gauss.marginal(g, [0, 1, 2]) == g
    c = Gaussian([0.0, 0.0], [[2.0, 0.9], [0.9, 3.0]])
    assert gauss.marginal(c, [1]).cov[0, 0] == 3.0
    with pytest.raises(ContractViolation):
        gauss.marginal(g, [])


def test_operations_are_deterministic():
    rng = np.random.default_rng(6)
    g1, g2 = random_gaussian(rng, 4), random_gaussian(rng, 4)
    assert gauss.product(g1, g2) == gauss.product(g1, g2)
    big = Gaussian(g2.mean, g2.cov * 10 + np.eye(4) * 10)
    assert gauss.quotient(g1, big) == gauss.quotient(g1, big)
