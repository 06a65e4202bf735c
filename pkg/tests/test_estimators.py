import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perturbmax.core import DomainError, PerturbationSpec, RngStream, log_sum_exp, softmax
from perturbmax.estimators import (
    Estimate,
    McConfig,
    TieBreak,
    argmax_weights,
    expected_gamma_at_argmax_mc,
    expected_logsumexp_mc,
    expected_max_mc,
    fenchel_gap,
    mc_average,
    pathwise_softmax_jacobian_mc,
    perturb_argmax_mc,
    perturb_softmax_mc,
)

G, N_, U, D = (PerturbationSpec.gumbel(), PerturbationSpec.normal(),
               PerturbationSpec.uniform(), PerturbationSpec.discrete())
ALL = [G, N_, U, D]
ids = lambda s: s.family.value  # noqa: E731

# E[sigmoid(1 + L)] with L standard logistic, from scipy.integrate.quad
GUMBEL_SOFTMAX_10 = 0.6613031126615341


def mc(n, seed=0, **kw):
    return McConfig(n, RngStream(seed), **kw)


@pytest.mark.parametrize("spec", ALL, ids=ids)
def test_symmetric_theta_gives_half(spec):
    est = perturb_softmax_mc([0.0, 0.0], spec, 1.0, mc(20000))
    # a one-std_error band fails about a third of the time; use four
    assert np.all(np.abs(est.mean - 0.5) <= 4 * est.std_error)
    assert est.mean[0] + est.mean[1] == pytest.approx(1.0, abs=1e-12)


def test_gumbel_perturb_softmax_against_quadrature_value():
    est = perturb_softmax_mc([1.0, 0.0], G, 1.0, mc(10**6, 3))
    oracle = np.array([GUMBEL_SOFTMAX_10, 1 - GUMBEL_SOFTMAX_10])
    assert np.all(np.abs(est.mean - oracle) <= 4 * est.std_error)


def test_softmax_mc_shift_by_seven_is_bit_identical():
    theta = np.array([0.25, -1.5, 0.75])
    a = perturb_softmax_mc(theta, N_, 1.0, mc(10000, 9))
    b = perturb_softmax_mc(theta + 7, N_, 1.0, mc(10000, 9))
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.std_error, b.std_error)


def test_discrete_tie_policies():
    split = perturb_argmax_mc([0.0, 0.0], D, mc(10**6, 1, tie_break=TieBreak.SPLIT_MASS))
    assert abs(split.mean[0] - 0.5) <= 4 * split.std_error[0]
    low = perturb_argmax_mc([0.0, 0.0], D, mc(10**6, 1, tie_break=TieBreak.LOWEST_INDEX))
    assert abs(low.mean[0] - 0.75) <= 4 * low.std_error[0]
    rnd = perturb_argmax_mc([0.0, 0.0], D, mc(10**6, 1, tie_break=TieBreak.RANDOM_UNIFORM))
    assert abs(rnd.mean[0] - 0.5) <= 4 * rnd.std_error[0]


def test_argmax_weights_rows_are_distributions():
    x = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 3.0, 3.0], [0.0, 1.0, 0.5]])
    gen = np.random.default_rng(0)
    for tb in TieBreak:
        w = argmax_weights(x, tb, gen)
        np.testing.assert_allclose(w.sum(axis=1), 1.0)
        assert np.all(w[x < x.max(axis=1, keepdims=True)] == 0)
    np.testing.assert_allclose(argmax_weights(x, TieBreak.SPLIT_MASS)[2], [1 / 3] * 3)
    np.testing.assert_array_equal(argmax_weights(x, TieBreak.LOWEST_INDEX)[1], [0, 1, 0])
    with pytest.raises(DomainError):
        argmax_weights(x, TieBreak.RANDOM_UNIFORM)


def test_gumbel_argmax_matches_softmax():
    est = perturb_argmax_mc([1.0, 0.0], G, mc(10**6, 5))
    assert np.all(np.abs(est.mean - softmax([1.0, 0.0]).probs) <= 4 * est.std_error)
    est.as_prob()


def test_expected_logsumexp_without_noise_is_exact():
    est = expected_logsumexp_mc([0.0, 0.0], PerturbationSpec.uniform(0.0), mc(100))
    assert est.mean == math.log(2)
    assert est.std_error == 0.0


def test_expected_logsumexp_midpoint_convexity():
    rng = np.random.default_rng(8)
    for _ in range(5):
        a, b = rng.normal(size=4) * 2, rng.normal(size=4) * 2
        tau = float(rng.uniform(0.3, 3))
        cfg = mc(20000, 4)
        fa = expected_logsumexp_mc(a, N_, cfg, tau)
        fb = expected_logsumexp_mc(b, N_, cfg, tau)
        fm = expected_logsumexp_mc((a + b) / 2, N_, cfg, tau)
        slack = 4 * (fa.std_error + fb.std_error + fm.std_error)
        assert fm.mean <= (fa.mean + fb.mean) / 2 + slack


def test_expected_logsumexp_gumbel_finite():
    assert np.isfinite(expected_logsumexp_mc([1.0, 0.0], G, mc(10**5)).mean)


def test_expected_max_examples():
    g = expected_max_mc([0.0, 0.0], G, mc(10**6, 2))
    assert abs(g.mean - math.log(2)) <= 5 * g.std_error
    d = expected_max_mc([0.0, 0.0], D, mc(10**6, 2))
    assert abs(d.mean - 0.5) <= 4 * d.std_error
    u = expected_max_mc([5.0, 0.0], U, mc(10**4, 2))
    # theta gap beyond 2: index 0 always wins, E[max] = 5 + E[gamma_1]
    assert abs(u.mean - 5.0) <= 5 * u.std_error


def test_expected_max_large_theta_no_overflow():
    est = expected_max_mc([650.0, 649.0], G, mc(1000))
    assert np.isfinite(est.mean) and est.mean > 649


@pytest.mark.parametrize("spec", [G, N_, U], ids=ids)
def test_jacobian_structure(spec):
    theta = np.random.default_rng(1).normal(size=4)
    jac = pathwise_softmax_jacobian_mc(theta, spec, 0.7, mc(5000)).mean
    assert np.all(np.abs(jac.sum(axis=0)) <= 1e-9)
    assert np.all(np.abs(jac.sum(axis=1)) <= 1e-9)
    assert np.all(np.abs(jac - jac.T) <= 1e-12)


def test_jacobian_matches_crn_finite_difference():
    theta = np.array([0.4, -0.2, 1.0])
    cfg = mc(10000, 12)
    h = 1e-4
    jac = pathwise_softmax_jacobian_mc(theta, N_, 1.0, cfg).mean
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        col = (perturb_softmax_mc(theta + e, N_, 1.0, cfg).mean
               - perturb_softmax_mc(theta - e, N_, 1.0, cfg).mean) / (2 * h)
        assert np.all(np.abs(col - jac[:, j]) <= 1e-6)


def test_gamma_at_argmax_examples():
    est = expected_gamma_at_argmax_mc([0.0, 0.0], G, mc(10**6, 6))
    assert abs(est.mean - math.log(2)) <= 5 * est.std_error
    for spec in (G, N_, U):
        far = expected_gamma_at_argmax_mc([100.0, 0.0], spec, mc(10**5, 6))
        assert abs(far.mean) <= 5 * far.std_error


@pytest.mark.parametrize("spec", ALL, ids=ids)
def test_fenchel_gap_vanishes(spec):
    theta = np.random.default_rng(2).uniform(-3, 3, size=5)
    assert fenchel_gap(theta, spec, mc(10**4)) <= 1e-10
    assert fenchel_gap([0.0, 0.0], D, mc(10**4, tie_break=TieBreak.SPLIT_MASS)) <= 1e-10


def test_fenchel_gap_with_separately_computed_pieces():
    # independent pieces sharing one seed recombine into the same identity
    theta = np.array([0.5, -1.0, 2.0])
    cfg = mc(10**4, 2)
    em = expected_max_mc(theta, N_, cfg).mean
    p = perturb_argmax_mc(theta, N_, cfg).mean
    eg = expected_gamma_at_argmax_mc(theta, N_, cfg).mean
    assert abs(em - p @ theta - eg) <= 1e-10


def test_std_error_definition():
    vals = np.arange(10.0)

    def fn(gamma, gen):
        return vals[: gamma.shape[0]]

    mean, se = mc_average(fn, 2, N_, mc(10))
    assert mean == pytest.approx(4.5)
    assert se == pytest.approx(np.std(vals, ddof=1) / math.sqrt(10))


def test_threads_do_not_change_results():
    theta = [0.3, -0.7, 1.2, 0.0]
    a = perturb_softmax_mc(theta, G, 1.0, mc(50000, 3, threads=1))
    b = perturb_softmax_mc(theta, G, 1.0, mc(50000, 3, threads=8))
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.std_error, b.std_error)


def test_estimate_json_roundtrip():
    est = perturb_argmax_mc([1.0, 0.0], N_, mc(1000, 4))
    back = Estimate.from_json(est.to_json())
    np.testing.assert_array_equal(back.mean, est.mean)
    np.testing.assert_array_equal(back.std_error, est.std_error)
    assert (back.n_samples, back.seed) == (1000, 4)


def test_bad_configs():
    with pytest.raises(DomainError):
        McConfig(0)
    with pytest.raises(DomainError):
        McConfig(10, threads=0)
    with pytest.raises(DomainError):
        perturb_softmax_mc([0.0, 1.0], G, 0.0, mc(10))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-3000, 2000), min_size=2, max_size=6),
       st.sampled_from(ALL))
def test_estimates_are_prob_vectors_and_shift_exact(ks, spec):
    theta = np.array(ks) / 1024.0
    a = perturb_argmax_mc(theta, spec, mc(2000, 1))
    b = perturb_argmax_mc(theta + 13.7, spec, mc(2000, 1))
    assert abs(a.mean.sum() - 1) <= 1e-9 and np.all(a.mean >= 0)
    np.testing.assert_array_equal(a.mean, b.mean)


def test_log_partition_on_random_points_small():
    rng = np.random.default_rng(0)
    theta = rng.uniform(-3, 3, size=5)
    est = expected_max_mc(theta, G, mc(10**5, 1))
    assert abs(est.mean - log_sum_exp(theta)) <= 5 * est.std_error
