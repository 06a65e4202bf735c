import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from perturbmax.core import (
    CHUNK_SIZE,
    EULER_GAMMA,
    DimensionError,
    DomainError,
    Family,
    Logits,
    NoDensityError,
    ParamSpace,
    PerturbationSpec,
    ProbVector,
    RngStream,
    canonicalize,
    family_cdf,
    family_pdf,
    family_pmf,
    family_quantile,
    log_sum_exp,
    open_uniform,
    sample_block,
    sample_perturbation,
    softmax,
)

ALL_SPECS = [PerturbationSpec.gumbel(), PerturbationSpec.normal(),
             PerturbationSpec.uniform(), PerturbationSpec.discrete()]
CONTINUOUS = ALL_SPECS[:3]

# dyadic grid values: theta + c is exact for the shifts used below
dyadic = st.integers(-4096, 2048).map(lambda k: k / 1024)


def test_log_sum_exp_examples():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), rel=1e-15)
    x = [0.3, -1.2, 2.0]
    naive = math.log(sum(math.exp(v) for v in x))
    assert abs(log_sum_exp(x) - naive) <= 1e-12


def test_log_sum_exp_no_overflow_and_empty():
    assert np.isfinite(log_sum_exp([700.0, -700.0, 699.0]))
    with pytest.raises(DimensionError):
        log_sum_exp([])


def test_softmax_examples():
    np.testing.assert_array_equal(softmax([0.0, 0.0]).probs, [0.5, 0.5])
    np.testing.assert_allclose(softmax([math.log(2), 0.0]).probs, [2 / 3, 1 / 3], rtol=1e-15)
    e = [math.exp(v) for v in (1, 2, 3)]
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]).probs, [v / sum(e) for v in e], rtol=1e-14)
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]).probs,
                               [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_rejects_bad_temperature():
    for tau in (0.0, -1.0):
        with pytest.raises(DomainError):
            softmax([1.0, 0.0], tau)


@given(st.lists(st.floats(-700, 700), min_size=2, max_size=12),
       st.floats(0.05, 20))
def test_softmax_is_a_prob_vector(values, tau):
    p = softmax(values, tau)
    assert np.all(p.probs >= 0) and abs(p.probs.sum() - 1) <= 1e-9


@given(st.lists(dyadic, min_size=2, max_size=8), st.sampled_from([-100.0, 0.5, 100.0]))
def test_softmax_shift_invariance_is_exact(values, c):
    theta = np.array(values)
    np.testing.assert_array_equal(softmax(theta + c).probs, softmax(theta).probs)


def test_softmax_shift_invariance_general_inputs_to_rounding():
    rng = np.random.default_rng(3)
    for _ in range(50):
        theta = rng.normal(size=6) * 3
        for c in (-100.0, 0.5, 100.0):
            np.testing.assert_allclose(softmax(theta + c).probs, softmax(theta).probs,
                                       rtol=1e-12, atol=1e-15)


def test_logits_invariants():
    with pytest.raises(DimensionError):
        Logits([1.0])
    with pytest.raises(DomainError):
        Logits([1.0, np.inf])
    with pytest.raises(DomainError):
        Logits([1.0, 0.0], ParamSpace.FIRST_ANCHORED)
    with pytest.raises(DomainError):
        Logits([1.0, 0.0], ParamSpace.ZERO_SUM)
    assert Logits([0.0, 2.0], ParamSpace.FIRST_ANCHORED).d == 2


def test_prob_vector_clamps_tiny_negatives_only():
    p = ProbVector([-1e-13, 1.0 + 1e-13])
    assert p.probs[0] == 0.0
    with pytest.raises(DomainError):
        ProbVector([-1e-6, 1.0])
    with pytest.raises(DomainError):
        ProbVector([0.5, 0.4])


def test_canonicalize_examples():
    np.testing.assert_array_equal(canonicalize([3.0, 4.0, 5.0], ParamSpace.FIRST_ANCHORED).values,
                                  [0.0, 1.0, 2.0])
    np.testing.assert_array_equal(canonicalize([3.0, 4.0, 5.0], ParamSpace.ZERO_SUM).values,
                                  [-1.0, 0.0, 1.0])
    free = Logits([3.0, 4.0, 5.0])
    assert canonicalize(free) is free


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10),
       st.sampled_from(list(ParamSpace)))
def test_canonicalize_idempotent_and_softmax_preserving(values, space):
    once = canonicalize(values, space)
    twice = canonicalize(once, space)
    np.testing.assert_array_equal(once.values, twice.values)
    np.testing.assert_allclose(softmax(once).probs, softmax(values).probs, rtol=1e-9, atol=1e-14)


def test_spec_json_roundtrip_and_errors():
    for spec in ALL_SPECS + [PerturbationSpec.uniform(2.5)]:
        assert PerturbationSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec
    assert PerturbationSpec.from_json({"family": "discrete"}).scale == 1.0
    for bad in ({"family": "cauchy"}, {"scale": 1}, {"family": "normal", "loc": 0}):
        with pytest.raises(DomainError):
            PerturbationSpec.from_json(bad)
    with pytest.raises(DomainError):
        PerturbationSpec(Family.UNIFORM, -1.0)


def test_open_uniform_excludes_endpoints_and_half():
    u = open_uniform(RngStream(5).chunk_generator(0), 10**6)
    assert u.min() > 0 and u.max() < 1 and not np.any(u == 0.5)


def test_sampling_is_reproducible_and_chunked():
    spec = PerturbationSpec.normal()
    a = sample_block(spec, 2 * CHUNK_SIZE + 17, 3, RngStream(11, 2))
    b = sample_block(spec, 2 * CHUNK_SIZE + 17, 3, RngStream(11, 2))
    np.testing.assert_array_equal(a, b)
    c = sample_block(spec, 2 * CHUNK_SIZE + 17, 3, RngStream(11, 3))
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(sample_perturbation(spec, 3, RngStream(11, 2)), a[0])


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.family.value)
def test_zero_mean_within_four_standard_errors(spec):
    x = sample_block(spec, 10**6, 1, RngStream(1))[:, 0]
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean()) <= 4 * se


def test_sample_examples():
    g = sample_block(PerturbationSpec.gumbel(), 10**6, 1, RngStream(2))
    assert abs(g.mean()) <= 0.005
    u = sample_block(PerturbationSpec.uniform(), 10**5, 2, RngStream(2))
    assert u.min() >= -1 and u.max() <= 1
    s = sample_block(PerturbationSpec.discrete(), 10**6, 1, RngStream(2))
    assert set(np.unique(s)) == {-1.0, 1.0}
    assert abs((s == 1).mean() - 0.5) <= 0.002
    assert sample_perturbation(PerturbationSpec.normal(), 1, RngStream(0)).shape == (1,)


def test_normal_variance_is_one():
    x = sample_block(PerturbationSpec.normal(), 10**6, 1, RngStream(4))
    assert abs(x.var() - 1) < 0.01


def test_cdf_examples():
    assert family_cdf(PerturbationSpec.gumbel(), -EULER_GAMMA) == pytest.approx(math.exp(-1), abs=1e-15)
    assert family_cdf(PerturbationSpec.normal(), 0.0) == 0.5
    assert family_cdf(PerturbationSpec.uniform(), 0.0) == 0.5
    d = PerturbationSpec.discrete()
    assert family_cdf(d, -1.0) == 0.5 and family_cdf(d, -1.0 - 1e-12) == 0.0
    assert family_cdf(d, 1.0) == 1.0 and family_cdf(d, 0.3) == 0.5


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.family.value)
def test_cdf_monotone_with_limits(spec):
    t = np.linspace(-30, 30, 100)
    c = family_cdf(spec, t)
    assert np.all(np.diff(c) >= 0)
    assert family_cdf(spec, -1e6) == pytest.approx(0, abs=1e-12)
    assert family_cdf(spec, 1e6) == pytest.approx(1, abs=1e-12)


def test_pdf_examples():
    assert family_pdf(PerturbationSpec.normal(), 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert family_pdf(PerturbationSpec.uniform(), 0.5) == 0.5
    assert family_pdf(PerturbationSpec.uniform(), 1.5) == 0.0
    g = PerturbationSpec.gumbel()
    h = 1e-5
    numeric = (family_cdf(g, 0.7 + h) - family_cdf(g, 0.7 - h)) / (2 * h)
    assert abs(numeric - family_pdf(g, 0.7)) <= 1e-6
    with pytest.raises(NoDensityError):
        family_pdf(PerturbationSpec.discrete(), 0.0)
    assert family_pmf(PerturbationSpec.discrete(), 1.0) == 0.5
    assert family_pmf(PerturbationSpec.discrete(), 0.0) == 0.0


@pytest.mark.parametrize("spec", CONTINUOUS, ids=lambda s: s.family.value)
def test_pdf_integrates_to_one(spec):
    t = np.linspace(-20, 20, 10**5)
    assert abs(np.trapezoid(family_pdf(spec, t), t) - 1) <= 1e-6 + (1e-3 if spec.family is Family.UNIFORM else 0)


def test_uniform_pdf_integrates_to_one_exactly_on_support():
    # the trapezoid rule only errs at the two jumps; put grid points on them
    t = np.linspace(-1, 1, 10**5)
    assert abs(np.trapezoid(family_pdf(PerturbationSpec.uniform(), t), t) - 1) <= 1e-6


@pytest.mark.parametrize("spec", CONTINUOUS, ids=lambda s: s.family.value)
def test_quantile_inverts_cdf(spec):
    q = np.array([1e-9, 0.01, 0.3, 0.5, 0.9, 1 - 1e-9])
    np.testing.assert_allclose(family_cdf(spec, family_quantile(spec, q)), q, rtol=1e-9, atol=1e-15)
