import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evidential_grounding.nig import (NIGDomainError, NIGParams, UndefinedMomentError,
                                      marginal_student_t, nig_log_density, nig_moments,
                                      nll_array, nll_loss, uncertainty_arrays)

from conftest import quad_marginal, quad_mass, quad_moments, random_params

valid = st.builds(NIGParams,
                  gamma=st.floats(-5, 5),
                  upsilon=st.floats(0.01, 50),
                  alpha=st.floats(1.01, 150),
                  beta=st.floats(0.01, 50))


@pytest.mark.parametrize("field,value", [("upsilon", 0.0), ("upsilon", -1.0), ("beta", 0.0),
                                         ("alpha", 0.0), ("gamma", math.nan),
                                         ("beta", math.inf)])
def test_params_reject_out_of_domain(field, value):
    kwargs = dict(gamma=0.0, upsilon=1.0, alpha=2.0, beta=1.0)
    kwargs[field] = value
    with pytest.raises(NIGDomainError, match=field):
        NIGParams(**kwargs)


def test_log_density_matches_closed_form():
    # N(0 | 0, 1) * InvGamma(1 | 2, 1) written out directly
    p = NIGParams(0.0, 1.0, 2.0, 1.0)
    expected = math.log(1 / math.sqrt(2 * math.pi)) + math.log(1.0 / math.gamma(2.0) * math.exp(-1.0))
    assert nig_log_density(0.0, 1.0, p) == pytest.approx(expected, rel=1e-14)


def test_log_density_rejects_nonpositive_variance():
    with pytest.raises(NIGDomainError, match="sigma2"):
        nig_log_density(0.0, 0.0, NIGParams(0, 1, 2, 1))


def test_log_density_is_finite_for_large_alpha():
    assert math.isfinite(nig_log_density(0.1, 0.5, NIGParams(0, 1, 400.0, 200.0)))


@pytest.mark.parametrize("p", [NIGParams(0, 1, 2, 1)] + random_params(np.random.default_rng(3), 9))
def test_density_integrates_to_one(p):
    assert quad_mass(p) == pytest.approx(1.0, abs=1e-4)


@given(valid, st.floats(0.01, 3), st.floats(0.05, 5))
def test_density_symmetric_about_gamma(p, c, s2):
    a = nig_log_density(p.gamma + c, s2, p)
    b = nig_log_density(p.gamma - c, s2, p)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_moments_examples():
    m = nig_moments(NIGParams(0, 1, 2, 1))
    assert (m.prediction, m.aleatoric, m.epistemic) == (0, 1, 1)
    m = nig_moments(NIGParams(1, 2, 3, 4))
    assert (m.prediction, m.aleatoric, m.epistemic) == (1, 2, 1)


def test_moments_match_quadrature():
    p = NIGParams(1, 2, 3, 4)
    mean, e_s2, var_mu = quad_moments(p)
    m = nig_moments(p)
    assert mean == pytest.approx(m.prediction, abs=1e-3)
    assert e_s2 == pytest.approx(m.aleatoric, abs=1e-3)
    assert var_mu == pytest.approx(m.epistemic, abs=1e-3)


def test_moments_need_alpha_above_one():
    with pytest.raises(UndefinedMomentError):
        nig_moments(NIGParams(0, 1, 1.0, 1))


@given(valid, st.floats(0.1, 10))
def test_moments_linear_in_beta(p, c):
    base = nig_moments(p)
    scaled = nig_moments(NIGParams(p.gamma, p.upsilon, p.alpha, p.beta * c))
    assert scaled.prediction == base.prediction
    assert scaled.aleatoric == pytest.approx(c * base.aleatoric, rel=1e-12)
    assert scaled.epistemic == pytest.approx(c * base.epistemic, rel=1e-12)


@given(valid)
def test_epistemic_times_upsilon_is_aleatoric(p):
    m = nig_moments(p)
    assert m.epistemic * p.upsilon == pytest.approx(m.aleatoric, rel=1e-14)


def test_uncertainty_arrays_agree_with_scalar():
    p = NIGParams(0.3, 1.7, 2.4, 0.9)
    ale, epi = uncertainty_arrays(np.array([p.upsilon]), np.array([p.alpha]), np.array([p.beta]))
    m = nig_moments(p)
    assert ale[0] == pytest.approx(m.aleatoric) and epi[0] == pytest.approx(m.epistemic)


def test_marginal_substitution():
    t = marginal_student_t(NIGParams(0, 1, 1, 1))
    assert (t.location, t.scale2, t.dof) == (0, 2, 2)


def test_marginal_density_at_zero():
    p = NIGParams(0, 1, 1, 1)
    assert marginal_student_t(p).pdf(0.0) == pytest.approx(0.25, rel=1e-12)
    assert quad_marginal(0.0, p) == pytest.approx(0.25, rel=1e-6)


@pytest.mark.parametrize("b", [-2.0, -1.0, 0.0, 1.0, 2.0])
def test_marginal_matches_quadrature(b):
    p = NIGParams(0.5, 2, 3, 1.5)
    assert marginal_student_t(p).pdf(b) == pytest.approx(quad_marginal(b, p), rel=1e-5)


def test_nll_example():
    assert nll_loss(0.0, NIGParams(0, 1, 1, 1)) == pytest.approx(-math.log(0.25), rel=1e-12)
    assert nll_loss(0.0, NIGParams(0, 1, 1, 1)) == pytest.approx(1.3863, abs=1e-4)


def test_nll_equals_negative_log_student_t_at_random_points():
    rng = np.random.default_rng(11)
    for p in random_params(rng, 20):
        b = float(rng.uniform(-4, 4))
        expected = -marginal_student_t(p).logpdf(b)
        assert nll_loss(b, p) == pytest.approx(expected, rel=1e-10)


def test_nll_minimised_at_gamma():
    p = NIGParams(0.7, 1.3, 2.2, 0.8)
    grid = np.linspace(-3, 3, 6001)
    values = nll_array(grid, p.gamma, p.upsilon, p.alpha, p.beta)
    assert grid[np.argmin(values)] == pytest.approx(p.gamma, abs=1e-3)


@given(valid, st.floats(0, 10), st.floats(0.001, 5))
def test_nll_strictly_increasing_in_residual(p, r, dr):
    near = nll_loss(p.gamma + r, p)
    far = nll_loss(p.gamma + r + dr, p)
    assert far > near or (far == near and dr * math.sqrt(p.upsilon) < 1e-6)


def test_nll_finite_for_large_alpha():
    assert math.isfinite(nll_loss(3.0, NIGParams(0, 1e-3, 1e4, 1e3)))


def test_nll_rejects_nonfinite_observation():
    with pytest.raises(NIGDomainError):
        nll_loss(math.nan, NIGParams(0, 1, 2, 1))
