import math

import numpy as np
import pytest
from scipy import special, stats

from evidential_grounding import kernels
from evidential_grounding._pure import nig_nll_grad as pure_nll_grad
from evidential_grounding.grounding import Span, nms_1d, temporal_iou


def brute_nms(spans, threshold):
    """Reference suppression: repeatedly take the best remaining span."""
    remaining = list(range(len(spans)))
    kept = []
    while remaining:
        best = min(remaining, key=lambda i: (-spans[i][1], spans[i][0].start, i))
        kept.append(best)
        remaining = [j for j in remaining if j != best and
                     temporal_iou(spans[best][0].start, spans[best][0].end,
                                  spans[j][0].start, spans[j][0].end) <= threshold]
    return kept


def test_backend_reported():
    assert kernels.BACKEND in kernels.backends()


def test_nll_value_matches_student_t(backend):
    rng = np.random.default_rng(0)
    n = 50
    b, g = rng.normal(size=n), rng.normal(size=n)
    u, a, be = rng.uniform(0.2, 4, n), rng.uniform(1.1, 6, n), rng.uniform(0.2, 3, n)
    value = backend.nig_nll_grad(b, g, u, a, be)[0]
    scale = np.sqrt(be * (1 + u) / (u * a))
    ref = -stats.t.logpdf(b, df=2 * a, loc=g, scale=scale)
    np.testing.assert_allclose(value, ref, rtol=1e-10)


def test_nll_gradient_matches_finite_differences(backend):
    rng = np.random.default_rng(1)
    args = [rng.normal(size=20), rng.normal(size=20), rng.uniform(0.3, 3, 20),
            rng.uniform(1.2, 5, 20), rng.uniform(0.3, 3, 20)]
    out = backend.nig_nll_grad(*args)
    for k in range(5):
        h = 1e-6 * np.maximum(1, np.abs(args[k]))
        up = [a.copy() for a in args]
        dn = [a.copy() for a in args]
        up[k] += h
        dn[k] -= h
        fd = (backend.nig_nll_grad(*up)[0] - backend.nig_nll_grad(*dn)[0]) / (2 * h)
        np.testing.assert_allclose(out[k + 1], fd, rtol=1e-5, atol=1e-7)


def test_backends_agree_on_all_kernels():
    impls = kernels.backends()
    if "cython" not in impls:
        pytest.skip("compiled extension not built")
    py, cy = impls["python"], impls["cython"]
    rng = np.random.default_rng(2)
    args = (rng.normal(size=500), rng.normal(size=500), rng.uniform(0.1, 5, 500),
            rng.uniform(1.05, 20, 500), rng.uniform(0.1, 5, 500))
    for a, b in zip(py.nig_nll_grad(*args), cy.nig_nll_grad(*args)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
    starts = rng.uniform(0, 0.8, 300)
    ends = starts + rng.uniform(0, 0.3, 300)
    scores = np.round(rng.uniform(size=300), 2)
    np.testing.assert_array_equal(py.nms_keep(starts, ends, scores, 0.5),
                                  cy.nms_keep(starts, ends, scores, 0.5))
    v, pts = rng.normal(size=400), np.linspace(-3, 3, 50)
    np.testing.assert_allclose(py.gaussian_kde(v, pts, 0.3), cy.gaussian_kde(v, pts, 0.3),
                               rtol=1e-12)
    w = rng.beta(0.5, 2, 1000)
    np.testing.assert_array_equal(py.histogram_cdf_map(w, 64), cy.histogram_cdf_map(w, 64))


def test_nms_matches_brute_force_on_200_sets():
    rng = np.random.default_rng(3)
    for trial in range(200):
        n = int(rng.integers(1, 25))
        starts = rng.uniform(0, 1, n)
        ends = starts + rng.uniform(0, 0.5, n)
        scores = np.round(rng.uniform(size=n), 1)  # ties exercise the tie-break
        spans = [(Span(float(s), float(e)), float(c)) for s, e, c in zip(starts, ends, scores)]
        threshold = float(rng.choice([0.3, 0.5, 0.7]))
        got = nms_1d(spans, threshold)
        assert got == [spans[i] for i in brute_nms(spans, threshold)], trial


def test_nms_examples():
    a = (Span(0.0, 0.5), 0.9)
    b = (Span(0.05, 0.5), 0.8)
    c = (Span(0.6, 1.0), 0.7)
    assert nms_1d([a, b, c], 0.7) == [a, c]
    assert nms_1d([c, b, a], 0.95) == [a, b, c]
    assert nms_1d([], 0.5) == []
    with pytest.raises(ValueError):
        nms_1d([a], 0.0)


def test_histogram_fixture(backend):
    out = backend.histogram_cdf_map(np.array([1.0, 1.0, 2.0, 3.0]), 64)
    np.testing.assert_array_equal(out, [0.5, 0.5, 0.75, 1.0])


def test_histogram_equals_empirical_cdf_when_bins_separate(backend):
    rng = np.random.default_rng(4)
    v = np.sort(rng.choice(np.arange(64), 30, replace=False)).astype(float)
    v = rng.permutation(v)
    expected = np.array([(v <= x).mean() for x in v])
    np.testing.assert_array_equal(backend.histogram_cdf_map(v, 64), expected)


def test_kde_matches_direct_sum(backend):
    rng = np.random.default_rng(5)
    v = rng.normal(size=30)
    pts = np.linspace(-2, 2, 7)
    ref = [sum(stats.norm.pdf(p, loc=x, scale=0.4) for x in v) / len(v) for p in pts]
    np.testing.assert_allclose(backend.gaussian_kde(v, pts, 0.4), ref, rtol=1e-12)
