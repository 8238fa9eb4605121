import numpy as np
import pytest
from hypothesis import given, strategies as st

from evidential_grounding import autodiff as ad
from evidential_grounding.losses import (DegenerateBatchError, ErrorEvidencePair, LossWeights,
                                         NormMode, Regularizer, UnitSquareError,
                                         error_evidence_pairs, evidential_loss, geom_tensor,
                                         geom_type1, geom_type1_grad_phi, geom_type2,
                                         geom_type2_grad_phi, gradient_field, normalize_batch,
                                         normalize_tensor, nll_tensor, total_loss,
                                         vanilla_grad_phi, vanilla_regularizer)
from evidential_grounding.nig import NIGParams, nll_loss

unit = st.floats(0.0, 1.0)


def fd(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


# normalisation ------------------------------------------------------------------

def test_normalize_examples():
    np.testing.assert_allclose(normalize_batch([2, 4, 6], NormMode.STANDARD_MINMAX), [0, 0.5, 1])
    np.testing.assert_allclose(normalize_batch([2, 4, 6], NormMode.PAPER_MINMAX), [0.5, 1.0, 1.5])
    np.testing.assert_allclose(normalize_batch([0], NormMode.TANH), [0])


@pytest.mark.parametrize("mode", [NormMode.STANDARD_MINMAX, NormMode.PAPER_MINMAX])
def test_normalize_degenerate_batch(mode):
    with pytest.raises(DegenerateBatchError):
        normalize_batch([3, 3, 3], mode)


def test_normalize_empty():
    with pytest.raises(ValueError):
        normalize_batch([], NormMode.TANH)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_standard_minmax_in_unit_interval(values):
    if max(values) == min(values):
        return
    out = normalize_batch(values)
    assert out.min() == 0.0 and out.max() == 1.0


def test_normalize_tensor_matches_batch_and_falls_back():
    x = np.array([0.3, 1.5, 0.9])
    np.testing.assert_allclose(normalize_tensor(x).data, normalize_batch(x))
    np.testing.assert_allclose(normalize_tensor(np.array([0.4])).data, np.tanh([0.4]))
    np.testing.assert_allclose(normalize_tensor(np.array([2.0, 2.0])).data, np.tanh([2.0, 2.0]))


def test_normalize_tensor_shift_invariant_gradient():
    # a common shift of the batch leaves the normalised values, hence the loss, unchanged
    x = ad.Tensor(np.array([0.2, 1.1, 0.5, 2.0]), requires_grad=True)
    ad.tsum(ad.square(normalize_tensor(x))).backward()
    assert abs(x.grad.sum()) < 1e-12


def test_error_evidence_pairs():
    params = [NIGParams(0, 1, 2, 1), NIGParams(1, 2, 3, 1), NIGParams(0, 0.5, 1.5, 1)]
    pairs = error_evidence_pairs([0.5, 1.0, 2.0], params)
    assert [p.delta for p in pairs] == [0.5, 0.0, 2.0]
    assert [p.phi for p in pairs] == [4.0, 7.0, 2.5]
    assert [p.delta_norm for p in pairs] == [0.25, 0.0, 1.0]
    assert pairs[1].phi_norm == 1.0
    single = error_evidence_pairs([0.5], params[:1])
    assert single[0].delta_norm == pytest.approx(np.tanh(0.5))


# regularizers -------------------------------------------------------------------

def test_vanilla_examples():
    assert vanilla_regularizer(0, 5) == 0
    assert vanilla_regularizer(0.5, 4) == 2.0
    for phi in (1, 10, 100):
        assert fd(lambda p: vanilla_regularizer(0.3, p), float(phi)) == pytest.approx(0.3, rel=1e-8)
        assert vanilla_grad_phi(0.3, phi) == 0.3


def test_geom_examples():
    assert geom_type1(0, 1) == 0
    assert geom_type1(1, 1) == 1
    assert geom_type2(0.5, 0.5) == 0
    assert geom_type2(0, 1) == -1
    assert geom_type2(1, 1) == 1


@pytest.mark.parametrize("fn", [geom_type1, geom_type2])
def test_geom_domain(fn):
    with pytest.raises(UnitSquareError):
        fn(1.2, 0.5)
    with pytest.raises(UnitSquareError):
        fn(0.5, -0.1)


def test_type1_argmin_on_grid():
    grid = np.linspace(0, 1, 100001)
    values = (grid + 0.3 - 1) ** 2
    assert grid[np.argmin(values)] == pytest.approx(0.7, abs=1e-5)


def test_type1_gradient_identity_random_points():
    rng = np.random.default_rng(0)
    for d, p in rng.uniform(0.01, 0.99, size=(100, 2)):
        analytic = -geom_type1_grad_phi(d, p)
        numeric = -fd(lambda x: (x + d - 1) ** 2, p)
        assert analytic == pytest.approx(numeric, abs=1e-8)


def test_type2_gradient_matches_fd():
    rng = np.random.default_rng(1)
    for d, p in rng.uniform(0.01, 0.99, size=(50, 2)):
        f = lambda x: (x + d - 1) ** 2 - (x - d) ** 2
        assert geom_type2_grad_phi(d, p) == pytest.approx(fd(f, p), abs=1e-8)


@given(unit, unit)
def test_type2_bounded_by_type1(d, p):
    t1, t2 = geom_type1(d, p), geom_type2(d, p)
    assert t1 - 1 - 1e-12 <= t2 <= t1 + 1e-12


def test_geom_tensor_detaches_error():
    d = ad.Tensor(np.array([0.2, 0.7]), requires_grad=True)
    p = ad.Tensor(np.array([0.4, 0.9]), requires_grad=True)
    for kind in (Regularizer.TYPE1, Regularizer.TYPE2):
        d.grad = p.grad = None
        ad.tsum(geom_tensor(d, p, kind)).backward()
        assert d.grad is None
        expected = geom_type1_grad_phi(d.data, p.data) if kind is Regularizer.TYPE1 \
            else geom_type2_grad_phi(d.data, p.data)
        np.testing.assert_allclose(p.grad, expected)


def test_geom_tensor_rejects_vanilla():
    with pytest.raises(ValueError):
        geom_tensor(np.zeros(2), np.zeros(2), Regularizer.VANILLA)


def test_nll_tensor_matches_scalar():
    p = NIGParams(0.2, 1.5, 2.5, 1.0)
    t = nll_tensor(1.0, ad.Tensor(p.gamma), ad.Tensor(p.upsilon), ad.Tensor(p.alpha), ad.Tensor(p.beta))
    assert t.item() == pytest.approx(nll_loss(1.0, p), rel=1e-13)


# combined losses ------------------------------------------------------------------

def test_evidential_loss_examples():
    p = NIGParams(0, 1, 1, 1)
    pair = ErrorEvidencePair(0.0, 3.0, 0.2, 0.8)
    assert evidential_loss(0.0, p, pair, LossWeights()) == pytest.approx(1.3863, abs=1e-4)
    assert evidential_loss(0.0, p, pair, LossWeights(lambda_geom=0)) == pytest.approx(nll_loss(0.0, p))
    assert evidential_loss(0.0, p, pair, LossWeights(lambda_nll=0)) == pytest.approx(0.0, abs=1e-15)
    off_line = ErrorEvidencePair(0.0, 3.0, 0.5, 0.9)
    w2 = LossWeights(lambda_nll=0, geom_type=Regularizer.TYPE2)
    assert evidential_loss(0.0, p, off_line, w2) == pytest.approx(geom_type2(0.5, 0.9))


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_nll, w.lambda_geom, w.lambda_der) == (1.0, 1.0, 1e-3)
    with pytest.raises(ValueError):
        LossWeights(lambda_der=-1)


def test_total_loss_examples():
    assert total_loss(1.0, [0, 0], LossWeights(lambda_der=0.7)) == 1.0
    assert total_loss(0.0, [1, 1, 1, 1], LossWeights(lambda_der=1e-3)) == pytest.approx(2e-3)
    assert total_loss(2.5, [0.5], LossWeights(lambda_der=1.0)) == pytest.approx(3.5)
    with pytest.raises(ValueError):
        total_loss(1.0, [])


# gradient fields ----------------------------------------------------------------

def test_gradient_field_vanilla_constant_in_phi():
    f = gradient_field(Regularizer.VANILLA, 11)
    assert f.neg_grad.shape == (11, 11)
    for i in range(11):
        assert np.all(f.neg_grad[i] == f.neg_grad[i, 0])
    i = int(np.argmin(np.abs(f.delta_norm[:, 0] - 0.3)))
    assert np.all(f.neg_grad[i] == -f.delta_norm[i, 0])


def test_gradient_field_type1_zero_on_line():
    f = gradient_field("geom1", 2)
    rows = {(d, p): g for d, p, g in f.rows()}
    assert rows[(0.0, 1.0)] == 0 and rows[(1.0, 0.0)] == 0
    f = gradient_field("geom1", 3)
    rows = {(d, p): g for d, p, g in f.rows()}
    assert rows[(0.5, 0.5)] == 0


def test_gradient_field_type2_corner_matches_fd():
    f = gradient_field("geom2", 2)
    rows = {(d, p): g for d, p, g in f.rows()}
    numeric = -fd(lambda x: (x + 0.0 - 1) ** 2 - (x - 0.0) ** 2, 1.0)
    assert rows[(0.0, 1.0)] == pytest.approx(numeric, abs=1e-8)
    assert rows[(0.0, 1.0)] == pytest.approx(2.0)


def test_gradient_field_validation():
    with pytest.raises(ValueError):
        gradient_field("geom1", 1)
    with pytest.raises(ValueError):
        gradient_field("none", 4)
