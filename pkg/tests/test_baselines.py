import copy

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff, zca
from swbnlab import baselines as bl
from swbnlab.data import equicorrelation, gen_correlated_gaussian
from swbnlab.matrixcore import OpCounter, ShapeError, correlation, mean_abs_offdiag
from swbnlab.swbn import SwbnState, forward_train


def random_bn(rng, d):
    s = bl.BnState.fresh(d)
    s.gamma = rng.uniform(0.5, 2.0, d)
    s.beta = rng.standard_normal(d)
    return s


def test_bn_standardized_batch_passes_through():
    x = np.array([[1.0, -1.0, 1.0, -1.0], [2.0, 0.0, -2.0, 0.0]])
    x = x / x.std(axis=1, ddof=1, keepdims=True)
    out, _ = bl.bn_forward_train(x, bl.BnState.fresh(2))
    assert np.allclose(out, x, atol=1e-8)


def test_bn_matches_swbn_with_identity_w(rng):
    x = rng.standard_normal((5, 11)) * 3 + 1
    bn = random_bn(rng, 5)
    sw = SwbnState.fresh(5, alpha=0.0)
    sw.gamma, sw.beta = bn.gamma.copy(), bn.beta.copy()
    a, _ = bl.bn_forward_train(x, bn)
    b, _ = forward_train(x, sw)
    assert np.max(np.abs(a - b)) < 1e-12
    assert np.array_equal(bn.mu_e, sw.mu_e) and np.array_equal(bn.v_e, sw.v_e)


def test_bn_gradient_matches_finite_differences(rng):
    s = random_bn(rng, 3)
    x = rng.standard_normal((3, 4))
    # plain sum of squares is constant under BN, so weight it per entry
    r = rng.uniform(0.5, 2.0, x.shape)
    out, cache = bl.bn_forward_train(x, copy.deepcopy(s))
    gx, gg, gb = bl.bn_backward(2 * r * out, cache, s)

    def loss(xx):
        return float(np.sum(r * bl.bn_forward_train(xx, copy.deepcopy(s))[0] ** 2))

    num = central_diff(loss, x)
    assert np.max(np.abs(gx - num) / np.maximum(1e-8, np.abs(num))) < 1e-5
    assert np.allclose(gb, 2 * (r * out).sum(axis=1))


def test_bn_errors_and_predict(rng):
    s = bl.BnState.fresh(2)
    with pytest.raises(ValueError):
        bl.bn_forward_train(np.ones((2, 1)), s)
    with pytest.raises(ValueError):
        bl.BnState.fresh(2, eta=0.0)
    s = random_bn(rng, 3)
    s.mu_e = np.array([1.0, 2.0, 3.0])
    s.v_e = np.array([4.0, 1.0, 0.25])
    x = rng.standard_normal((3, 5))
    want = (x - s.mu_e[:, None]) / np.sqrt(s.v_e + s.eps)[:, None] * s.gamma[:, None] + s.beta[:, None]
    assert np.allclose(bl.bn_predict(x, s), want, atol=1e-14)
    assert np.allclose(bl.bn_predict(x[:, 0], s), want[:, 0], atol=1e-14)


def test_bn_dict_roundtrip(rng):
    s = random_bn(rng, 3)
    t = bl.BnState.from_dict(s.to_dict())
    assert np.array_equal(t.gamma, s.gamma) and np.array_equal(t.beta, s.beta)


def test_iternorm_identity_examples():
    assert np.allclose(bl.iternorm_whiten(np.eye(2), 1), 1.25 / np.sqrt(2) * np.eye(2), atol=1e-15)
    w = bl.iternorm_whiten(np.eye(2), 30)
    assert np.allclose(w, np.eye(2), atol=1e-12)


def test_iternorm_diag_example():
    s = np.diag([2.0, 0.5])
    w = bl.iternorm_whiten(s, 5)
    assert np.linalg.norm(w @ s @ w.T - np.eye(2)) < 0.05


def test_iternorm_converges_to_zca(rng):
    s = equicorrelation(4, 0.3)
    w = bl.iternorm_whiten(s, 40)
    assert np.max(np.abs(w - zca(s))) < 1e-10


def test_iternorm_errors():
    with pytest.raises(ValueError):
        bl.iternorm_whiten(np.eye(2), 0)
    with pytest.raises(ValueError, match="trace"):
        bl.iternorm_whiten(np.zeros((2, 2)), 5)
    with pytest.raises(ShapeError):
        bl.iternorm_whiten(np.ones((2, 3)), 5)
    with pytest.raises(ValueError):
        bl.IterNormState.fresh(2, T=0)


@settings(max_examples=30)
@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_iternorm_diagonal_stays_diagonal(d, T, seed):
    s = np.diag(np.random.default_rng(seed).uniform(0.1, 5.0, d))
    w = bl.iternorm_whiten(s, T)
    assert np.array_equal(w, np.diag(np.diag(w)))


@pytest.mark.parametrize("d, n, T", [(16, 32, 5), (16, 128, 1), (64, 128, 5)])
def test_iternorm_matmul_count(d, n, T, rng):
    c = OpCounter()
    bl.iternorm_forward_train(rng.standard_normal((d, n)), bl.IterNormState.fresh(d, T=T), c)
    assert c.matmul_mults == 2 * d * d * n + 3 * T * d ** 3


def test_iternorm_count_frozen_example(rng):
    c = OpCounter()
    bl.iternorm_forward_train(rng.standard_normal((16, 32)), bl.IterNormState.fresh(16), c)
    assert c.matmul_mults == 77824


def test_iternorm_identity_covariance_batch():
    # rows orthogonal with unit second moment after centering
    x = np.array([[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]]) + np.array([[3.0], [-2.0]])
    s = bl.IterNormState.fresh(2, T=30)
    out, cache = bl.iternorm_forward_train(x, s)
    assert np.allclose(out, x - x.mean(axis=1, keepdims=True), atol=1e-7)


def test_iternorm_single_step_whitens():
    d = 8
    x = gen_correlated_gaussian(d, 512, equicorrelation(d, 0.8), 7)
    s = bl.IterNormState.fresh(d)
    out, cache = bl.iternorm_forward_train(x, s)
    assert mean_abs_offdiag(correlation(cache.x_w)) < 0.1
    assert mean_abs_offdiag(correlation(x)) > 0.7


def test_iternorm_backward_is_read_only_and_linear(rng):
    s = bl.IterNormState.fresh(4)
    s.gamma = rng.uniform(0.5, 2, 4)
    x = rng.standard_normal((4, 10))
    out, cache = bl.iternorm_forward_train(x, s)
    before = copy.deepcopy(s.to_dict())
    g = rng.standard_normal((4, 10))
    gx, gg, gb = bl.iternorm_backward(g, cache, s)
    assert s.to_dict() == before
    w = cache.extra["w"]
    want = w.T @ (g * s.gamma[:, None])
    assert np.allclose(gx, want - want.mean(axis=1, keepdims=True), atol=1e-14)
    assert np.allclose(gb, g.sum(axis=1)) and np.allclose(gg, (g * cache.x_w).sum(axis=1))
    with pytest.raises(ShapeError):
        bl.iternorm_backward(g[:, :3], cache, s)


def test_iternorm_ema_and_predict(rng):
    s = bl.IterNormState.fresh(3)
    x = rng.standard_normal((3, 20)) + 1
    _, cache = bl.iternorm_forward_train(x, s)
    assert np.allclose(s.w_e, 0.95 * np.eye(3) + 0.05 * cache.extra["w"])
    assert np.allclose(s.mu_e, 0.05 * x.mean(axis=1))
    v = rng.standard_normal(3)
    assert np.allclose(bl.iternorm_predict(v, s), s.w_e @ (v - s.mu_e) * s.gamma + s.beta)
    t = bl.IterNormState.from_dict(s.to_dict())
    assert np.array_equal(t.w_e, s.w_e) and t.T == s.T
