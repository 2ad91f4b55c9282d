"""Gaussian attention: constraint clamps, monotone centers, evaluation,
normalization, window rescaling, and moment extraction."""

import math

import numpy as np
import pytest

from streamvc import autodiff as ad
from streamvc.autodiff import Tensor
from streamvc.gaussian_attention import (
    GaussianAttentionParams,
    SIGMA_MAX,
    SIGMA_MIN,
    apply_attention,
    attention_moments,
    centers_from_deltas,
    constrain_params,
    evaluate_attention,
    normalize_attention,
    rescale_to_window,
)

RNG = np.random.default_rng(99)


def params_from(mu, sigma=None, phi=None):
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    h, n = mu.shape
    sigma = np.full((h, n), 0.5) if sigma is None else np.atleast_2d(sigma)
    phi = np.full((h, n), 0.9) if phi is None else np.atleast_2d(phi)
    deltas = np.diff(np.concatenate([np.zeros((h, 1)), mu], axis=1), axis=1)
    return GaussianAttentionParams(deltas=Tensor(deltas), sigmas=Tensor(sigma),
                                   phis=Tensor(phi), mus=Tensor(mu))


def test_constrain_clamp_bounds():
    raw = np.zeros((3, 4))
    raw[1] = [5.0, 0.0, -0.5, 2.0]
    p = constrain_params(Tensor(raw))
    assert np.allclose(p.sigmas.data, [[1.0, SIGMA_MIN, 0.5, 1.0]])


def test_constrain_phi_at_zero():
    p = constrain_params(Tensor(np.zeros((3, 2))))
    assert np.allclose(p.phis.data, 0.9)


def test_constrain_delta_absolute():
    raw = np.zeros((3, 1))
    raw[0, 0] = -1.2
    p = constrain_params(Tensor(raw))
    assert np.allclose(p.deltas.data, [[1.2]])


def test_centers_cumulative_sum():
    mus = centers_from_deltas(Tensor([[0.5, 1.0, 2.0]]))
    assert np.allclose(mus.data, [[0.5, 1.5, 3.5]])
    assert np.allclose(centers_from_deltas(Tensor(np.zeros((1, 4)))).data, 0.0)


def test_centers_monotone_for_random_nonnegative():
    deltas = RNG.uniform(0, 3, (2, 30))
    mus = centers_from_deltas(Tensor(deltas)).data
    assert np.all(np.diff(mus, axis=1) >= 0)


def test_evaluate_peak_value():
    p = params_from([[2.0]], sigma=[[0.5]], phi=[[1.0]])
    alpha = evaluate_attention(p, 4)[0].data
    assert np.isclose(alpha[0, 1], 1.0)  # m = 2 hits the center


def test_evaluate_analytic_point():
    p = params_from([[2.0]], sigma=[[0.5]], phi=[[0.9]])
    alpha = evaluate_attention(p, 4)[0].data
    assert np.isclose(alpha[0, 2], 0.9 * math.exp(-2.0), atol=1e-12)  # m = 3


def test_evaluate_underflow_is_zero_not_nan():
    p = params_from([[1.0]], sigma=[[SIGMA_MIN]], phi=[[0.9]])
    alpha = evaluate_attention(p, 3)[0].data
    assert alpha[0, 1] == 0.0 and alpha[0, 2] == 0.0
    assert np.all(np.isfinite(alpha))


def test_normalize_column_values():
    a = Tensor(np.array([[1.0], [1.0], [2.0]]))
    out = normalize_attention([a])[0].data
    assert np.allclose(out, [[0.25], [0.25], [0.5]])


def test_normalize_idempotent():
    a = RNG.uniform(0.1, 1.0, (4, 3))
    once = normalize_attention([Tensor(a)])[0].data
    twice = normalize_attention([Tensor(once)])[0].data
    assert np.allclose(once, twice, atol=1e-15)


def test_normalize_dead_column_uniform():
    a = np.zeros((4, 2))
    a[:, 0] = [1, 1, 1, 1]
    out = normalize_attention([Tensor(a)])[0].data
    assert np.allclose(out[:, 1], 0.25)


@pytest.mark.parametrize("mu,expect", [
    ([2.0, 4.0, 6.0], [1.0, 2.0, 3.0]),
    ([1.0, 1.5, 2.0], [1.0, 2.0, 3.0]),
])
def test_rescale_analytic(mu, expect):
    p = params_from([mu])
    out = rescale_to_window(p, 3)
    assert np.allclose(out.mus.data, [expect])


def test_rescale_fixed_point_exact():
    p = params_from([[1.0, 1.7, 2.4, 4.0]])
    out = rescale_to_window(p, 4)
    assert out.mus.data[0, 0] == 1.0
    assert out.mus.data[0, -1] == 4.0


def test_rescale_degenerate_identity_fallback():
    p = params_from([[3.0, 3.0, 3.0]])
    out = rescale_to_window(p, 3)
    assert np.allclose(out.mus.data, [[1.0, 2.0, 3.0]])


def test_rescale_keeps_sigma_phi_and_order():
    mu = np.sort(RNG.uniform(0, 9, (1, 6)), axis=1)
    mu[0, -1] = mu[0, 0] + 5.0
    sigma = RNG.uniform(SIGMA_MIN, SIGMA_MAX, (1, 6))
    p = params_from(mu, sigma=sigma)
    out = rescale_to_window(p, 6)
    assert out.sigmas is p.sigmas and out.phis is p.phis
    assert np.all(np.diff(out.mus.data[0]) >= 0)


def test_moments_one_hot():
    a = np.zeros((1, 6))
    a[0, 3] = 1.0
    mu, sg = attention_moments(a)
    assert mu[0] == 4.0 and sg[0] == 0.0


def test_moments_uniform():
    mu, sg = attention_moments(np.ones((1, 3)))
    assert np.isclose(mu[0], 2.0)
    assert np.isclose(sg[0], math.sqrt(2.0 / 3.0))


def test_moments_symmetric_row():
    a = np.array([[0.2, 0.5, 1.0, 0.5, 0.2]])
    mu, _ = attention_moments(a)
    assert np.isclose(mu[0], 3.0)


def test_moments_zero_row_rejected():
    with pytest.raises(ValueError):
        attention_moments(np.zeros((2, 3)))


def test_moments_recover_gaussian_parameters():
    for sigma in (0.5, 1.0, 3.0):
        m = np.arange(1, 201, dtype=np.float64)
        center = 100.3
        row = 0.9 * np.exp(-((m - center) ** 2) / (2 * sigma ** 2))
        mu, sg = attention_moments(row[None, :])
        assert abs(mu[0] - center) <= 0.5
        assert abs(sg[0] - sigma) <= 0.5


def test_apply_attention_identity_and_uniform():
    v = RNG.uniform(-1, 1, (3, 4))
    out = apply_attention(Tensor(v), [Tensor(np.eye(4))])
    assert np.allclose(out.data, v, atol=1e-15)
    uniform = np.full((4, 2), 0.25)
    out = apply_attention(Tensor(v), [Tensor(uniform)])
    assert np.allclose(out.data, np.tile(v.mean(axis=1, keepdims=True), (1, 2)), atol=1e-12)


def test_apply_attention_matches_triple_loop():
    v = RNG.uniform(-1, 1, (3, 5))
    alpha = RNG.uniform(0, 1, (5, 4))
    alpha /= alpha.sum(axis=0, keepdims=True)
    out = apply_attention(Tensor(v), [Tensor(alpha)]).data
    naive = np.zeros((3, 4))
    for c in range(3):
        for m in range(4):
            for n in range(5):
                naive[c, m] += v[c, n] * alpha[n, m]
    assert np.allclose(out, naive, atol=1e-12)


def test_invariant_suite_random_draws():
    # the acceptance gate runs 10^4 draws; this is the fast everyday version
    rng = np.random.default_rng(7)
    for _ in range(200):
        h = rng.integers(1, 4)
        n = rng.integers(1, 12)
        raw = rng.uniform(-100, 100, (3 * h, n))
        p = constrain_params(Tensor(raw)).with_centers()
        assert np.all(p.deltas.data >= 0)
        assert np.all((p.sigmas.data >= SIGMA_MIN) & (p.sigmas.data <= SIGMA_MAX))
        assert np.all((p.phis.data > 0.8) & (p.phis.data < 1.0))
        assert np.all(np.diff(p.mus.data, axis=1) >= 0)
        alphas = normalize_attention(evaluate_attention(p, int(rng.integers(1, 10))))
        for a in alphas:
            assert np.allclose(a.data.sum(axis=0), 1.0, atol=1e-9)


def test_gradients_flow_through_the_whole_chain():
    rng = np.random.default_rng(3)
    raw = Tensor(rng.uniform(-1.5, 1.5, (3, 4)), requires_grad=True)
    v = Tensor(rng.uniform(-1, 1, (2, 4)))
    w = Tensor(rng.uniform(-1, 1, (2, 5)))

    def loss():
        p = constrain_params(raw).with_centers()
        alphas = normalize_attention(evaluate_attention(p, 5))
        return ad.reduce_sum(ad.mul(apply_attention(v, alphas), w))

    assert ad.grad_check(loss, [raw], step=1e-4) <= 1e-3
