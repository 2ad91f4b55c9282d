"""Layer contracts: per-step linearity, causality of convolutions, class
conditioning, band masks, and masked attention against a naive oracle."""

import math

import numpy as np
import pytest

from streamvc import autodiff as ad
from streamvc.autodiff import Tensor
from streamvc.layers import (
    CausalConvGLULayer,
    ClassEmbeddingTable,
    LinearLayer,
    build_band_mask,
    causal_conv_forward,
    embed_and_concat,
    linear_forward,
    scaled_dot_attention,
)

RNG = np.random.default_rng(1234)


def make_linear(c_in, c_out, weight=None, bias=None, weight_norm=False):
    layer = LinearLayer(c_in, c_out, np.random.default_rng(0), weight_norm)
    if weight is not None:
        layer.weight.data[...] = weight
        if weight_norm:
            layer.wn_gain.data[...] = np.linalg.norm(weight, axis=1, keepdims=True)
            layer.weight.data[...] = weight
    if bias is not None:
        layer.bias.data[...] = np.asarray(bias).reshape(-1, 1)
    return layer


def test_linear_identity():
    layer = make_linear(3, 3, weight=np.eye(3), bias=np.zeros(3))
    x = RNG.uniform(-1, 1, (3, 4))
    assert np.allclose(linear_forward(Tensor(x), layer).data, x, atol=1e-15)


def test_linear_zero_input_gives_bias():
    bias = np.array([1.0, -2.0])
    layer = make_linear(3, 2, weight=np.zeros((2, 3)), bias=bias)
    out = linear_forward(Tensor(np.zeros((3, 5))), layer).data
    assert np.allclose(out, np.tile(bias[:, None], (1, 5)))


def test_linear_matches_per_column_matmul():
    layer = LinearLayer(3, 4, np.random.default_rng(5))
    x = RNG.uniform(-1, 1, (3, 5))
    out = linear_forward(Tensor(x), layer).data
    for t in range(5):
        col = layer.weight.data @ x[:, t] + layer.bias.data[:, 0]
        assert np.allclose(out[:, t], col, atol=1e-12)


def test_conv_glu_kernel1_identity_half():
    # 'a' half passes input through, 'b' half is zero: GLU gives 0.5 * x
    layer = CausalConvGLULayer(2, 2, 1, 1, np.random.default_rng(0))
    k = np.zeros((4, 2, 1))
    k[0, 0, 0] = 1.0
    k[1, 1, 0] = 1.0
    layer.kernel.data[...] = k
    layer.bias.data[...] = 0.0
    x = RNG.uniform(-1, 1, (2, 6))
    out = causal_conv_forward(Tensor(x), layer).data
    assert np.allclose(out, 0.5 * x, atol=1e-15)


def test_conv_impulse_response_pre_glu():
    # scalar channel, kernel size 2, taps [1, 1]: impulse response [1, 1, 0, ...]
    x = np.zeros((1, 6))
    x[0, 0] = 1.0
    k = np.ones((1, 1, 2))
    b = np.zeros(1)
    pre = ad.dilated_conv1d(Tensor(x), Tensor(k), Tensor(b), 1).data
    assert np.allclose(pre[0], [1, 1, 0, 0, 0, 0])


@pytest.mark.parametrize("dilation", [1, 3, 9])
def test_conv_causality_bit_exact(dilation):
    layer = CausalConvGLULayer(3, 4, 5, dilation, np.random.default_rng(7))
    x = RNG.uniform(-1, 1, (3, 20))
    base = causal_conv_forward(Tensor(x), layer).data
    for t in (5, 12):
        bumped = x.copy()
        bumped[:, t] += 1.0
        out = causal_conv_forward(Tensor(bumped), layer).data
        assert np.array_equal(out[:, :t], base[:, :t])
        assert not np.array_equal(out[:, t:], base[:, t:])


def test_embed_and_concat_block():
    table = ClassEmbeddingTable(3, 2, np.random.default_rng(0))
    table.table.data[...] = [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]
    x = RNG.uniform(-1, 1, (2, 3))
    out = embed_and_concat(Tensor(x), 1, table).data
    assert np.allclose(out[:2], x)
    assert np.allclose(out[2:], [[0.1] * 3, [0.2] * 3])


def test_embed_and_concat_zero_channel_input():
    table = ClassEmbeddingTable(2, 2, np.random.default_rng(0))
    out = embed_and_concat(Tensor(np.zeros((0, 4))), 2, table).data
    assert out.shape == (2, 4)
    assert np.allclose(out, np.tile(table.table.data[1][:, None], (1, 4)))


def test_embed_and_concat_differs_only_in_block():
    table = ClassEmbeddingTable(3, 2, np.random.default_rng(3))
    x = RNG.uniform(-1, 1, (2, 4))
    a = embed_and_concat(Tensor(x), 1, table).data
    b = embed_and_concat(Tensor(x), 2, table).data
    assert np.array_equal(a[:2], b[:2])
    assert not np.array_equal(a[2:], b[2:])


def test_embed_class_out_of_range():
    table = ClassEmbeddingTable(2, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        embed_and_concat(Tensor(np.zeros((1, 2))), 3, table)
    with pytest.raises(ValueError):
        embed_and_concat(Tensor(np.zeros((1, 2))), 0, table)


def test_band_mask_j1():
    mask = build_band_mask(4, 1)
    allowed = {(i + 1, j + 1) for i, j in zip(*np.nonzero(mask))}
    assert allowed == {(1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 4), (4, 4)}


def test_band_mask_large_j_is_causal_triangle():
    mask = build_band_mask(5, 10)
    assert np.array_equal(mask, np.tril(np.ones((5, 5), dtype=bool)).T)


@pytest.mark.parametrize("n,j", [(1, 1), (4, 2), (7, 3), (9, 20)])
def test_band_mask_every_query_has_a_key(n, j):
    assert build_band_mask(n, j).any(axis=0).all()


def test_attention_single_key():
    q = Tensor(RNG.uniform(-1, 1, (3, 4)))
    k = Tensor(RNG.uniform(-1, 1, (3, 1)))
    v = Tensor(RNG.uniform(-1, 1, (2, 1)))
    out, attn = scaled_dot_attention(q, k, v)
    assert np.allclose(attn.data, 1.0)
    assert np.allclose(out.data, np.tile(v.data, (1, 4)))


def test_attention_identical_keys_split_evenly():
    q = Tensor(RNG.uniform(-1, 1, (3, 2)))
    key = RNG.uniform(-1, 1, (3, 1))
    k = Tensor(np.concatenate([key, key], axis=1))
    v = Tensor(RNG.uniform(-1, 1, (2, 2)))
    _, attn = scaled_dot_attention(q, k, v)
    assert np.allclose(attn.data, 0.5)


def test_attention_matches_naive_double_loop():
    d_k, n, m, d_v = 4, 6, 5, 3
    q = RNG.uniform(-1, 1, (d_k, m))
    k = RNG.uniform(-1, 1, (d_k, n))
    v = RNG.uniform(-1, 1, (d_v, n))
    out, attn = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    naive_attn = np.zeros((n, m))
    for col in range(m):
        logits = np.array([k[:, row] @ q[:, col] for row in range(n)]) / math.sqrt(d_k)
        e = np.exp(logits - logits.max())
        naive_attn[:, col] = e / e.sum()
    naive_out = np.zeros((d_v, m))
    for col in range(m):
        for row in range(n):
            naive_out[:, col] += v[:, row] * naive_attn[row, col]
    assert np.allclose(attn.data, naive_attn, atol=1e-12)
    assert np.allclose(out.data, naive_out, atol=1e-12)


def test_attention_columns_sum_to_one_and_nonnegative():
    q = Tensor(RNG.uniform(-3, 3, (4, 7)))
    k = Tensor(RNG.uniform(-3, 3, (4, 9)))
    v = Tensor(RNG.uniform(-3, 3, (2, 9)))
    mask = build_band_mask(9, 3)[:, :7]
    _, attn = scaled_dot_attention(q, k, v, mask)
    assert np.all(attn.data >= 0)
    assert np.allclose(attn.data.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(attn.data[~mask] == 0.0)


def test_attention_fully_masked_column_rejected():
    q = Tensor(np.zeros((2, 2)))
    k = Tensor(np.zeros((2, 3)))
    v = Tensor(np.zeros((2, 3)))
    mask = np.ones((3, 2), dtype=bool)
    mask[:, 1] = False
    with pytest.raises(ValueError):
        scaled_dot_attention(q, k, v, mask)


def test_weight_norm_linear_matches_reparameterization():
    layer = LinearLayer(4, 3, np.random.default_rng(9), weight_norm=True)
    x = RNG.uniform(-1, 1, (4, 5))
    out = linear_forward(Tensor(x), layer).data
    v = layer.weight.data
    g = layer.wn_gain.data
    w_eff = g * v / np.linalg.norm(v, axis=1, keepdims=True)
    assert np.allclose(out, w_eff @ x + layer.bias.data, atol=1e-12)


def test_weight_norm_conv_gradients():
    rng = np.random.default_rng(21)
    layer = CausalConvGLULayer(2, 2, 3, 1, rng, weight_norm=True)
    x = Tensor(rng.uniform(-1, 1, (2, 5)))
    w = Tensor(rng.uniform(-1, 1, (2, 5)))
    params = [p for _, p in layer.parameters()]
    err = ad.grad_check(lambda: ad.reduce_sum(ad.mul(causal_conv_forward(x, layer), w)),
                        params, step=1e-4)
    assert err <= 1e-3
