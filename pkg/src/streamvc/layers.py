"""Layer vocabulary: linear, dilated causal convolution with GLU,
class-embedding conditioning, and scaled dot-product attention with masks.

All layers operate on (channels, time) tensors and are strictly causal:
output column n never reads input columns past n.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "LinearLayer",
    "CausalConvGLULayer",
    "ClassEmbeddingTable",
    "linear_forward",
    "causal_conv_forward",
    "embed_and_concat",
    "scaled_dot_attention",
    "build_band_mask",
    "MASK_FILL",
]

# stand-in for -inf in masked logits; exp underflows to exactly 0 while the
# tensor itself stays finite
MASK_FILL = -1e30


def _weight_norm_weight(v: Tensor, g: Tensor):
    """Effective weight g * v / ||v|| with the norm taken per output row."""
    if v.data.ndim == 3:
        c_out = v.data.shape[0]
        flat = ad.reshape(v, (c_out, v.data.shape[1] * v.data.shape[2]))
    else:
        c_out = v.data.shape[0]
        flat = v
    norm = ad.sqrt(ad.reduce_sum(ad.mul(flat, flat), axis=1, keepdims=True))
    scale = ad.tile(ad.div(g, norm), 1, flat.data.shape[1])
    w = ad.mul(flat, scale)
    if v.data.ndim == 3:
        w = ad.reshape(w, v.data.shape)
    return w


class LinearLayer:
    """Fully-connected layer applied independently to each time step."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 weight_norm: bool = False):
        bound = math.sqrt(3.0 / in_channels)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((out_channels, 1)), requires_grad=True)
        self.weight_norm = weight_norm
        self.wn_gain = None
        if weight_norm:
            norms = np.linalg.norm(w, axis=1, keepdims=True)
            self.wn_gain = Tensor(norms, requires_grad=True)

    @property
    def in_channels(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.data.shape[0]

    def parameters(self):
        ps = [("weight", self.weight), ("bias", self.bias)]
        if self.wn_gain is not None:
            ps.append(("wn_gain", self.wn_gain))
        return ps


def linear_forward(x: Tensor, layer: LinearLayer) -> Tensor:
    if x.data.shape[0] != layer.in_channels:
        raise ShapeError(
            f"linear_forward: {x.data.shape[0]} channels, layer wants {layer.in_channels}"
        )
    w = layer.weight
    if layer.weight_norm:
        w = _weight_norm_weight(layer.weight, layer.wn_gain)
    return ad.affine(x, w, layer.bias)


class CausalConvGLULayer:
    """Dilated causal convolution followed by a gated linear unit.

    The convolution emits 2*C_out channels; the first half is gated by the
    sigmoid of the second half, so the layer output has C_out channels.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 dilation: int, rng: np.random.Generator, weight_norm: bool = False):
        fan_in = in_channels * kernel_size
        # variance-preserving pre-gate scale; the residual path in the
        # stacks carries signal that the ~0.5 GLU gate would otherwise
        # shrink away over eight layers
        bound = math.sqrt(3.0 / fan_in)
        k = rng.uniform(-bound, bound, size=(2 * out_channels, in_channels, kernel_size))
        self.kernel = Tensor(k, requires_grad=True)
        self.bias = Tensor(np.zeros(2 * out_channels), requires_grad=True)
        self.dilation = int(dilation)
        self.kernel_size = int(kernel_size)
        self.out_channels = int(out_channels)
        self.in_channels = int(in_channels)
        self.weight_norm = weight_norm
        self.wn_gain = None
        if weight_norm:
            norms = np.linalg.norm(k.reshape(2 * out_channels, -1), axis=1, keepdims=True)
            self.wn_gain = Tensor(norms, requires_grad=True)

    @property
    def left_context(self) -> int:
        """Input frames of history one output frame depends on."""
        return self.dilation * (self.kernel_size - 1)

    def parameters(self):
        ps = [("kernel", self.kernel), ("bias", self.bias)]
        if self.wn_gain is not None:
            ps.append(("wn_gain", self.wn_gain))
        return ps


def causal_conv_forward(x: Tensor, layer: CausalConvGLULayer, residual: bool = False) -> Tensor:
    kernel = layer.kernel
    if layer.weight_norm:
        kernel = _weight_norm_weight(layer.kernel, layer.wn_gain)
    return ad.conv1d_glu(x, kernel, layer.bias, layer.dilation, residual=residual)


class ClassEmbeddingTable:
    """Learnable lookup table of per-class embedding vectors."""

    def __init__(self, n_classes: int, embed_dim: int, rng: np.random.Generator):
        self.table = Tensor(0.1 * rng.standard_normal((n_classes, embed_dim)),
                            requires_grad=True)

    @property
    def n_classes(self) -> int:
        return self.table.data.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.table.data.shape[1]

    def row(self, k: int) -> Tensor:
        """Embedding for class k (classes are numbered 1..K) as a column."""
        if not 1 <= k <= self.n_classes:
            raise ValueError(f"class index {k} out of range 1..{self.n_classes}")
        return ad.transpose(ad.narrow(self.table, 0, k - 1, 1))

    def parameters(self):
        return [("table", self.table)]


def embed_and_concat(x: Tensor, k: int, table: ClassEmbeddingTable) -> Tensor:
    """Append the class-k embedding, repeated over time, below ``x``."""
    if not 1 <= k <= table.n_classes:
        raise ValueError(f"class index {k} out of range 1..{table.n_classes}")
    return ad.concat_tiled_row(x, table.table, k - 1)


def build_band_mask(n: int, j: int) -> np.ndarray:
    """Allowed-key mask for banded causal self-attention.

    Entry (key, query) is True when query - j <= key <= query: each position
    sees itself plus at most ``j`` past positions. Including self keeps the
    first column non-empty.
    """
    if j < 1:
        raise ValueError("lookback must be >= 1")
    keys = np.arange(n)[:, None]
    queries = np.arange(n)[None, :]
    return (keys <= queries) & (keys >= queries - j)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None):
    """Scaled dot-product attention.

    ``q`` is (d_k, M), ``k`` is (d_k, N), ``v`` is (d_v, N); ``mask`` (N, M)
    marks allowed key/query pairs. Returns the warped values (d_v, M) and
    the attention matrix (N, M) whose columns sum to 1.
    """
    if q.data.shape[0] != k.data.shape[0]:
        raise ShapeError("scaled_dot_attention: query/key channel mismatch")
    if v.data.shape[1] != k.data.shape[1]:
        raise ShapeError("scaled_dot_attention: key/value length mismatch")
    d_k = q.data.shape[0]
    logits = ad.mul(ad.matmul(ad.transpose(k), q), 1.0 / math.sqrt(d_k))
    if mask is not None:
        if mask.shape != logits.data.shape:
            raise ShapeError(f"mask {mask.shape} vs logits {logits.data.shape}")
        if not mask.any(axis=0).all():
            raise ValueError("attention mask leaves a fully-masked query column")
        logits = ad.masked_fill(logits, mask, MASK_FILL)
    attn = ad.softmax(logits, axis=0)
    out = ad.matmul(v, attn)
    return out, attn
