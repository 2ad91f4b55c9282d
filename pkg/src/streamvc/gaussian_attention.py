"""Monotonic Gaussian attention.

Each source position n carries one Gaussian per head over target time m:
amplitude phi, width sigma, center mu. Centers are cumulative sums of
nonnegative increments, so they can only move forward; this is what lets a
sliding window stretch or squeeze the alignment without ever skipping or
repeating converted content.

Time is 1-based inside the formulas (m = 1..M); arrays are stored 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "GaussianAttentionParams",
    "SIGMA_MIN",
    "SIGMA_MAX",
    "constrain_params",
    "centers_from_deltas",
    "evaluate_attention",
    "normalize_attention",
    "rescale_to_window",
    "attention_moments",
    "apply_attention",
]

SIGMA_MIN = 0.001
SIGMA_MAX = 1.0
PHI_SCALE = 0.2
PHI_OFFSET = 0.8


@dataclass
class GaussianAttentionParams:
    """Per-head, per-position Gaussian parameters, each (H, N).

    ``mus`` is derived from ``deltas`` by running summation and is filled
    by ``centers_from_deltas``; until then it is None.
    """

    deltas: Tensor
    sigmas: Tensor
    phis: Tensor
    mus: Tensor | None = None

    @property
    def n_heads(self) -> int:
        return self.deltas.data.shape[0]

    @property
    def length(self) -> int:
        return self.deltas.data.shape[1]

    def with_centers(self) -> "GaussianAttentionParams":
        if self.mus is None:
            self.mus = centers_from_deltas(self.deltas)
        return self


def constrain_params(raw: Tensor) -> GaussianAttentionParams:
    """Map an unconstrained (3H, N) array onto valid Gaussian parameters.

    Increments become |raw|, widths are |raw| clamped to
    [SIGMA_MIN, SIGMA_MAX] so no Gaussian gets too wide or too sharp, and
    amplitudes are squashed into (0.8, 1.0) so no row can vanish.
    """
    three_h, _ = raw.data.shape
    if three_h % 3 != 0:
        raise ad.ShapeError(f"constrain_params: first dim {three_h} not divisible by 3")
    h = three_h // 3
    raw_delta = ad.narrow(raw, 0, 0, h)
    raw_sigma = ad.narrow(raw, 0, h, h)
    raw_phi = ad.narrow(raw, 0, 2 * h, h)
    deltas = ad.absolute(raw_delta)
    sigmas = ad.clamp(ad.absolute(raw_sigma), SIGMA_MIN, SIGMA_MAX)
    phis = ad.add(ad.mul(ad.sigmoid(raw_phi), PHI_SCALE), PHI_OFFSET)
    return GaussianAttentionParams(deltas=deltas, sigmas=sigmas, phis=phis)


def centers_from_deltas(deltas: Tensor) -> Tensor:
    """Running sum of increments along time: mu_n = delta_1 + ... + delta_n."""
    return ad.cumsum(deltas, axis=1)


def evaluate_attention(params: GaussianAttentionParams, m_len: int):
    """Evaluate the unnormalized Gaussians on the target grid m = 1..M.

    Returns one (N, M) tensor per head. Entries far from every center
    underflow to exact zeros, never NaN.
    """
    if m_len < 1:
        raise ValueError("target length must be >= 1")
    params = params.with_centers()
    n = params.length
    grid = Tensor(np.arange(1, m_len + 1, dtype=np.float64)[None, :])
    grid_nm = ad.tile(grid, 0, n)
    heads = []
    for h in range(params.n_heads):
        mu = ad.tile(ad.transpose(ad.narrow(params.mus, 0, h, 1)), 1, m_len)
        sg = ad.tile(ad.transpose(ad.narrow(params.sigmas, 0, h, 1)), 1, m_len)
        ph = ad.tile(ad.transpose(ad.narrow(params.phis, 0, h, 1)), 1, m_len)
        z = ad.div(ad.sqdiff(grid_nm, mu), ad.mul(ad.mul(sg, sg), 2.0))
        heads.append(ad.mul(ph, ad.exp(ad.neg(z))))
    return heads


def normalize_attention(alpha_heads):
    """Scale every column to sum to 1 over source positions.

    A column where every Gaussian underflowed becomes uniform 1/N rather
    than an error; with amplitudes pinned above 0.8 this only happens when
    the centers have drifted far from the window, i.e. early in training.
    """
    return [ad.normalize_columns(a) for a in alpha_heads]


def rescale_to_window(params: GaussianAttentionParams, window: int) -> GaussianAttentionParams:
    """Affinely remap centers so the head-mean spans exactly [1, window].

    Widths and amplitudes stay untouched; the map has positive slope so
    per-head monotonicity survives. A degenerate span (a nearly silent
    chunk predicting no forward motion) falls back to the identity
    alignment mu_n = n.
    """
    params = params.with_centers()
    if params.length != window:
        raise ad.ShapeError(f"rescale_to_window: {params.length} positions != window {window}")
    mus = params.mus
    mu_first = float(mus.data[:, 0].mean())
    mu_last = float(mus.data[:, -1].mean())
    span = mu_last - mu_first
    if span < 1e-6:
        ident = np.tile(np.arange(1, window + 1, dtype=np.float64), (params.n_heads, 1))
        new_mus = Tensor(ident)
    else:
        scaled = ad.mul(ad.add(mus, -mu_first), (window - 1) / span)
        new_mus = ad.add(scaled, 1.0)
    return GaussianAttentionParams(
        deltas=params.deltas, sigmas=params.sigmas, phis=params.phis, mus=new_mus
    )


def attention_moments(attn: np.ndarray):
    """Mean and standard deviation of each attention row seen as a histogram.

    Row n of ``attn`` (N, M) weights target times m = 1..M; returns
    (mu_hat, sigma_hat), each length N. Rows with zero mass are malformed
    teacher output and raise.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2:
        raise ad.ShapeError("attention_moments expects an (N, M) matrix")
    if np.any(attn < 0):
        raise ValueError("attention_moments: negative weights")
    totals = attn.sum(axis=1)
    if np.any(totals <= 0):
        raise ValueError("attention_moments: row with zero total mass")
    grid = np.arange(1, attn.shape[1] + 1, dtype=np.float64)
    mu_hat = (attn * grid).sum(axis=1) / totals
    var = (attn * (grid[None, :] - mu_hat[:, None]) ** 2).sum(axis=1) / totals
    return mu_hat, np.sqrt(var)


def apply_attention(values: Tensor, alpha_heads) -> Tensor:
    """Warp the value sequence: R = V @ alpha (single-head form)."""
    if len(alpha_heads) != 1:
        raise ValueError("apply_attention handles the single-head wiring")
    return ad.matmul(values, alpha_heads[0])
