"""Synthetic parallel corpus with known time warps.

Each sentence is a smooth random latent curve. The source utterance
renders it through a class-specific channel transform; the target renders
the same curve through the target class's transform after a random
monotone piecewise-linear time warp with slopes in [0.5, 2]. The warp is
stored with the pair, giving a ground-truth alignment to validate
predicted attention centers against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Utterance", "ParallelCorpus", "synth_corpus_generate", "split_corpus"]


@dataclass
class Utterance:
    cls: int
    features: np.ndarray            # (D, T)
    warp: np.ndarray | None = None  # source frame -> target position, length T
    uid: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"utterance {self.uid}: non-finite features")
        if self.warp is not None:
            self.warp = np.asarray(self.warp, dtype=np.float64)
            if np.any(np.diff(self.warp) <= 0):
                raise ValueError(f"utterance {self.uid}: warp must be strictly increasing")


@dataclass
class ParallelCorpus:
    pairs: list
    n_classes: int

    def __len__(self):
        return len(self.pairs)


class _LatentCurve:
    """Band-limited random curve, evaluable at fractional positions."""

    N_WAVES = 4

    def __init__(self, rng: np.random.Generator, latent_dim: int, length: int):
        self.length = length
        self.amp = rng.standard_normal((latent_dim, self.N_WAVES)) / np.sqrt(self.N_WAVES)
        self.freq = rng.uniform(0.3, 2.5, size=(latent_dim, self.N_WAVES))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=(latent_dim, self.N_WAVES))

    def at(self, positions: np.ndarray) -> np.ndarray:
        """Latent values at (possibly fractional) source positions, (G, len(pos))."""
        rel = (np.asarray(positions, dtype=np.float64) - 1.0) / self.length
        arg = 2.0 * np.pi * self.freq[:, :, None] * rel[None, None, :] + self.phase[:, :, None]
        return (self.amp[:, :, None] * np.sin(arg)).sum(axis=1)


def _random_warp(rng: np.random.Generator, length: int) -> np.ndarray:
    """Strictly increasing piecewise-linear map from source frames 1..N."""
    n_seg = int(rng.integers(2, 6))
    cuts = np.sort(rng.uniform(1.0, length, size=n_seg - 1))
    knots = np.concatenate([[1.0], cuts, [float(length)]])
    slopes = rng.uniform(0.5, 2.0, size=n_seg)
    knot_vals = np.concatenate([[1.0], 1.0 + np.cumsum(np.diff(knots) * slopes)])
    return np.interp(np.arange(1, length + 1, dtype=np.float64), knots, knot_vals)


def synth_corpus_generate(seed: int, n_classes: int, pairs_per_class_pair: int,
                          base_len_range=(40, 80), feature_dim: int = 16,
                          latent_dim: int = 3) -> ParallelCorpus:
    """Deterministic synthetic corpus over every ordered class pair (k != k')."""
    if n_classes < 2:
        raise ValueError("need at least two classes for conversion pairs")
    lo, hi = base_len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {base_len_range}")
    rng = np.random.Generator(np.random.PCG64(seed))
    transforms = []
    for _ in range(n_classes):
        w = rng.standard_normal((feature_dim, latent_dim)) / np.sqrt(latent_dim)
        b = 0.3 * rng.standard_normal((feature_dim, 1))
        transforms.append((w, b))

    def render(latent: np.ndarray, cls: int) -> np.ndarray:
        w, b = transforms[cls - 1]
        return np.tanh(w @ latent + b)

    pairs = []
    for k in range(1, n_classes + 1):
        for k_tgt in range(1, n_classes + 1):
            if k_tgt == k:
                continue
            for i in range(pairs_per_class_pair):
                n_src = int(rng.integers(lo, hi + 1))
                curve = _LatentCurve(rng, latent_dim, n_src)
                warp = _random_warp(rng, n_src)
                m_tgt = max(1, int(round(warp[-1])))
                src_pos = np.arange(1, n_src + 1, dtype=np.float64)
                tgt_pos = np.interp(np.arange(1, m_tgt + 1, dtype=np.float64),
                                    warp, src_pos)
                uid = f"{k}to{k_tgt}_{i:04d}"
                src = Utterance(cls=k, features=render(curve.at(src_pos), k),
                                warp=warp, uid=uid)
                tgt = Utterance(cls=k_tgt, features=render(curve.at(tgt_pos), k_tgt),
                                warp=None, uid=uid)
                pairs.append((src, tgt))
    return ParallelCorpus(pairs=pairs, n_classes=n_classes)


def split_corpus(corpus: ParallelCorpus, holdout_per_class_pair: int):
    """Split off the last pairs of each ordered class pair as a held-out set."""
    groups: dict = {}
    for pair in corpus.pairs:
        groups.setdefault((pair[0].cls, pair[1].cls), []).append(pair)
    train, held = [], []
    for key in sorted(groups):
        g = groups[key]
        if holdout_per_class_pair >= len(g):
            raise ValueError("holdout would consume an entire class pair")
        cut = len(g) - holdout_per_class_pair
        train.extend(g[:cut])
        held.extend(g[cut:])
    return (ParallelCorpus(train, corpus.n_classes),
            ParallelCorpus(held, corpus.n_classes))
