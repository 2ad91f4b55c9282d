"""Mel-cepstral distortion along a dynamic-time-warping path.

Frames are turned into mel-cepstra by an orthonormal type-II DCT of the
log-mel vector, keeping coefficients 1..24 (the 0th, overall level, is
dropped). DTW uses the symmetric step set {(1,0), (0,1), (1,1)} on
Euclidean frame distance; the reported MCD is the path average of
(10 * sqrt(2) / ln 10) * ||c_a - c_b||_2 in dB.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.fft import dct
from scipy.spatial.distance import cdist

__all__ = ["MCD_CONST", "mel_cepstra", "dtw_path", "mcd_dtw"]

MCD_CONST = 10.0 * math.sqrt(2.0) / math.log(10.0)


def mel_cepstra(frames: np.ndarray, order: int = 25) -> np.ndarray:
    """Cepstra (order-1, T) from log-mel frames (bands, T); c0 is dropped.

    ``order`` counts coefficients including c0 and is clipped to the
    number of bands for low-dimensional features.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] == 0:
        raise ValueError("mel_cepstra expects a non-empty (bands, T) array")
    keep = min(order, frames.shape[0])
    if keep < 2:
        raise ValueError("need at least two cepstral coefficients after dropping c0")
    coeffs = dct(frames, type=2, norm="ortho", axis=0)
    return coeffs[1:keep, :]


def dtw_path(dist: np.ndarray):
    """Minimum-cost alignment through a (Ta, Tb) local-distance matrix.

    Steps are (1,0), (0,1), (1,1); ties prefer the diagonal. Returns the
    list of aligned index pairs from (0,0) to (Ta-1, Tb-1).
    """
    ta, tb = dist.shape
    acc = np.full((ta, tb), np.inf)
    move = np.zeros((ta, tb), dtype=np.int8)  # 0 diag, 1 up (i-1), 2 left (j-1)
    acc[0, 0] = dist[0, 0]
    for i in range(1, ta):
        acc[i, 0] = acc[i - 1, 0] + dist[i, 0]
        move[i, 0] = 1
    for j in range(1, tb):
        acc[0, j] = acc[0, j - 1] + dist[0, j]
        move[0, j] = 2
    for i in range(1, ta):
        diag = acc[i - 1, :-1]
        up = acc[i - 1, 1:]
        row = np.empty(tb)
        row[0] = acc[i, 0]
        for j in range(1, tb):
            best = diag[j - 1]
            m = 0
            if up[j - 1] < best:
                best = up[j - 1]
                m = 1
            if row[j - 1] < best:
                best = row[j - 1]
                m = 2
            row[j] = best + dist[i, j]
            move[i, j] = m
        acc[i] = row
    path = []
    i, j = ta - 1, tb - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        m = move[i, j]
        if m == 0:
            i, j = i - 1, j - 1
        elif m == 1:
            i -= 1
        else:
            j -= 1
    path.reverse()
    return path


def mcd_dtw(a: np.ndarray, b: np.ndarray, order: int = 25) -> float:
    """MCD in dB between two log-mel sequences, averaged along the DTW path."""
    ca = mel_cepstra(a, order)
    cb = mel_cepstra(b, order)
    dist = cdist(ca.T, cb.T, metric="euclidean")
    path = dtw_path(dist)
    return MCD_CONST * float(np.mean([dist[i, j] for i, j in path]))
