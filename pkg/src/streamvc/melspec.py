"""WAV loading, log-mel extraction, and frame stacking.

Conventions (stated because every downstream number depends on them):
magnitude spectra, not power; no center padding, the first frame starts at
sample one; mel filters are unnormalized triangles on the HTK scale
spanning 0-8 kHz; natural log with a 1e-10 floor. Doubling the waveform
amplitude therefore raises every log-mel bin by ln 2.
"""

from __future__ import annotations

import wave

import numpy as np

from .config import MelConfig

__all__ = ["load_wav", "mel_filterbank", "mel_extract", "stack_frames", "unstack_frames"]

LOG_FLOOR = 1e-10


def load_wav(path, expect_rate: int = 16000) -> np.ndarray:
    """Read a RIFF PCM wav: 16-bit mono at the expected rate, as floats in [-1, 1]."""
    with wave.open(str(path), "rb") as wf:
        if wf.getcomptype() != "NONE":
            raise ValueError("compressed wav is not supported")
        if wf.getnchannels() != 1:
            raise ValueError(f"need mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"need 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != expect_rate:
            raise ValueError(
                f"need {expect_rate} Hz audio, got {wf.getframerate()} Hz (resample upstream)"
            )
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise ValueError("empty audio")
    return samples


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bands: int, n_fft: int, sample_rate: int,
                   f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """Triangular filters (n_bands, n_fft // 2 + 1), peak 1, HTK mel spacing."""
    n_bins = n_fft // 2 + 1
    mel_pts = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_bands + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft
    fb = np.zeros((n_bands, n_bins))
    for i in range(n_bands):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - left) / max(center - left, 1e-12)
        down = (right - bin_freqs) / max(right - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_extract(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Log-mel spectrogram (n_bands, T) of a mono waveform at cfg.sample_rate."""
    cfg.validate()
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise ValueError("mel_extract expects a non-empty 1-D waveform")
    frame = cfg.frame_length
    hop = cfg.hop_length
    if samples.size < frame:
        raise ValueError(f"audio shorter than one {cfg.frame_ms} ms frame")
    frames = np.lib.stride_tricks.sliding_window_view(samples, frame)[::hop]
    window = np.hanning(frame)
    spectrum = np.abs(np.fft.rfft(frames * window, axis=1))  # (T, bins)
    fb = mel_filterbank(cfg.n_bands, frame, cfg.sample_rate)
    mel = fb @ spectrum.T
    return np.log(np.maximum(mel, LOG_FLOOR))


def stack_frames(mel: np.ndarray, reduction: int) -> np.ndarray:
    """Stack ``reduction`` consecutive frames into one column.

    Output column j is the vertical concatenation of input columns
    r*j .. r*j + r - 1; a trailing remainder shorter than r is dropped.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if reduction < 1:
        raise ValueError("reduction must be >= 1")
    bands, t = mel.shape
    if t < reduction:
        raise ValueError(f"{t} frames cannot be stacked by {reduction}")
    t_out = t // reduction
    kept = mel[:, : t_out * reduction]
    return kept.T.reshape(t_out, reduction * bands).T.copy()


def unstack_frames(stacked: np.ndarray, reduction: int) -> np.ndarray:
    """Inverse of stack_frames on the frames it kept."""
    stacked = np.asarray(stacked, dtype=np.float64)
    d, t = stacked.shape
    if d % reduction != 0:
        raise ValueError(f"{d} channels do not split into {reduction} frames")
    bands = d // reduction
    return stacked.T.reshape(t * reduction, bands).T.copy()
