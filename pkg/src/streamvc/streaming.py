"""Sliding-window conversion runtime.

Causal convolutions are chunked exactly: each layer keeps the last
dilation*(kernel-1) input frames, so concatenated chunk outputs are
bit-identical to a full-sequence pass. Banded self-attention keeps the
last ``lookback`` inputs plus the global position, reproducing the masked
full-sequence result bit-exactly (reductions accumulate in a fixed global
order on both paths). Per window, the Gaussian alignment is rescaled to
span the window, so speaking-rate changes squeeze or stretch inside the
window instead of skipping or repeating content.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import StreamConfig
from .gaussian_attention import (
    apply_attention,
    constrain_params,
    evaluate_attention,
    normalize_attention,
    rescale_to_window,
)
from .layers import MASK_FILL, causal_conv_forward, embed_and_concat, linear_forward
from .models import StudentModel

__all__ = [
    "ConvStream",
    "BandedAttentionStream",
    "banded_self_attention",
    "StreamState",
    "stream_init",
    "push_chunk",
    "run_stream",
    "WindowTiming",
    "write_timing_csv",
]


class ConvStream:
    """Chunked evaluation of one causal GLU convolution layer.

    Keeps exactly dilation*(kernel-1) input frames; a fresh stream starts
    from zeros, matching the zero left-padding of the batch form.
    """

    def __init__(self, layer):
        self.layer = layer
        self.cache = np.zeros((layer.in_channels, layer.left_context))

    def push(self, chunk: np.ndarray) -> np.ndarray:
        ext = np.concatenate([self.cache, chunk], axis=1)
        with ad.no_grad():  # streams are inference-only; keeps the order-stable kernel
            y = causal_conv_forward(Tensor(ext), self.layer).data
        s = chunk.shape[1]
        pad = self.layer.left_context
        if pad:
            self.cache = ext[:, ext.shape[1] - pad:].copy()
        return y[:, y.shape[1] - s:]


def _ordered_masked_attention(logits: np.ndarray, keep: np.ndarray, values: np.ndarray,
                              order_offset: int = 0):
    """Masked softmax + value mixing with a fixed global accumulation order.

    Rows are accumulated one at a time so the floating-point result is
    independent of how many masked (exactly zero) rows surround the band;
    that is what makes chunked and full-sequence evaluation bit-identical.
    ``order_offset`` is unused arithmetically; it documents that row i here
    corresponds to global position order_offset + i.
    """
    filled = np.where(keep, logits, MASK_FILL)
    col_max = filled.max(axis=0, keepdims=True)
    expd = np.where(keep, np.exp(filled - col_max), 0.0)
    denom = np.zeros(expd.shape[1])
    for i in range(expd.shape[0]):
        denom = denom + expd[i]
    attn = expd / denom[None, :]
    out = np.zeros((values.shape[0], attn.shape[1]))
    for i in range(attn.shape[0]):
        out = out + values[:, i:i + 1] * attn[i:i + 1, :]
    return out, attn


def banded_self_attention(x: np.ndarray, lookback: int) -> np.ndarray:
    """Full-sequence self-attention where position n sees only n-J..n.

    Reference implementation for the streaming form; queries, keys and
    values are all ``x`` with 1/sqrt(C) scaling.
    """
    x = np.asarray(x, dtype=np.float64)
    c, t = x.shape
    logits = ad._stable_matmul(x.T, x) / math.sqrt(c)  # (keys, queries)
    keys = np.arange(t)[:, None]
    queries = np.arange(t)[None, :]
    keep = (keys <= queries) & (keys >= queries - lookback)
    out, _ = _ordered_masked_attention(logits, keep, x)
    return out


class BandedAttentionStream:
    """Chunked banded self-attention over one layer's input history.

    Keeps the last ``lookback`` input frames. Cache slots before the start
    of the stream hold zeros but are masked out, so the first chunks match
    the full-sequence computation exactly.
    """

    def __init__(self, channels: int, lookback: int):
        if lookback < 1:
            raise ValueError("lookback must be >= 1")
        self.lookback = lookback
        self.cache = np.zeros((channels, lookback))
        self.position = 0  # global index of the next incoming frame

    def push(self, chunk: np.ndarray) -> np.ndarray:
        c, s = chunk.shape
        j = self.lookback
        ext = np.concatenate([self.cache, chunk], axis=1)
        logits = ad._stable_matmul(ext.T, chunk) / math.sqrt(c)  # (keys = j+s, queries = s)
        key_pos = self.position - j + np.arange(j + s)[:, None]
        query_pos = self.position + np.arange(s)[None, :]
        keep = (key_pos >= 0) & (key_pos <= query_pos) & (key_pos >= query_pos - j)
        out, _ = _ordered_masked_attention(logits, keep, ext)
        self.position += s
        self.cache = ext[:, ext.shape[1] - j:].copy()
        return out


@dataclass
class WindowTiming:
    index: int
    ms_feature: float
    ms_mapping: float

    @property
    def ms_total(self) -> float:
        return self.ms_feature + self.ms_mapping


class StreamState:
    """Per-stream caches and counters for the student cascade.

    Confined to one thread; pushes are order-dependent. Independent states
    over the same model may run in parallel.
    """

    def __init__(self, model: StudentModel, cfg: StreamConfig):
        cfg.validate()
        if not isinstance(model, StudentModel):
            raise TypeError("streaming drives the non-autoregressive student")
        self.model = model
        self.cfg = cfg
        self.encoder_streams = [ConvStream(l) for l in model.source.encoder.layers]
        self.predictor_streams = [ConvStream(l) for l in model.predictor.convs.layers]
        self.postdecoder_streams = [ConvStream(l) for l in model.decoder.postdecoder.layers]
        # the convolutional cascade has no self-attention layers; the list
        # exists for architectures that add them (see BandedAttentionStream)
        self.attention_streams: list[BandedAttentionStream] = []
        self.frames_consumed = 0
        self.frames_emitted = 0
        self.window_timings: list[WindowTiming] = []

    def _run_convs(self, streams, h: Tensor) -> Tensor:
        # mirrors ConvStack.forward including its residual skips
        data = h.data
        for cs in streams:
            out = cs.push(data)
            layer = cs.layer
            data = out + data if layer.in_channels == layer.out_channels else out
        return Tensor(data)

    def push(self, chunk: np.ndarray, k: int, k_tgt: int,
             noise: np.ndarray | None = None) -> np.ndarray:
        """Convert one window of at most ``cfg.window`` stacked frames.

        A short final chunk is zero-padded to the window length internally
        and the output cropped back, so exactly as many frames come out as
        went in.
        """
        model = self.model
        s = self.cfg.window
        chunk = np.asarray(chunk, dtype=np.float64)
        if chunk.ndim != 2 or chunk.shape[0] != model.cfg.feature_dim:
            raise ad.ShapeError(
                f"chunk must be ({model.cfg.feature_dim}, <= {s}), got {chunk.shape}"
            )
        true_s = chunk.shape[1]
        if true_s > s:
            raise ad.ShapeError(f"chunk of {true_s} frames exceeds window {s}")
        if true_s == 0:
            return chunk.copy()
        if true_s < s:
            chunk = np.concatenate([chunk, np.zeros((chunk.shape[0], s - true_s))], axis=1)

        t_start = time.perf_counter()
        with ad.no_grad():
            out = self._mapped_window(Tensor(chunk), k, k_tgt, noise)
        ms = (time.perf_counter() - t_start) * 1e3
        if not np.all(np.isfinite(out)):
            raise ad.NonFiniteError(
                f"non-finite activation in stream window starting at frame {self.frames_consumed}"
            )
        self.frames_consumed += true_s
        self.frames_emitted += true_s
        if self.cfg.timing:
            self.window_timings.append(
                WindowTiming(index=len(self.window_timings), ms_feature=0.0, ms_mapping=ms)
            )
        return out[:, :true_s]

    def _mapped_window(self, chunk: Tensor, k: int, k_tgt: int,
                       noise: np.ndarray | None) -> np.ndarray:
        model = self.model
        s = self.cfg.window
        half = model.cfg.context_dim // 2

        h = embed_and_concat(chunk, k, model.source.prenet_embed)
        h = linear_forward(h, model.source.prenet)
        h = embed_and_concat(h, k, model.source.encoder_embed)
        z = self._run_convs(self.encoder_streams, h)
        values = ad.narrow(z, 0, half, half)

        if self.cfg.identity:
            context = values
        else:
            if noise is None:
                noise = np.zeros((model.cfg.noise_dim, s))
            p = embed_and_concat(z, k, model.predictor.src_embed)
            p = embed_and_concat(p, k_tgt, model.predictor.tgt_embed)
            if model.cfg.noise_dim:
                p = ad.concat([p, Tensor(noise)], axis=0)
            p = linear_forward(p, model.predictor.input_proj)
            p = self._run_convs(self.predictor_streams, p)
            raw = linear_forward(p, model.predictor.output_proj)
            params = rescale_to_window(constrain_params(raw).with_centers(), s)
            alphas = normalize_attention(evaluate_attention(params, s))
            context = apply_attention(values, alphas)

        d = embed_and_concat(context, k_tgt, model.decoder.embed)
        d = self._run_convs(self.postdecoder_streams, d)
        y = linear_forward(d, model.decoder.postnet)
        return y.data


def stream_init(model: StudentModel, cfg: StreamConfig) -> StreamState:
    """Fresh stream: zeroed caches, zeroed counters."""
    return StreamState(model, cfg)


def push_chunk(state: StreamState, chunk, k: int, k_tgt: int,
               noise: np.ndarray | None = None) -> np.ndarray:
    return state.push(chunk, k, k_tgt, noise)


def run_stream(model: StudentModel, cfg: StreamConfig, features: np.ndarray,
               k: int, k_tgt: int, noise_rng: np.random.Generator | None = None,
               reduction: int | None = None, hop_ms: float = 8.0):
    """Feed a whole feature sequence through a stream, window by window.

    Returns (converted features, per-window timings, summary). The summary
    reports the real-time factor of the mapping stage: total processing
    time divided by the audio duration the frames represent
    (frames * reduction * hop). The first window is included in the mean;
    cold caches are real latency. A steady-state mean excluding it is
    reported alongside.
    """
    features = np.asarray(features, dtype=np.float64)
    state = stream_init(model, cfg)
    state.cfg.timing = True
    reduction = model.cfg.reduction if reduction is None else reduction
    outputs = []
    t = features.shape[1]
    s = cfg.window
    for start in range(0, t, s):
        t_feat = time.perf_counter()
        chunk = features[:, start:start + s]
        noise = None
        if noise_rng is not None and not cfg.identity:
            noise = noise_rng.standard_normal((model.cfg.noise_dim, s))
        ms_feature = (time.perf_counter() - t_feat) * 1e3
        out = state.push(chunk, k, k_tgt, noise)
        state.window_timings[-1].ms_feature = ms_feature
        outputs.append(out)
    converted = np.concatenate(outputs, axis=1) if outputs else features.copy()
    rows = state.window_timings
    total_ms = sum(r.ms_total for r in rows)
    audio_ms = t * reduction * hop_ms
    mapping = np.array([r.ms_mapping for r in rows]) if rows else np.zeros(0)
    summary = {
        "windows": len(rows),
        "total_ms": total_ms,
        "audio_ms": audio_ms,
        "rtf": total_ms / audio_ms if audio_ms > 0 else float("nan"),
        "mean_window_ms": float(mapping.mean()) if rows else 0.0,
        "var_window_ms": float(mapping.var()) if rows else 0.0,
        "steady_mean_window_ms": float(mapping[1:].mean()) if len(rows) > 1 else float("nan"),
    }
    return converted, rows, summary


def write_timing_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("window_index,ms_feature,ms_mapping,ms_total\n")
        for r in rows:
            fh.write(f"{r.index},{r.ms_feature:.6f},{r.ms_mapping:.6f},{r.ms_total:.6f}\n")
