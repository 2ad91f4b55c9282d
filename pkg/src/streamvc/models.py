"""Teacher and student feature-conversion networks.

The teacher is an encoder/decoder convolutional net whose decoder attends
over the encoded source with scaled dot-product attention; generation is
autoregressive. The student reuses the teacher's source prenet, encoder,
postdecoder and postnet verbatim (frozen) and replaces the target-side
recursion with an attention predictor that emits Gaussian alignment
parameters directly from the source, so conversion runs in one parallel
pass.

All sequences are (channels, time) with float64 values; class indices are
1-based.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, config_hash
from .gaussian_attention import (
    GaussianAttentionParams,
    apply_attention,
    constrain_params,
    evaluate_attention,
    normalize_attention,
)
from .layers import (
    CausalConvGLULayer,
    ClassEmbeddingTable,
    LinearLayer,
    causal_conv_forward,
    embed_and_concat,
    linear_forward,
    scaled_dot_attention,
)

__all__ = ["TeacherModel", "StudentModel", "AttentionPredictor", "build_student_from_teacher"]


class ConvStack:
    """A chain of dilated causal GLU convolutions.

    Layers whose input and output widths match get a residual skip; deep
    GLU stacks otherwise attenuate both activations and gradients to
    nothing, especially on short sequences where the wide dilations mostly
    read zero padding. With all-zero weights the stack still maps zero to
    zero.
    """

    def __init__(self, in_channels: int, hidden: int, cfg: ModelConfig,
                 rng: np.random.Generator):
        self.layers = []
        ch = in_channels
        for dil in cfg.dilations:
            self.layers.append(
                CausalConvGLULayer(ch, hidden, cfg.kernel_size, dil, rng,
                                   weight_norm=cfg.weight_norm)
            )
            ch = hidden

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = causal_conv_forward(x, layer,
                                    residual=layer.in_channels == layer.out_channels)
        return x

    def parameters(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{prefix}.{i}.{n}", p) for n, p in layer.parameters())
        return out


def _as_feature_tensor(x, feature_dim: int) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 2 or t.data.shape[0] != feature_dim:
        raise ad.ShapeError(
            f"expected ({feature_dim}, T) feature sequence, got {t.data.shape}"
        )
    return t


class _SourceEncoder:
    """Source prenet plus encoder stack, conditioned on the source class."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.feature_dim
        e = cfg.embed_dim
        self.prenet_embed = ClassEmbeddingTable(cfg.n_classes, e, rng)
        self.prenet = LinearLayer(d + e, cfg.context_dim, rng, cfg.weight_norm)
        self.encoder_embed = ClassEmbeddingTable(cfg.n_classes, e, rng)
        self.encoder = ConvStack(cfg.context_dim + e, cfg.context_dim, cfg, rng)

    def forward(self, xs: Tensor, k: int) -> Tensor:
        h = embed_and_concat(xs, k, self.prenet_embed)
        h = linear_forward(h, self.prenet)
        h = embed_and_concat(h, k, self.encoder_embed)
        return self.encoder.forward(h)

    def parameters(self):
        out = [("source_prenet_embed.table", self.prenet_embed.table)]
        out.extend((f"source_prenet.{n}", p) for n, p in self.prenet.parameters())
        out.append(("encoder_embed.table", self.encoder_embed.table))
        out.extend(self.encoder.parameters("encoder"))
        return out


class _ContextDecoder:
    """Postdecoder plus postnet: warped context in, features out.

    Receives only the attention output and the target class, never the
    predecoder output, so the student can drive it without recursion.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        half = cfg.context_dim // 2
        e = cfg.embed_dim
        self.embed = ClassEmbeddingTable(cfg.n_classes, e, rng)
        self.postdecoder = ConvStack(half + e, cfg.context_dim, cfg, rng)
        self.postnet = LinearLayer(cfg.context_dim, cfg.feature_dim, rng, cfg.weight_norm)

    def forward(self, context: Tensor, k_tgt: int) -> Tensor:
        h = embed_and_concat(context, k_tgt, self.embed)
        h = self.postdecoder.forward(h)
        return linear_forward(h, self.postnet)

    def parameters(self):
        out = [("postdecoder_embed.table", self.embed.table)]
        out.extend(self.postdecoder.parameters("postdecoder"))
        out.extend((f"postnet.{n}", p) for n, p in self.postnet.parameters())
        return out


class TeacherModel:
    """Autoregressive conversion network used to supervise the student."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        d = cfg.feature_dim
        e = cfg.embed_dim
        half = cfg.context_dim // 2
        self.source = _SourceEncoder(cfg, rng)
        self.target_prenet_embed = ClassEmbeddingTable(cfg.n_classes, e, rng)
        self.target_prenet = LinearLayer(d + e, cfg.context_dim, rng, cfg.weight_norm)
        self.predecoder_embed = ClassEmbeddingTable(cfg.n_classes, e, rng)
        self.predecoder = ConvStack(cfg.context_dim + e, cfg.context_dim, cfg, rng)
        self.query_proj = LinearLayer(cfg.context_dim, half, rng, cfg.weight_norm)
        self.decoder = _ContextDecoder(cfg, rng)

    # ------------------------------------------------------------------
    def encode_source(self, xs, k: int) -> Tensor:
        """Context vectors for the source utterance; causal in time."""
        xs = _as_feature_tensor(xs, self.cfg.feature_dim)
        return self.source.forward(xs, k)

    def _split_context(self, z: Tensor):
        half = self.cfg.context_dim // 2
        keys = ad.narrow(z, 0, 0, half)
        values = ad.narrow(z, 0, half, half)
        return keys, values

    def decode(self, z: Tensor, xt_in, k_tgt: int):
        """Run the target-side stack on decoder inputs (SOS + past frames)."""
        xt_in = _as_feature_tensor(xt_in, self.cfg.feature_dim)
        h = embed_and_concat(xt_in, k_tgt, self.target_prenet_embed)
        h = linear_forward(h, self.target_prenet)
        h = embed_and_concat(h, k_tgt, self.predecoder_embed)
        h = self.predecoder.forward(h)
        queries = linear_forward(h, self.query_proj)
        keys, values = self._split_context(z)
        context, attn = scaled_dot_attention(queries, keys, values)
        y = self.decoder.forward(context, k_tgt)
        return y, attn

    def forward_forced(self, xs, k: int, xt_with_sos, k_tgt: int):
        """Teacher-forced pass.

        ``xt_with_sos`` is (D, M+1) whose first column is the all-zero
        start frame. Returns the (D, M) prediction of the true target
        frames and the (N, M) attention matrix.
        """
        xt = _as_feature_tensor(xt_with_sos, self.cfg.feature_dim)
        if xt.data.shape[1] < 2:
            raise ad.ShapeError("forced pass needs the start frame plus >= 1 target frame")
        if np.any(xt.data[:, 0] != 0.0):
            raise ValueError("target sequence must start with the all-zero start frame")
        z = self.encode_source(xs, k)
        m = xt.data.shape[1] - 1
        return self.decode(z, ad.narrow(xt, 1, 0, m), k_tgt)

    def infer_ar(self, xs, k: int, k_tgt: int, max_len: int | None = None) -> np.ndarray:
        """Generate frame by frame, feeding each output back as input.

        Runs to ``max_len`` (default 2N); downstream evaluation crops to
        the reference length. Deliberately recomputes the decoder stack on
        the growing prefix each step: this is the latency profile the
        student exists to remove.
        """
        xs = _as_feature_tensor(xs, self.cfg.feature_dim)
        n = xs.data.shape[1]
        if n == 0:
            raise ad.ShapeError("cannot convert an empty sequence")
        if max_len is None:
            max_len = int(math.ceil(2 * n))
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        d = self.cfg.feature_dim
        with ad.no_grad():
            z = self.encode_source(xs, k)
            generated = np.zeros((d, 0))
            for _ in range(max_len):
                xt_in = np.concatenate([np.zeros((d, 1)), generated], axis=1)
                y, _ = self.decode(z, xt_in, k_tgt)
                generated = np.concatenate([generated, y.data[:, -1:]], axis=1)
        return generated

    def named_parameters(self):
        out = list(self.source.parameters())
        out.append(("target_prenet_embed.table", self.target_prenet_embed.table))
        out.extend((f"target_prenet.{n}", p) for n, p in self.target_prenet.parameters())
        out.append(("predecoder_embed.table", self.predecoder_embed.table))
        out.extend(self.predecoder.parameters("predecoder"))
        out.extend((f"query_proj.{n}", p) for n, p in self.query_proj.parameters())
        out.extend(self.decoder.parameters())
        return out


class AttentionPredictor:
    """Maps source context (+ class pair + noise) to Gaussian parameters.

    Fully convolutional and causal: an input projection, the usual stack of
    dilated causal GLU convolutions, and an output head producing the raw
    (3H, N) parameter array that the constraint layer turns into valid
    increments, widths and amplitudes.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.context_dim
        e = cfg.embed_dim
        self.cfg = cfg
        self.src_embed = ClassEmbeddingTable(cfg.n_classes, e, rng)
        self.tgt_embed = ClassEmbeddingTable(cfg.n_classes, e, rng)
        self.input_proj = LinearLayer(d + 2 * e + cfg.noise_dim, d, rng, cfg.weight_norm)
        self.convs = ConvStack(d, d, cfg, rng)
        self.output_proj = LinearLayer(d, 3 * cfg.n_heads, rng, cfg.weight_norm)

    def raw_forward(self, z: Tensor, k: int, k_tgt: int, noise: np.ndarray) -> Tensor:
        n = z.data.shape[1]
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != (self.cfg.noise_dim, n):
            raise ad.ShapeError(
                f"noise must be ({self.cfg.noise_dim}, {n}), got {noise.shape}"
            )
        h = embed_and_concat(z, k, self.src_embed)
        h = embed_and_concat(h, k_tgt, self.tgt_embed)
        if self.cfg.noise_dim:
            h = ad.concat([h, Tensor(noise)], axis=0)
        h = linear_forward(h, self.input_proj)
        h = self.convs.forward(h)
        return linear_forward(h, self.output_proj)

    def forward(self, z: Tensor, k: int, k_tgt: int, noise: np.ndarray) -> GaussianAttentionParams:
        raw = self.raw_forward(z, k, k_tgt, noise)
        return constrain_params(raw).with_centers()

    def named_parameters(self):
        out = [("predictor_src_embed.table", self.src_embed.table),
               ("predictor_tgt_embed.table", self.tgt_embed.table)]
        out.extend((f"predictor_input.{n}", p) for n, p in self.input_proj.parameters())
        out.extend(self.convs.parameters("predictor_convs"))
        out.extend((f"predictor_output.{n}", p) for n, p in self.output_proj.parameters())
        return out


class StudentModel:
    """Non-autoregressive converter distilled from a teacher.

    The source encoder, postdecoder and postnet are frozen copies of the
    teacher; the attention predictor is the only trainable part.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        if cfg.n_heads != 1:
            raise ValueError("the convolutional student uses a single attention head")
        self.cfg = cfg
        self.source = _SourceEncoder(cfg, rng)
        self.decoder = _ContextDecoder(cfg, rng)
        self.predictor = AttentionPredictor(cfg, rng)

    def encode_source(self, xs, k: int) -> Tensor:
        xs = _as_feature_tensor(xs, self.cfg.feature_dim)
        return self.source.forward(xs, k)

    def zero_noise(self, n: int) -> np.ndarray:
        return np.zeros((self.cfg.noise_dim, n))

    def forward(self, xs, k: int, k_tgt: int, m_len="auto", noise: np.ndarray | None = None,
                identity: bool = False):
        """One parallel conversion pass.

        ``m_len`` may be an int or "auto", in which case the output length
        is the rounded-up endpoint of the predicted alignment. ``noise``
        defaults to zeros (deterministic inference); training samples it.
        In identity mode the predictor is skipped and the context passes
        through unwarped, frame for frame.

        Returns (features, attention heads, gaussian params); params is
        None in identity mode.
        """
        xs = _as_feature_tensor(xs, self.cfg.feature_dim)
        n = xs.data.shape[1]
        z = self.encode_source(xs, k)
        half = self.cfg.context_dim // 2
        values = ad.narrow(z, 0, half, half)
        if identity:
            alphas = [Tensor(np.eye(n))]
            y = self.decoder.forward(values, k_tgt)
            return y, alphas, None
        if noise is None:
            noise = self.zero_noise(n)
        params = self.predictor.forward(z, k, k_tgt, noise)
        if m_len == "auto":
            m_len = max(1, int(math.ceil(params.mus.data[:, -1].mean())))
        alphas = normalize_attention(evaluate_attention(params, int(m_len)))
        context = apply_attention(values, alphas)
        y = self.decoder.forward(context, k_tgt)
        return y, alphas, params

    def named_parameters(self):
        out = self.source.parameters()
        out.extend(self.decoder.parameters())
        out.extend(self.predictor.named_parameters())
        return out

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def frozen_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not p.requires_grad]


def _freeze(params) -> None:
    for _, p in params:
        p.requires_grad = False
        p.grad = None


def build_student_from_teacher(teacher: TeacherModel, cfg: ModelConfig,
                               rng: np.random.Generator) -> StudentModel:
    """Copy the teacher's shared subnets into a fresh student and freeze them.

    The predictor is initialized from ``rng``; the copies are by value, so
    later teacher updates cannot leak in. Configs must match exactly.
    """
    if config_hash(teacher.cfg) != config_hash(cfg):
        raise ValueError("teacher checkpoint and student config do not match")
    student = StudentModel(cfg, rng)
    src_t = dict(teacher.source.parameters())
    src_s = student.source.parameters()
    dec_t = dict(teacher.decoder.parameters())
    dec_s = student.decoder.parameters()
    for name, p in src_s:
        p.data[...] = src_t[name].data
    for name, p in dec_s:
        p.data[...] = dec_t[name].data
    _freeze(src_s)
    _freeze(dec_s)
    return student
