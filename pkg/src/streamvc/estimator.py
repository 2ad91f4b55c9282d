"""scikit-learn style front door.

``FeatureConverter`` wraps the whole pipeline behind fit/transform so the
converter drops into sklearn tooling (clone, get_params, pipelines over
lists of sequences): fit trains the teacher and distills the student on a
parallel corpus; transform converts feature sequences between the
configured classes in one parallel pass per sequence.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .config import (
    LossWeights,
    ModelConfig,
    OptimConfig,
    RunConfig,
    StreamConfig,
    TrainConfig,
)
from .corpus import ParallelCorpus, Utterance
from .streaming import run_stream
from .training import train_student, train_teacher

__all__ = ["FeatureConverter", "check_feature_sequence"]


def check_feature_sequence(x, feature_dim: int | None = None) -> np.ndarray:
    """Validate one (channels, time) sequence: 2-D, finite, float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError(f"expected a (channels, time) sequence, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("sequence contains NaN or Inf")
    if feature_dim is not None and x.shape[0] != feature_dim:
        raise ValueError(f"sequence has {x.shape[0]} channels, converter was fit with {feature_dim}")
    return x


def _as_corpus(X) -> ParallelCorpus:
    if isinstance(X, ParallelCorpus):
        return X
    pairs = []
    n_classes = 0
    for item in X:
        if len(item) == 2 and isinstance(item[0], Utterance):
            src, tgt = item
        else:
            k, src_f, k_tgt, tgt_f = item
            uid = f"fit_{len(pairs):05d}"
            src = Utterance(cls=int(k), features=check_feature_sequence(src_f), uid=uid)
            tgt = Utterance(cls=int(k_tgt), features=check_feature_sequence(tgt_f), uid=uid)
        pairs.append((src, tgt))
        n_classes = max(n_classes, src.cls, tgt.cls)
    if not pairs:
        raise ValueError("fit needs at least one parallel pair")
    return ParallelCorpus(pairs=pairs, n_classes=n_classes)


class FeatureConverter(TransformerMixin, BaseEstimator):
    """Teacher-student feature converter with an estimator interface.

    Parameters mirror the run configuration; ``source_class`` and
    ``target_class`` fix the conversion direction applied by transform.
    """

    def __init__(self, source_class=1, target_class=2, context_dim=16, embed_dim=4,
                 noise_dim=4, teacher_iters=300, student_iters=600,
                 learning_rate=1e-3, batch_size=8, lambda1=1.0, lambda2=2000.0,
                 lambda3=2000.0, nu=0.3, rho=0.3, cache_teacher_attention=True,
                 window=4, lookback=32, seed=0):
        self.source_class = source_class
        self.target_class = target_class
        self.context_dim = context_dim
        self.embed_dim = embed_dim
        self.noise_dim = noise_dim
        self.teacher_iters = teacher_iters
        self.student_iters = student_iters
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.nu = nu
        self.rho = rho
        self.cache_teacher_attention = cache_teacher_attention
        self.window = window
        self.lookback = lookback
        self.seed = seed

    def _run_config(self, feature_dim: int, n_classes: int) -> RunConfig:
        model = ModelConfig(mel_bands=feature_dim, reduction=1,
                            context_dim=self.context_dim, n_classes=n_classes,
                            embed_dim=self.embed_dim, noise_dim=self.noise_dim,
                            lookback=self.lookback)
        cfg = RunConfig(
            seed=self.seed,
            model=model,
            loss=LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                             lambda3=self.lambda3, nu=self.nu, rho=self.rho),
            optim=OptimConfig(lr=self.learning_rate),
            train=TrainConfig(batch_size=self.batch_size,
                              teacher_iters=self.teacher_iters,
                              student_iters=self.student_iters,
                              cache_teacher_attention=self.cache_teacher_attention),
            stream=StreamConfig(window=self.window, lookback=self.lookback),
        )
        cfg.validate()
        return cfg

    def fit(self, X, y=None):
        """Train on parallel pairs.

        ``X`` is a ParallelCorpus, an iterable of (Utterance, Utterance)
        pairs, or an iterable of (src_class, src_features, tgt_class,
        tgt_features) tuples. ``y`` is ignored.
        """
        corpus = _as_corpus(X)
        feature_dim = corpus.pairs[0][0].features.shape[0]
        for src, tgt in corpus.pairs:
            check_feature_sequence(src.features, feature_dim)
            check_feature_sequence(tgt.features, feature_dim)
        cfg = self._run_config(feature_dim, max(2, corpus.n_classes))
        self.run_config_ = cfg
        self.feature_dim_ = feature_dim
        self.teacher_, self.teacher_curve_ = train_teacher(corpus, cfg)
        self.student_, self.student_curve_ = train_student(self.teacher_, corpus, cfg)
        return self

    def _check_fitted(self):
        if not hasattr(self, "student_"):
            raise RuntimeError("this FeatureConverter instance is not fitted yet")

    def transform(self, X):
        """Convert sequences from source_class to target_class.

        Accepts one (channels, time) array or a list of them and returns
        the converted sequence(s), lengths chosen by the predicted
        alignment.
        """
        self._check_fitted()
        single = isinstance(X, np.ndarray) and np.asarray(X).ndim == 2
        seqs = [X] if single else list(X)
        out = []
        for x in seqs:
            x = check_feature_sequence(x, self.feature_dim_)
            with ad.no_grad():
                y, _, _ = self.student_.forward(x, self.source_class,
                                                self.target_class, m_len="auto")
            out.append(y.data)
        return out[0] if single else out

    def stream_transform(self, x):
        """Convert one sequence through the sliding-window runtime."""
        self._check_fitted()
        x = check_feature_sequence(x, self.feature_dim_)
        converted, _, _ = run_stream(self.student_, self.run_config_.stream, x,
                                     self.source_class, self.target_class)
        return converted
