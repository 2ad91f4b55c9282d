"""Streaming non-autoregressive voice feature conversion.

A teacher-student pipeline: an autoregressive encoder/decoder teacher is
distilled into a parallel student whose alignment is predicted as
monotonic Gaussian attention, plus a sliding-window runtime whose chunked
computation reproduces full-sequence results bit-exactly.
"""

from .autodiff import Tensor, backward, grad_check, no_grad
from .config import (
    LossWeights,
    MelConfig,
    ModelConfig,
    OptimConfig,
    RunConfig,
    StreamConfig,
    TrainConfig,
    config_hash,
    seed_streams,
)
from .container import (
    load_checkpoint,
    load_corpus,
    load_features,
    save_checkpoint,
    save_corpus,
    save_features,
)
from .corpus import ParallelCorpus, Utterance, split_corpus, synth_corpus_generate
from .estimator import FeatureConverter, check_feature_sequence
from .gaussian_attention import (
    GaussianAttentionParams,
    attention_moments,
    centers_from_deltas,
    constrain_params,
    evaluate_attention,
    normalize_attention,
    rescale_to_window,
)
from .melspec import load_wav, mel_extract, stack_frames, unstack_frames
from .metrics import mcd_dtw
from .models import StudentModel, TeacherModel, build_student_from_teacher
from .streaming import run_stream, stream_init
from .training import train_student, train_teacher

__version__ = "0.1.0"
