"""Distillation losses, Adam, and the teacher/student training loops.

The student objective combines a reconstruction term through the frozen
decoder, a moment-matching term tying predicted Gaussian centers/widths to
the teacher's attention histogram, and diagonal/orthogonality penalties on
the normalized attention. The teacher trains on reconstruction plus the
same attention penalties applied to its own attention matrix, which keeps
its alignment monotone enough to distill from.
"""

from __future__ import annotations

import csv

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossWeights, OptimConfig, RunConfig, seed_streams
from .gaussian_attention import GaussianAttentionParams, attention_moments
from .models import StudentModel, TeacherModel, build_student_from_teacher

__all__ = [
    "loss_l0",
    "loss_l1",
    "loss_l2",
    "loss_l3",
    "penalty_matrix",
    "with_sos",
    "teacher_pair_loss",
    "student_pair_loss",
    "batch_mean_loss",
    "Adam",
    "train_teacher",
    "train_student",
    "write_loss_curve",
]


def with_sos(features: np.ndarray) -> np.ndarray:
    """Prepend the all-zero start frame to a (D, M) target sequence."""
    features = np.asarray(features, dtype=np.float64)
    return np.concatenate([np.zeros((features.shape[0], 1)), features], axis=1)


def loss_l0(y: Tensor, xt_with_sos) -> Tensor:
    """Mean absolute error against the one-frame-shifted target.

    The sum of absolute entries is divided by the number of frames only,
    not by the feature dimension; the penalty weights are tuned against
    this convention.
    """
    target = np.asarray(xt_with_sos if not isinstance(xt_with_sos, Tensor) else xt_with_sos.data,
                        dtype=np.float64)
    m = y.data.shape[1]
    if m < 1:
        raise ad.ShapeError("loss_l0 needs at least one output frame")
    if target.shape != (y.data.shape[0], m + 1):
        raise ad.ShapeError(
            f"loss_l0: target with start frame must be {(y.data.shape[0], m + 1)}, "
            f"got {target.shape}"
        )
    diff = ad.sub(y, Tensor(target[:, 1:]))
    return ad.mul(ad.reduce_sum(ad.absolute(diff)), 1.0 / m)


def loss_l1(params: GaussianAttentionParams, teacher_attns) -> Tensor:
    """Absolute gap between predicted (mu, sigma) and teacher row moments."""
    params = params.with_centers()
    h = params.n_heads
    n = params.length
    if len(teacher_attns) != h:
        raise ad.ShapeError(f"loss_l1: {len(teacher_attns)} teacher heads, predictor has {h}")
    total = None
    for i, attn in enumerate(teacher_attns):
        attn = np.asarray(attn, dtype=np.float64)
        if attn.shape[0] != n:
            raise ad.ShapeError("loss_l1: teacher attention length mismatch")
        mu_hat, sigma_hat = attention_moments(attn)
        mu_i = ad.narrow(params.mus, 0, i, 1)
        sg_i = ad.narrow(params.sigmas, 0, i, 1)
        term = ad.add(
            ad.reduce_sum(ad.absolute(ad.sub(mu_i, Tensor(mu_hat[None, :])))),
            ad.reduce_sum(ad.absolute(ad.sub(sg_i, Tensor(sigma_hat[None, :])))),
        )
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / (h * n))


def penalty_matrix(n: int, m: int, width: float) -> np.ndarray:
    """Weight matrix that is zero on the relative diagonal and grows off it.

    Entry (i, j) is 1 - exp(-(i/n - j/m)^2 / (2 width^2)) with 1-based
    indices, symmetric under swapping the two normalized coordinates.
    """
    if width <= 0:
        raise ValueError("penalty width must be positive")
    rows = np.arange(1, n + 1, dtype=np.float64)[:, None] / n
    cols = np.arange(1, m + 1, dtype=np.float64)[None, :] / m
    return 1.0 - np.exp(-((rows - cols) ** 2) / (2.0 * width * width))


def loss_l2(alphas, nu: float) -> Tensor:
    """Diagonal attention penalty: mass away from the relative diagonal."""
    h = len(alphas)
    n, m = alphas[0].data.shape
    g = Tensor(penalty_matrix(n, m, nu))
    total = None
    for a in alphas:
        term = ad.reduce_sum(ad.absolute(ad.mul(a, g)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / (h * n * m))


def loss_l3(alphas, rho: float) -> Tensor:
    """Orthogonality penalty on the attention Gram matrix.

    Rows attending to the same target region make alpha @ alpha.T large
    off-diagonal exactly where the penalty matrix is nonzero.
    """
    h = len(alphas)
    n = alphas[0].data.shape[0]
    g = Tensor(penalty_matrix(n, n, rho))
    total = None
    for a in alphas:
        gram = ad.matmul(a, ad.transpose(a))
        term = ad.reduce_sum(ad.absolute(ad.mul(gram, g)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / (h * n * n))


# ---------------------------------------------------------------------------
# per-pair objectives


def teacher_pair_loss(teacher: TeacherModel, pair, weights: LossWeights):
    """Reconstruction plus attention-shape penalties on one utterance pair."""
    src, tgt = pair
    xt_sos = with_sos(tgt.features)
    y, attn = teacher.forward_forced(src.features, src.cls, xt_sos, tgt.cls)
    l0 = loss_l0(y, xt_sos)
    l2 = loss_l2([attn], weights.nu)
    l3 = loss_l3([attn], weights.rho)
    total = ad.add(l0, ad.add(ad.mul(l2, weights.lambda2), ad.mul(l3, weights.lambda3)))
    parts = {"l0": l0.item(), "l1": 0.0, "l2": l2.item(), "l3": l3.item()}
    return total, parts


def teacher_attention_target(teacher: TeacherModel, pair) -> np.ndarray:
    """Teacher attention for a pair, detached from any graph."""
    src, tgt = pair
    with ad.no_grad():
        _, attn = teacher.forward_forced(src.features, src.cls, with_sos(tgt.features), tgt.cls)
    return attn.data


def student_pair_loss(student: StudentModel, pair, weights: LossWeights,
                      teacher_attn: np.ndarray, noise: np.ndarray | None = None):
    """Full distillation objective for one pair.

    ``teacher_attn`` is the (N, M) matrix from a forced teacher pass on the
    same pair; ``noise`` is the predictor noise draw for this evaluation.
    """
    src, tgt = pair
    m = tgt.features.shape[1]
    y, alphas, params = student.forward(src.features, src.cls, tgt.cls, m_len=m, noise=noise)
    l0 = loss_l0(y, with_sos(tgt.features))
    l1 = loss_l1(params, [teacher_attn])
    l2 = loss_l2(alphas, weights.nu)
    l3 = loss_l3(alphas, weights.rho)
    total = ad.add(
        ad.add(l0, ad.mul(l1, weights.lambda1)),
        ad.add(ad.mul(l2, weights.lambda2), ad.mul(l3, weights.lambda3)),
    )
    parts = {"l0": l0.item(), "l1": l1.item(), "l2": l2.item(), "l3": l3.item()}
    return total, parts


def batch_mean_loss(pair_losses) -> Tensor:
    """Mean of per-pair scalar losses; order of the batch does not matter."""
    pair_losses = list(pair_losses)
    if not pair_losses:
        raise ValueError("empty batch")
    total = pair_losses[0]
    for term in pair_losses[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(pair_losses))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam over named parameters.

    The parameter names exist so a non-finite gradient aborts with a
    message saying which tensor blew up instead of a bare exception.
    """

    def __init__(self, named_params, cfg: OptimConfig | None = None):
        cfg = cfg or OptimConfig()
        self.named_params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = cfg.lr
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise ad.NonFiniteError(f"non-finite gradient for parameter '{name}'")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# training loops


def _sample_batch(rng: np.random.Generator, n_pairs: int, batch_size: int) -> np.ndarray:
    size = min(batch_size, n_pairs)
    return rng.choice(n_pairs, size=size, replace=False)


def train_teacher(corpus, run_cfg: RunConfig, iters: int | None = None,
                  streams: dict | None = None, log_every: int = 0):
    """Train a teacher from scratch on a parallel corpus.

    Returns the model and the loss curve as a list of
    (iteration, total, l0, l1, l2, l3) rows.
    """
    if not corpus.pairs:
        raise ValueError("corpus is empty")
    streams = streams or seed_streams(run_cfg.seed)
    model = TeacherModel(run_cfg.model, streams["init"])
    opt = Adam(model.named_parameters(), run_cfg.optim)
    iters = run_cfg.train.teacher_iters if iters is None else iters
    curve = []
    for it in range(iters):
        idx = _sample_batch(streams["shuffle"], len(corpus.pairs), run_cfg.train.batch_size)
        losses, parts_acc = [], {"l0": 0.0, "l1": 0.0, "l2": 0.0, "l3": 0.0}
        for i in idx:
            loss, parts = teacher_pair_loss(model, corpus.pairs[i], run_cfg.loss)
            losses.append(loss)
            for key in parts_acc:
                parts_acc[key] += parts[key] / len(idx)
        total = batch_mean_loss(losses)
        ad.backward(total)
        opt.step()
        opt.zero_grad()
        curve.append((it, total.item(), parts_acc["l0"], parts_acc["l1"],
                      parts_acc["l2"], parts_acc["l3"]))
        if log_every and (it % log_every == 0 or it == iters - 1):
            print(f"teacher iter {it}: total={total.item():.4f} l0={parts_acc['l0']:.4f}")
    return model, curve


def train_student(teacher: TeacherModel, corpus, run_cfg: RunConfig,
                  iters: int | None = None, streams: dict | None = None,
                  log_every: int = 0):
    """Distill a student against a trained teacher.

    Only the attention predictor receives updates; the copied subnets stay
    bit-identical to the teacher. Teacher attention targets are recomputed
    per batch pair by default, or memoized per pair id when
    ``cache_teacher_attention`` is set.
    """
    if not corpus.pairs:
        raise ValueError("corpus is empty")
    streams = streams or seed_streams(run_cfg.seed)
    student = build_student_from_teacher(teacher, run_cfg.model, streams["init"])
    opt = Adam(student.trainable_parameters(), run_cfg.optim)
    iters = run_cfg.train.student_iters if iters is None else iters
    attn_cache: dict = {}
    use_cache = run_cfg.train.cache_teacher_attention
    noise_dim = run_cfg.model.noise_dim
    curve = []
    for it in range(iters):
        idx = _sample_batch(streams["shuffle"], len(corpus.pairs), run_cfg.train.batch_size)
        losses, parts_acc = [], {"l0": 0.0, "l1": 0.0, "l2": 0.0, "l3": 0.0}
        for i in idx:
            pair = corpus.pairs[i]
            key = pair[0].uid
            if use_cache and key in attn_cache:
                attn = attn_cache[key]
            else:
                attn = teacher_attention_target(teacher, pair)
                if use_cache:
                    attn_cache[key] = attn
            noise = streams["noise"].standard_normal((noise_dim, pair[0].features.shape[1]))
            loss, parts = student_pair_loss(student, pair, run_cfg.loss, attn, noise)
            losses.append(loss)
            for k in parts_acc:
                parts_acc[k] += parts[k] / len(idx)
        total = batch_mean_loss(losses)
        ad.backward(total)
        opt.step()
        opt.zero_grad()
        curve.append((it, total.item(), parts_acc["l0"], parts_acc["l1"],
                      parts_acc["l2"], parts_acc["l3"]))
        if log_every and (it % log_every == 0 or it == iters - 1):
            print(f"student iter {it}: total={total.item():.4f} l1={parts_acc['l1']:.4f}")
    return student, curve


def grad_check_student_loss(run_cfg: RunConfig, n_src: int = 5, m_tgt: int = 4,
                            step: float = 1e-4) -> float:
    """Finite-difference check of the full student objective.

    Builds a fresh teacher/student from the configured seed, draws one toy
    utterance pair and one frozen noise sample, and compares analytic
    gradients of the total loss against central differences over every
    trainable parameter. Returns the worst relative error.
    """
    streams = seed_streams(run_cfg.seed)
    teacher = TeacherModel(run_cfg.model, streams["init"])
    student = build_student_from_teacher(teacher, run_cfg.model, streams["init"])
    data_rng = streams["corpus"]
    d = run_cfg.model.feature_dim
    from .corpus import Utterance

    src = Utterance(cls=1, features=data_rng.uniform(-1, 1, (d, n_src)), uid="gc")
    tgt = Utterance(cls=min(2, run_cfg.model.n_classes),
                    features=data_rng.uniform(-1, 1, (d, m_tgt)), uid="gc")
    pair = (src, tgt)
    attn = teacher_attention_target(teacher, pair)
    noise = streams["noise"].standard_normal((run_cfg.model.noise_dim, n_src))

    def objective():
        loss, _ = student_pair_loss(student, pair, run_cfg.loss, attn, noise)
        return loss

    params = [p for _, p in student.trainable_parameters()]
    return ad.grad_check(objective, params, step=step)


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "l0", "l1", "l2", "l3"])
        for row in curve:
            writer.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])
