"""Supervised, consistency and distillation losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .numerics import GradTensor

# floor applied before every log so results stay finite and reproducible
LOG_FLOOR = 1e-12

ProbLike = Union[GradTensor, np.ndarray]


@dataclass(frozen=True)
class ConsistencyConfig:
    alpha: float
    temperature: float = 0.4
    num_views: int = 2
    detach_teacher: bool = True
    # False: KL(view || teacher); True: KL(teacher || view)
    swap_kl: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("consistency.alpha must be >= 0")
        if not 0.0 < self.temperature <= 1.0:
            raise ConfigError("consistency.temperature must be in (0, 1]")
        if self.num_views < 2:
            raise ConfigError("consistency.num_views must be >= 2")


@dataclass(frozen=True)
class TsaSchedule:
    """Confidence-masking threshold rising linearly from 1/c to 1."""

    num_classes: int
    total_steps: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("TSA needs at least two classes")
        if self.total_steps < 1:
            raise ConfigError("TSA needs total_steps >= 1")

    def threshold(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ConfigError(f"step {step} outside [0, {self.total_steps}]")
        c = self.num_classes
        if step == self.total_steps:
            return 1.0
        return 1.0 / c + (1.0 - 1.0 / c) * step / self.total_steps


def _tensor(x: ProbLike) -> GradTensor:
    return x if isinstance(x, GradTensor) else GradTensor(x)


def sharpen(z: ProbLike, temperature: float) -> ProbLike:
    """Raise each row to ``1/temperature`` and renormalize to the simplex.

    Returns the same kind of object it was given; a ``GradTensor`` input
    stays differentiable.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    zt = _tensor(z)
    if temperature == 1.0:
        out = zt
    else:
        powered = nx.power(zt, 1.0 / temperature)
        out = nx.div(powered, nx.sum_rows(powered))
    return out if isinstance(z, GradTensor) else out.values


def kl_rows(p: ProbLike, q: ProbLike) -> GradTensor:
    """Per-row ``sum_k p_k (ln p_k - ln q_k)`` as an ``m x 1`` tensor, in nats."""
    p, q = _tensor(p), _tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_rows shapes differ: {p.shape} vs {q.shape}")
    log_ratio = nx.sub(nx.log(nx.clip_min(p, LOG_FLOOR)), nx.log(nx.clip_min(q, LOG_FLOOR)))
    return nx.sum_rows(nx.mul(p, log_ratio))


def consistency_loss(view_probs: Sequence[GradTensor], cfg: ConsistencyConfig) -> GradTensor:
    """Mean over views and rows of KL(view || sharpen(mean of views)).

    With ``cfg.detach_teacher`` the sharpened mean is a constant target.
    """
    n = len(view_probs)
    if n < 2:
        raise ConfigError("consistency_loss needs at least two views")
    if n != cfg.num_views:
        raise ConfigError(f"got {n} views, config asks for {cfg.num_views}")
    shape = view_probs[0].shape
    if any(v.shape != shape for v in view_probs):
        raise ShapeError("all views must have the same shape")

    total = view_probs[0]
    for v in view_probs[1:]:
        total = nx.add(total, v)
    mean = nx.scale(total, 1.0 / n)
    teacher = sharpen(nx.detach(mean) if cfg.detach_teacher else mean, cfg.temperature)

    loss = None
    for v in view_probs:
        kl = kl_rows(teacher, v) if cfg.swap_kl else kl_rows(v, teacher)
        term = nx.sum_all(kl)
        loss = term if loss is None else nx.add(loss, term)
    return nx.scale(loss, 1.0 / (n * shape[0]))


def tsa_masked_cross_entropy(
    logits: GradTensor, labels, schedule: TsaSchedule, step: int
) -> GradTensor:
    """Softmax cross-entropy averaged over rows that are not yet confident.

    A row is masked when its true-class probability exceeds the schedule's
    threshold at ``step``.  If every row is masked the loss is zero.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    m, c = logits.shape
    if labels.shape[0] != m:
        raise ShapeError(f"{labels.shape[0]} labels for {m} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError("label out of range")
    eta = schedule.threshold(step)
    onehot = np.zeros((m, c))
    onehot[np.arange(m), labels] = 1.0
    logp = nx.log_softmax_rows(logits)
    ce = nx.scale(nx.sum_rows(nx.mul(logp, onehot)), -1.0)
    p_true = np.exp(logp.values[np.arange(m), labels])
    active = (p_true <= eta).astype(np.float64)[:, None]
    return nx.scale(nx.sum_all(nx.mul(ce, active)), 1.0 / max(active.sum(), 1.0))


def combine_losses(sup: GradTensor, con: Optional[GradTensor], alpha: float) -> GradTensor:
    if con is None or alpha == 0.0:
        return sup
    return nx.add(sup, nx.scale(con, alpha))


def combined_batch_loss(
    sup_logits: GradTensor,
    sup_labels,
    view_probs_for_unlabeled: Optional[Sequence[GradTensor]],
    cfg: Optional[ConsistencyConfig],
    schedule: TsaSchedule,
    step: int,
) -> GradTensor:
    """Masked supervised loss plus ``alpha`` times the consistency loss."""
    sup = tsa_masked_cross_entropy(sup_logits, sup_labels, schedule, step)
    if cfg is None or cfg.alpha == 0.0 or not view_probs_for_unlabeled:
        return sup
    return combine_losses(sup, consistency_loss(view_probs_for_unlabeled, cfg), cfg.alpha)


def distillation_loss(student_probs: ProbLike, teacher_probs: ProbLike, temperature: float = 1.0) -> float:
    """Row-mean KL between tempered student and tempered teacher."""
    if temperature <= 0:
        raise ConfigError(f"distillation temperature must be > 0, got {temperature}")
    s = sharpen(GradTensor(np.asarray(getattr(student_probs, "values", student_probs))), temperature)
    t = sharpen(GradTensor(np.asarray(getattr(teacher_probs, "values", teacher_probs))), temperature)
    kl = kl_rows(s, t).values
    return float(kl.sum() / kl.shape[0])
