"""Classification and distillation losses.

All losses take batched inputs (``[N, classes]`` logits or distributions and
integer labels in ``0..classes-1``) and average over the batch.  Log-domain
terms are computed from logits with ``log_softmax`` where possible; the
distribution-level helpers clamp probabilities at :data:`EPS` before logs.
"""
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, clamp_min, log, log_softmax, mean, reshape, row_norm, softmax, tensor, tsum

EPS = 1e-12
SCHEMES = ("scratch", "dk", "at", "od")


@dataclass(frozen=True)
class LossConfig:
    scheme: str = "od"
    temperature: float = 4.0
    at_weight: float = 1.0
    branches: int = 4
    stop_gradient: bool = True  # treat the teacher's soft targets as constants in the OD KL term

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.branches < 1:
            raise ValueError(f"branches must be >= 1, got {self.branches}")
        if self.at_weight < 0:
            raise ValueError(f"at_weight must be >= 0, got {self.at_weight}")


def _check_finite(a):
    if not np.all(np.isfinite(a.data)):
        raise FloatingPointError("non-finite logits")


def _labels(y, n, classes):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes - 1}]")
    return y.astype(np.intp)


def _pick(t, y):
    """Sum of ``t[i, y[i]]`` over the batch as a differentiable scalar."""
    mask = np.zeros(t.shape, dtype=t.dtype)
    mask[np.arange(len(y)), y] = 1.0
    return tsum(t * mask)


def softened_softmax(a, temperature=1.0):
    """Softmax of ``a / temperature`` along the last axis."""
    a = tensor(a)
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    _check_finite(a)
    return softmax(a * (1.0 / temperature))


def ce_onehot(y, p):
    """Mean of ``-log p[y]`` for a batch of distributions ``p``."""
    p = tensor(p)
    y = _labels(y, p.shape[0], p.shape[1])
    return _pick(log(clamp_min(p, EPS)), y) * (-1.0 / len(y))


def ce_logits(y, a):
    """Cross-entropy of labels against ``softmax(a)``, computed stably from logits."""
    a = tensor(a)
    _check_finite(a)
    y = _labels(y, a.shape[0], a.shape[1])
    return _pick(log_softmax(a), y) * (-1.0 / len(y))


def _same_shape(p, q):
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")


def ce_dist(p, q):
    """Mean over the batch of ``-sum p log q``."""
    p, q = tensor(p), tensor(q)
    _same_shape(p, q)
    return tsum(p * log(clamp_min(q, EPS))) * (-1.0 / p.shape[0])


def kl_div(p, q):
    """Mean over the batch of ``sum p log(p / q)`` (non-negative)."""
    p, q = tensor(p), tensor(q)
    _same_shape(p, q)
    return tsum(p * (log(clamp_min(p, EPS)) - log(clamp_min(q, EPS)))) * (1.0 / p.shape[0])


def _soft_kl(p_t, a_s, temperature):
    """KL(p_t || softmax(a_s / T)) with the student side in the log domain."""
    log_q = log_softmax(tensor(a_s) * (1.0 / temperature))
    _same_shape(p_t, log_q)
    return tsum(p_t * (log(clamp_min(p_t, EPS)) - log_q)) * (1.0 / log_q.shape[0])


def dk_loss(y, a_s, a_t, temperature):
    """Hard-label CE plus ``T**2`` times the CE against a frozen teacher's softened targets."""
    a_s = tensor(a_s)
    a_t = tensor(a_t)
    _same_shape(a_s, a_t)
    p_t = Tensor(softened_softmax(a_t.detach(), temperature).data)
    log_q = log_softmax(a_s * (1.0 / temperature))
    soft = tsum(p_t * log_q) * (-1.0 / a_s.shape[0])
    return ce_logits(y, a_s) + soft * temperature**2


def attention_map(z, eps=EPS):
    """Channel-mean of squared activations, flattened and l2-normalised per sample."""
    z = tensor(z)
    if z.ndim != 4:
        raise ValueError(f"attention_map expects NCHW, got shape {z.shape}")
    n, _, h, w = z.shape
    f = reshape(mean(z * z, axis=1), (n, h * w))
    norms = reshape(row_norm(f, eps), (n, 1))
    return f / norms


def at_loss(y, a_s, student_maps, teacher_maps, beta=1.0, pairs=None):
    """CE plus ``beta`` times the summed l2 distance between paired attention maps.

    ``pairs`` lists ``(teacher_index, student_index)``; by default the i-th maps
    are paired.  Teacher maps are treated as constants.
    """
    if pairs is None:
        if len(student_maps) != len(teacher_maps):
            raise ValueError(f"{len(student_maps)} student maps vs {len(teacher_maps)} teacher maps; pass pairs")
        pairs = [(i, i) for i in range(len(student_maps))]
    loss = ce_logits(y, a_s)
    for ti, si in pairs:
        zt, zs = teacher_maps[ti], student_maps[si]
        if zt.shape[0] != zs.shape[0] or zt.shape[2:] != zs.shape[2:]:
            raise ValueError(f"attention pair ({ti}, {si}) has mismatched shapes {zt.shape} vs {zs.shape}")
        qt = Tensor(attention_map(tensor(zt).detach()).data)
        qs = attention_map(zs)
        loss = loss + mean(row_norm(qt - qs)) * beta
    return loss


def teacher_logits(features, head):
    """Online teacher logits from the branches' final feature maps."""
    return head(features)


def od_kl_term(student_logits, a_t, temperature, stop_gradient=True):
    """``T**2`` times the summed KL from the teacher's softened distribution to each student's."""
    a_t = tensor(a_t)
    if stop_gradient:
        p_t = Tensor(softened_softmax(a_t.detach(), temperature).data)
    else:
        p_t = softened_softmax(a_t, temperature)
    total = None
    for a_s in student_logits:
        term = _soft_kl(p_t, a_s, temperature)
        total = term if total is None else total + term
    return total * temperature**2


def od_loss(y, student_logits, a_t, temperature, stop_gradient=True):
    """Online-distillation objective over m student branches and their shared teacher."""
    student_logits = list(student_logits)
    if not student_logits:
        raise ValueError("od_loss needs at least one student")
    loss = ce_logits(y, a_t)
    for a_s in student_logits:
        loss = loss + ce_logits(y, a_s)
    return loss + od_kl_term(student_logits, a_t, temperature, stop_gradient)
