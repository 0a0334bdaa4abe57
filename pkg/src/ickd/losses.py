"""Distillation objectives with exact gradients w.r.t. the student logits.

Every function accepts a single sample (``(K,)`` logits, integer label) or
a batch (``(B, K)`` logits, label array). For a batch the returned value
and gradient are per-sample; :func:`batch_mean` reduces them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .numerics import (
    NORM_FLOOR,
    cross_entropy,
    kl_divergence,
    softmax_backward,
    softmax_with_temperature,
)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    tau_kd: float = 4.0
    tau1: float = 4.0
    gamma_picd: float = 2.0
    gamma_nicd: float = 10.0
    use_a_weights: bool = True
    use_b_weights: bool = True
    # multiply temperature-softened KL terms by tau**2 (Hinton-style gradient scale)
    scale_by_tau_sq: bool = True
    tau_nicd: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("tau_kd", "tau1", "tau_nicd"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.gamma_picd < 0 or self.gamma_nicd < 0:
            raise InvalidArgumentError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossValue:
    value: float | np.ndarray
    logit_gradient: np.ndarray
    components: dict = field(default_factory=dict)


def _labels(y, k, batch_shape):
    y = np.asarray(y, dtype=np.int64)
    if y.shape != batch_shape:
        raise InvalidArgumentError(f"label shape {y.shape} does not match batch shape {batch_shape}")
    if np.any(y < 0) or np.any(y >= k):
        raise InvalidArgumentError(f"class index outside [0, {k})")
    return np.eye(k)[y]


def _out(v):
    v = np.asarray(v)
    return float(v) if v.ndim == 0 else v


def _check_logits(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def smoothed_label(y, k: int, lsr_alpha: float) -> np.ndarray:
    """(1 - a) one_hot(y) + a / K."""
    y_arr = np.asarray(y)
    return (1.0 - lsr_alpha) * _labels(y_arr, k, y_arr.shape) + lsr_alpha / k


def lsr_loss(y, p, alpha: float) -> LossValue:
    """Label-smoothed cross-entropy of the prediction ``p = softmax(z)``.

    The gradient is taken w.r.t. ``z``, i.e. ``p - q``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError("alpha must lie in [0, 1]")
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    onehot = _labels(y, k, p.shape[:-1])
    u = np.full_like(p, 1.0 / k)
    value = (1.0 - alpha) * cross_entropy(onehot, p) + alpha * cross_entropy(u, p)
    q = (1.0 - alpha) * onehot + alpha * u
    return LossValue(_out(value), p - q)


def kd_loss(y, student_logits, teacher_logits, cfg: LossConfig) -> LossValue:
    """(1 - alpha) H(y, p_s) + alpha * tau^2 * KL(p_t(tau) || p_s(tau))."""
    zs, zt = _check_logits(student_logits, teacher_logits)
    k = zs.shape[-1]
    onehot = _labels(y, k, zs.shape[:-1])
    ps = softmax_with_temperature(zs, 1.0)
    ps_t = softmax_with_temperature(zs, cfg.tau_kd)
    pt_t = softmax_with_temperature(zt, cfg.tau_kd)
    scale = cfg.tau_kd ** 2 if cfg.scale_by_tau_sq else 1.0
    hard = cross_entropy(onehot, ps)
    soft = kl_divergence(pt_t, ps_t)
    value = (1.0 - cfg.alpha) * hard + cfg.alpha * scale * soft
    grad = (1.0 - cfg.alpha) * (ps - onehot) + (cfg.alpha * scale / cfg.tau_kd) * (ps_t - pt_t)
    return LossValue(_out(value), grad)


def effective_target(y, teacher_prob, alpha: float, lsr_alpha: float = 0.0) -> np.ndarray:
    """(1 - alpha) q + alpha p_t, where q is the smoothed label."""
    if not (0.0 <= alpha <= 1.0 and 0.0 <= lsr_alpha <= 1.0):
        raise InvalidArgumentError("alphas must lie in [0, 1]")
    pt = np.asarray(teacher_prob, dtype=np.float64)
    q = smoothed_label(y, pt.shape[-1], lsr_alpha)
    if q.shape != pt.shape:
        raise InvalidArgumentError("label batch does not match teacher_prob batch")
    return (1.0 - alpha) * q + alpha * pt


def picd_loss(aggregated, student_logits, tau1: float, scale_by_tau_sq: bool = True) -> LossValue:
    """tau1^2 * KL(aggregated || softmax(z / tau1))."""
    agg, zs = _check_logits(aggregated, student_logits)
    ps = softmax_with_temperature(zs, tau1)
    scale = tau1 ** 2 if scale_by_tau_sq else 1.0
    value = scale * kl_divergence(agg, ps)
    return LossValue(_out(value), (scale / tau1) * (ps - agg))


def _cos_and_grad(p, v):
    """cos(p, v) along the last axis and d cos / d p; ``v`` may carry an extra axis."""
    np_ = np.linalg.norm(p, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(np_ < NORM_FLOOR) or np.any(nv < NORM_FLOOR):
        raise InvalidArgumentError("probability vector with near-zero norm")
    if v.ndim == p.ndim + 1:
        dot = np.einsum("...k,...mk->...m", p, v)
        c = dot / (np_[..., None] * nv)
        g = v / (np_[..., None, None] * nv[..., None]) - c[..., None] * p[..., None, :] / (np_[..., None, None] ** 2)
    else:
        dot = (p * v).sum(axis=-1)
        c = dot / (np_ * nv)
        g = v / (np_ * nv)[..., None] - c[..., None] * p / (np_ ** 2)[..., None]
    return c, g


def nicd_loss(student_prob, teacher_prob, negative_probs, b_weights, tau: float = 1.0) -> LossValue:
    """1 - cos(p_s, p_t) + sum_j b_j cos(p_s, p_neg_j).

    ``student_prob`` must equal ``softmax(z / tau)``; the gradient is w.r.t. z.
    Zero-weight negatives (padding) contribute nothing.
    """
    ps, pt = _check_logits(student_prob, teacher_prob)
    negs = np.asarray(negative_probs, dtype=np.float64)
    b = np.asarray(b_weights, dtype=np.float64)
    if negs.ndim != ps.ndim + 1 or negs.shape[-1] != ps.shape[-1] or negs.shape[:-2] != ps.shape[:-1]:
        raise InvalidArgumentError(f"negatives shape {negs.shape} incompatible with prediction {ps.shape}")
    if b.shape != negs.shape[:-1]:
        raise InvalidArgumentError(f"{b.shape} weights for {negs.shape[:-1]} negatives")
    c_pos, g_pos = _cos_and_grad(ps, pt)
    # padded slots may hold placeholder vectors; weight 0 removes them
    c_neg, g_neg = _cos_and_grad(ps, negs)
    value = 1.0 - c_pos + (b * c_neg).sum(axis=-1)
    grad_p = -g_pos + (b[..., None] * g_neg).sum(axis=-2)
    return LossValue(_out(value), softmax_backward(ps, grad_p, tau))


def total_loss(y, student_logits, teacher_logits, aggregated, negatives, b_weights,
               cfg: LossConfig) -> LossValue:
    """L_ce + L_kd + gamma_picd * L_picd + gamma_nicd * L_nicd.

    ``aggregated=None`` or ``negatives=None`` skip the corresponding term
    entirely (it is reported as 0 and never evaluated).
    """
    zs, zt = _check_logits(student_logits, teacher_logits)
    k = zs.shape[-1]
    ps = softmax_with_temperature(zs, 1.0)
    onehot = _labels(y, k, zs.shape[:-1])
    ce = cross_entropy(onehot, ps)
    grad = ps - onehot
    kd = kd_loss(y, zs, zt, cfg)
    grad = grad + kd.logit_gradient
    value = ce + kd.value
    zero = np.zeros(zs.shape[:-1])
    picd_v, nicd_v = zero, zero
    if aggregated is not None:
        picd = picd_loss(aggregated, zs, cfg.tau1, cfg.scale_by_tau_sq)
        picd_v = np.asarray(picd.value)
        value = value + cfg.gamma_picd * picd_v
        grad = grad + cfg.gamma_picd * picd.logit_gradient
    if negatives is not None:
        ps_n = softmax_with_temperature(zs, cfg.tau_nicd)
        pt_n = softmax_with_temperature(zt, cfg.tau_nicd)
        nicd = nicd_loss(ps_n, pt_n, negatives, b_weights, cfg.tau_nicd)
        nicd_v = np.asarray(nicd.value)
        value = value + cfg.gamma_nicd * nicd_v
        grad = grad + cfg.gamma_nicd * nicd.logit_gradient
    comps = {"ce": _out(ce), "kd": _out(kd.value), "picd": _out(picd_v), "nicd": _out(nicd_v)}
    return LossValue(_out(value), grad, comps)


def batch_mean(loss: LossValue) -> LossValue:
    """Mean over the batch axis; gradients are divided by the batch size."""
    v = np.asarray(loss.value)
    b = v.size
    comps = {k: float(np.mean(c)) for k, c in loss.components.items()}
    return LossValue(float(v.mean()), loss.logit_gradient / b, comps)

