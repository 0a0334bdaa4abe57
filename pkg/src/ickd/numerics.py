"""Small dense kernels that every loss is assembled from.

All functions accept plain ``numpy`` arrays. Probability-valued functions
operate along the last axis, so a ``(B, K)`` batch is handled row by row
with the same arithmetic as a single ``(K,)`` vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateVectorError, InvalidArgumentError, NumericInstabilityError

LOG_CLAMP = 1e-12
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_parameter_index: int
    analytic: float
    numeric: float


def _as_finite(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def softmax_with_temperature(z, tau: float = 1.0) -> np.ndarray:
    """exp(z/tau) normalised along the last axis, with max subtraction."""
    if not (tau > 0) or not np.isfinite(tau):
        raise InvalidArgumentError(f"temperature must be positive and finite, got {tau!r}")
    z = _as_finite(z, "logits")
    scaled = z / tau
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_with_temperature(z, tau: float = 1.0) -> np.ndarray:
    if not (tau > 0):
        raise InvalidArgumentError(f"temperature must be positive, got {tau!r}")
    z = _as_finite(z, "logits")
    scaled = z / tau
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    return scaled - np.log(np.exp(scaled).sum(axis=-1, keepdims=True))


def _check_pair(target, pred):
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise InvalidArgumentError(f"length mismatch: {target.shape} vs {pred.shape}")
    return target, pred


def cross_entropy(target, pred):
    """-sum_k target_k log(max(pred_k, 1e-12)); a float for 1-D input."""
    target, pred = _check_pair(target, pred)
    out = -(target * np.log(np.maximum(pred, LOG_CLAMP))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p):
    return cross_entropy(p, p)


def kl_divergence(target, pred):
    """KL(target || pred) written as H(target, pred) - H(target)."""
    target, pred = _check_pair(target, pred)
    return cross_entropy(target, pred) - cross_entropy(target, target)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InvalidArgumentError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        raise DegenerateVectorError("cosine similarity of a near-zero vector is undefined")
    c = float(u @ v) / (nu * nv)
    return min(1.0, max(-1.0, c))


def cosine_similarity_grad(u, v) -> tuple[float, np.ndarray]:
    """cos(u, v) and its gradient with respect to ``u``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < NORM_FLOOR or nv < NORM_FLOOR:
        raise DegenerateVectorError("cosine similarity of a near-zero vector is undefined")
    c = float(u @ v) / (nu * nv)
    return c, v / (nu * nv) - c * u / (nu * nu)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Pull a gradient w.r.t. p = softmax(z/tau) back to z (last axis)."""
    inner = (p * grad_p).sum(axis=-1, keepdims=True)
    return p * (grad_p - inner) / tau


def one_hot(y: int, k: int) -> np.ndarray:
    if not 0 <= int(y) < k:
        raise InvalidArgumentError(f"class index {y} outside [0, {k})")
    out = np.zeros(k)
    out[int(y)] = 1.0
    return out


def is_prob_vector(p, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return (
        p.ndim >= 1
        and p.shape[-1] >= 2
        and bool(np.all(p >= 0.0))
        and bool(np.all(p <= 1.0 + atol))
        and bool(np.all(np.abs(p.sum(axis=-1) - 1.0) <= atol))
    )


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    epsilon: float = 1e-4,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient with central differences.

    ``loss_fn(params)`` must return ``(value, gradient)``. The error per
    coordinate is ``|g_a - g_n| / max(1, |g_a|, |g_n|)``.
    """
    theta = np.array(params, dtype=np.float64)
    _, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(theta.shape)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        probe = theta.copy()
        probe.flat[i] += epsilon
        up = float(loss_fn(probe)[0])
        probe.flat[i] = theta.flat[i] - epsilon
        down = float(loss_fn(probe)[0])
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericInstabilityError(f"non-finite loss while probing coordinate {i}", coordinate=i)
        numeric.flat[i] = (up - down) / (2.0 * epsilon)
    if theta.size == 0:
        return GradCheckReport(0.0, -1, 0.0, 0.0)
    a = analytic.ravel()
    n = numeric.ravel()
    rel = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel[worst]), worst, float(a[worst]), float(n[worst]))
