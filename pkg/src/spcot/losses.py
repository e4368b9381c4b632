"""Supervised, self-paced co-training and self-consistency losses.

Conventions: natural logarithms throughout; probability maps are
``[C,H,W]`` or ``[N,C,H,W]`` tensors with the class axis at -3, while the
plain-numpy helpers (``kl_divergence``, ``entropy``) take the class axis as an
argument and default to the last axis.  Every probability is clamped to
``PROB_FLOOR`` before a log.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import PROB_FLOOR, ShapeError, Tensor

DEFAULT_EPSILON = 0.01


@dataclass(frozen=True)
class WeightMap:
    """Self-paced weights, shape [K, N, H, W] (or [K, ...pixels])."""

    w: np.ndarray
    epsilon_floor: float


@dataclass(frozen=True)
class MixtureStats:
    pi: np.ndarray  # [K, ...pixels], sums to 1 over K
    rho: np.ndarray  # [...pixels], sum of weights over views


def _clamped(p):
    return np.clip(p, PROB_FLOOR, 1.0)


def _as_data(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


# ---------------------------------------------------------------------------
# plain divergences (no tape)
# ---------------------------------------------------------------------------


def kl_divergence(p, q, axis=-1):
    """KL(p || q) along ``axis``; returns a float for 1-D input."""
    p, q = _as_data(p), _as_data(q)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {q.shape}")
    # 0 * log 0 is taken as 0
    terms = np.where(p > 0.0, p * (np.log(_clamped(p)) - np.log(_clamped(q))), 0.0)
    out = terms.sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def entropy(p, axis=-1):
    """Shannon entropy -sum p ln p along ``axis``."""
    p = _as_data(p)
    out = -np.where(p > 0.0, p * np.log(_clamped(p)), 0.0).sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def self_paced_weight(kl_value, gamma, epsilon_floor=DEFAULT_EPSILON):
    """Closed-form optimal weight max(1 - kl/gamma, eps) of the quadratic regularizer."""
    if not gamma > 0:
        raise ValueError(f"learning pace gamma must be > 0, got {gamma}")
    w = np.maximum(1.0 - np.asarray(kl_value, dtype=np.float64) / gamma, epsilon_floor)
    return float(w) if w.ndim == 0 else w


# ---------------------------------------------------------------------------
# differentiable pieces
# ---------------------------------------------------------------------------


def _entropy_t(p, axis):
    """Per-pixel entropy of a Tensor, reducing ``axis``."""
    return T.neg(T.sum_(p * T.log(T.clamp(p, PROB_FLOOR, None)), axis=axis))


def _expand(a, axis, shape):
    return Tensor(np.broadcast_to(np.expand_dims(a, axis), shape))


def _jsd_alpha_t(probs, pi, alpha, axis):
    """Tape-aware H(sum pi_k p_k) - (1-alpha) sum pi_k H(p_k), per pixel."""
    shape = probs[0].shape
    mix = None
    mean_h = None
    for p, pk in zip(probs, pi):
        term = _expand(pk, axis, shape) * p
        mix = term if mix is None else mix + term
        hk = Tensor(pk) * _entropy_t(p, axis)
        mean_h = hk if mean_h is None else mean_h + hk
    return _entropy_t(mix, axis) - (1.0 - alpha) * mean_h


def _check_pi(pi, k):
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape[0] != k:
        raise ValueError(f"need {k} mixture weights, got {pi.shape[0]}")
    if np.any(pi <= 0) or np.any(pi > 1) or not np.allclose(pi.sum(axis=0), 1.0, atol=1e-12, rtol=0):
        raise ValueError("mixture weights must be in (0,1] and sum to 1")
    return pi


def generalized_jsd_alpha(probs, pi, alpha=0.0, axis=-1):
    """Entropy-regularized generalized JSD of K distributions.

    ``probs`` are K arrays/Tensors with classes on ``axis``; ``pi`` has shape
    [K] or [K, ...pixels] and is treated as a constant.  Returns a Tensor of
    per-pixel values (0-d for plain vectors), differentiable w.r.t. ``probs``.
    """
    if len(probs) < 2:
        raise ValueError("generalized JSD needs K >= 2 distributions")
    probs = [T.as_tensor(p) for p in probs]
    for p in probs[1:]:
        if p.shape != probs[0].shape:
            raise ShapeError(f"shape mismatch: {probs[0].shape} vs {p.shape}")
    pi = _check_pi(pi, len(probs))
    return _jsd_alpha_t(probs, list(pi), float(alpha), axis)


def supervised_ce(p, y):
    """Pixel-averaged cross-entropy between a probability map and a one-hot mask.

    Batched input averages over images as well.
    """
    p = T.as_tensor(p)
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-3) == 1)):
        raise ValueError("ground truth must be one-hot along the class axis")
    n_pix = p.data.size // p.shape[-3]
    logp = T.log(T.clamp(p, PROB_FLOOR, None))
    return T.neg(T.sum_(Tensor(y) * logp)) * (1.0 / n_pix)


def mixture_weights(probs, gamma, epsilon_floor=DEFAULT_EPSILON, axis=-3):
    """Self-paced weights and mixture stats from detached view predictions.

    One fixed-point step from the uniform mixture: w_k from KL(p_k || mean_k p_k).
    """
    data = np.stack([_as_data(p) for p in probs])
    m = data.mean(axis=0)
    ax = axis if axis >= 0 else axis + data.ndim  # class axis within the stack
    kl = kl_divergence(data, np.broadcast_to(m, data.shape), axis=ax)
    w = self_paced_weight(kl, gamma, epsilon_floor)
    rho = w.sum(axis=0)
    pi = w / rho
    return WeightMap(w=w, epsilon_floor=epsilon_floor), MixtureStats(pi=pi, rho=rho)


def spc_loss(probs, gamma, alpha=0.0, epsilon_floor=DEFAULT_EPSILON):
    """Self-paced co-training loss with entropy regularization.

    ``probs`` holds K view predictions of identical shape [N,C,H,W] (or
    [C,H,W]).  Weights, pi and rho are computed on detached values; the result
    is the mean over images and pixels of rho * JSD^alpha_pi.

    Returns (loss, WeightMap, MixtureStats).
    """
    if len(probs) < 2:
        raise ValueError(f"spc_loss needs K >= 2 views, got {len(probs)}")
    probs = [T.as_tensor(p) for p in probs]
    for p in probs[1:]:
        if p.shape != probs[0].shape:
            raise ShapeError(f"shape mismatch: {probs[0].shape} vs {p.shape}")
    wmap, stats = mixture_weights(probs, gamma, epsilon_floor)
    jsd = _jsd_alpha_t(probs, list(stats.pi), float(alpha), axis=-3)
    return T.mean(Tensor(stats.rho) * jsd), wmap, stats


def consistency_loss(teacher_pred, student_pred, tau=None):
    """Mean squared difference between tau(teacher) and the student prediction.

    The teacher side is detached; ``tau`` is any callable on arrays (None for
    identity).
    """
    t = _as_data(teacher_pred)
    if tau is not None:
        t = tau(t)
    s = T.as_tensor(student_pred)
    if t.shape != s.shape:
        raise ShapeError(f"shape mismatch after transform: {t.shape} vs {s.shape}")
    return T.mean(T.square(s - Tensor(t)))


def total_loss(sup, spc, reg, lambda1, lambda2):
    """sup + lambda1 * spc + lambda2 * reg (Tensors or floats)."""
    out = sup + lambda1 * spc + lambda2 * reg
    val = out.data if isinstance(out, Tensor) else out
    if T._debug and not np.all(np.isfinite(val)):
        raise T.NumericalError("non-finite total loss")
    return out
