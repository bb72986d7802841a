"""Numerical kernels: temperature softmax, KL, ListMLE, Adam, gradient checks.

Everything here works on float64 numpy arrays. Permutations are 1-based
sequences of candidate indices, best candidate first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError


def _as_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidArgumentError("scores must be a non-empty 1-d vector")
    if not np.all(np.isfinite(s)):
        raise InvalidArgumentError("scores must be finite")
    return s


def check_permutation(pi: Sequence[int], k: int) -> np.ndarray:
    """Validate a 1-based permutation of length ``k``; return it 0-based."""
    idx = np.asarray(pi, dtype=np.int64)
    if idx.ndim != 1 or idx.size != k:
        raise InvalidArgumentError(f"permutation length {idx.size} != {k}")
    idx = idx - 1
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= k or np.unique(idx).size != k:
        raise InvalidArgumentError(f"not a permutation of 1..{k}: {list(pi)}")
    return idx


def logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def softmax_temp(scores, theta: float = 1.0) -> np.ndarray:
    """Softmax of ``scores / theta`` with max-subtraction."""
    if not theta > 0:
        raise InvalidArgumentError(f"theta must be positive, got {theta}")
    z = _as_scores(scores) / theta
    e = np.exp(z - z.max())
    return e / e.sum()


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with 0 * ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidArgumentError(f"shape mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise InvalidArgumentError("q has zero mass where p is positive")
    ps, qs = p[support], q[support]
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


def _suffix_logsumexp(ordered: np.ndarray) -> np.ndarray:
    # out[j] = log sum_{m >= j} exp(ordered[m])
    rev = np.logaddexp.accumulate(ordered[::-1])
    return rev[::-1]


def listmle_loss(scores, pi: Sequence[int]) -> float:
    """Plackett-Luce negative log-likelihood of observing order ``pi``."""
    s = _as_scores(scores)
    order = check_permutation(pi, s.size)
    ordered = s[order]
    return float(np.sum(_suffix_logsumexp(ordered) - ordered))


def listmle_grad(scores, pi: Sequence[int]) -> np.ndarray:
    """Gradient of :func:`listmle_loss` with respect to ``scores``.

    The item at position ``t`` of the order appears in suffixes 0..t; its
    gradient is the sum of its suffix-softmax probabilities minus one (for
    the suffix it heads).
    """
    s = _as_scores(scores)
    order = check_permutation(pi, s.size)
    ordered = s[order]
    lse = _suffix_logsumexp(ordered)
    # probs[j, t] = exp(ordered[t] - lse[j]) for t >= j
    probs = np.exp(ordered[None, :] - lse[:, None])
    probs = np.triu(probs)
    g_ordered = probs.sum(axis=0) - 1.0
    grad = np.empty_like(s)
    grad[order] = g_ordered
    return grad


def kl_grad_wrt_q_scores(p, q_scores, theta: float = 1.0) -> np.ndarray:
    """d KL(p || softmax(q_scores / theta)) / d q_scores, with p held fixed."""
    p = np.asarray(p, dtype=np.float64)
    q = softmax_temp(q_scores, theta)
    if p.shape != q.shape:
        raise InvalidArgumentError(f"shape mismatch: {p.shape} vs {q.shape}")
    return (q - p) / theta


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64),
                   np.zeros_like(params, dtype=np.float64), 0, **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float | None = None, beta2: float | None = None,
              eps: float | None = None, inplace: bool = False):
    """One bias-corrected Adam update.

    Returns ``(params, state)``. With ``inplace=True`` both the parameter
    array and the moment buffers are updated in place, which is what the
    training loops use to avoid copying the embedding table every step.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise InvalidArgumentError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not lr >= 0:
        raise InvalidArgumentError(f"lr must be non-negative, got {lr}")
    b1 = state.beta1 if beta1 is None else beta1
    b2 = state.beta2 if beta2 is None else beta2
    e = state.eps if eps is None else eps

    if not inplace:
        params = params.copy()
        state = AdamState(state.m.copy(), state.v.copy(), state.step, b1, b2, e)
    state.step += 1
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * np.square(grads)
    m_hat_scale = 1.0 / (1.0 - b1 ** state.step)
    v_hat_scale = 1.0 / (1.0 - b2 ** state.step)
    params -= lr * (m * m_hat_scale) / (np.sqrt(v * v_hat_scale) + e)
    return params, state


def numeric_gradient(loss_fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(x)
        flat[i] = orig - h
        down = loss_fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def finite_diff_check(loss_fn: Callable[[np.ndarray], float],
                      grad_fn: Callable[[np.ndarray], np.ndarray],
                      point, h: float = 1e-5) -> float:
    """Max componentwise relative error between ``grad_fn`` and central differences.

    The denominator is ``max(1e-8, |analytic|)``; a broken gradient shows up
    as a large number rather than an exception.
    """
    analytic = np.asarray(grad_fn(np.array(point, dtype=np.float64)), dtype=np.float64)
    numeric = numeric_gradient(loss_fn, point, h)
    denom = np.maximum(1e-8, np.abs(analytic))
    return float(np.max(np.abs(numeric - analytic) / denom))
