"""Peak-first regularization and the joint CTC + PFR objective.

The regularizer is a frame-wise KL divergence that uses frame ``t+1`` as the
teacher for frame ``t``::

    pfr = sum_{t=0}^{T-2} KL(q[t+1] || q[t]),   q = softmax(logits / tau)

The CTC term always uses the unit-temperature softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pfctc.ctc import (
    ctc_grad_wrt_probs,
    ctc_neg_log_likelihood,
    ctc_loss_and_grad,
    forward_backward,
    occupancy,
)
from pfctc.errors import UsageError
from pfctc.numerics import tempered_softmax_rows

DEFAULT_TAU = 10.0
PROB_FLOOR = 1e-30

# weight grids from the streaming / non-streaming comparisons
NON_STREAMING_LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9)
STREAMING_LAMBDAS = (0.5, 1.0, 2.0, 3.0, 5.0)


@dataclass(frozen=True)
class PfrConfig:
    """Regularizer weight, temperature and teacher handling."""

    lam: float = 0.0
    tau: float = DEFAULT_TAU
    detach_teacher: bool = True

    def __post_init__(self):
        if not self.lam >= 0:
            raise UsageError(f"lambda must be non-negative, got {self.lam}")
        if not self.tau > 0:
            raise UsageError(f"tau must be positive, got {self.tau}")


def _log_q(logits: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    q = tempered_softmax_rows(logits, tau)
    return q, np.log(np.maximum(q, PROB_FLOOR))


def pfr_loss(logits: np.ndarray, config: PfrConfig) -> float:
    """Sum over frames of ``KL(q[t+1] || q[t])`` on tempered distributions."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2:
        return 0.0
    q, logq = _log_q(logits, config.tau)
    return float((q[1:] * (logq[1:] - logq[:-1])).sum())


def pfr_grad_wrt_probs(probs: np.ndarray, config: PfrConfig) -> np.ndarray:
    """Student-side gradient in probability space, unweighted by lambda.

    Row ``t`` is ``-q[t+1] / q[t]``; the last row is zero. Only valid with a
    detached teacher.
    """
    if not config.detach_teacher:
        raise UsageError("closed-form probability gradient requires detach_teacher=True; "
                         "use pfr_grad_wrt_logits")
    probs = np.asarray(probs, dtype=np.float64)
    grad = np.zeros_like(probs)
    grad[:-1] = -probs[1:] / np.maximum(probs[:-1], PROB_FLOOR)
    return grad


def pfr_grad_wrt_logits(logits: np.ndarray, config: PfrConfig) -> np.ndarray:
    """Gradient of :func:`pfr_loss` w.r.t. the raw logits, unweighted by lambda.

    With a detached teacher this reduces to ``(q[t] - q[t+1]) / tau`` for
    every frame but the last. Without detachment each frame also receives
    the teacher-side term of the pair it teaches.
    """
    logits = np.asarray(logits, dtype=np.float64)
    T = logits.shape[0]
    grad = np.zeros_like(logits)
    if T < 2:
        return grad
    q, logq = _log_q(logits, config.tau)
    grad[:-1] = q[:-1] - q[1:]
    if not config.detach_teacher:
        # d KL(q[t] || q[t-1]) / d logits[t], t >= 1
        g = logq[1:] - logq[:-1]
        kl = (q[1:] * g).sum(axis=1, keepdims=True)
        grad[1:] += q[1:] * (g - kl)
    return grad / config.tau


def joint_loss(logits: np.ndarray, labels: Sequence[int],
               config: PfrConfig) -> tuple[float, float, float]:
    """Return ``(total, ctc, pfr)`` with ``total = ctc + lam * pfr``."""
    logits = np.asarray(logits, dtype=np.float64)
    probs = tempered_softmax_rows(logits, 1.0)
    ctc = ctc_neg_log_likelihood(probs, labels)
    reg = pfr_loss(logits, config)
    return ctc + config.lam * reg, ctc, reg


def joint_loss_and_grad(logits: np.ndarray, labels: Sequence[int], config: PfrConfig):
    """Joint loss components and the logit gradient in one pass.

    Returns ``(total, ctc, pfr, dlogits)``. When ``lam == 0`` the
    regularizer is evaluated for logging but contributes nothing to the
    gradient, so the result is bit-identical to the pure CTC gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    ctc, grad, _ = ctc_loss_and_grad(logits, labels)
    reg = pfr_loss(logits, config)
    if config.lam != 0:
        grad = grad + config.lam * pfr_grad_wrt_logits(logits, config)
    return ctc + config.lam * reg, ctc, reg, grad


def joint_grad_wrt_logits(logits: np.ndarray, labels: Sequence[int],
                          config: PfrConfig) -> np.ndarray:
    """``d joint_loss / d logits`` (see :func:`joint_loss_and_grad`)."""
    return joint_loss_and_grad(logits, labels, config)[3]


def joint_grad_wrt_probs(logits: np.ndarray, labels: Sequence[int],
                         config: PfrConfig) -> np.ndarray:
    """Probability-space joint gradient ``-(G + lam * p[t+1]) / p[t]``.

    Only defined when both terms share the same distribution, i.e. ``tau == 1``,
    and the teacher is detached.
    """
    if config.tau != 1.0 or not config.detach_teacher:
        raise UsageError("probability-space joint gradient needs tau=1 and a detached teacher")
    probs = tempered_softmax_rows(np.asarray(logits, dtype=np.float64), 1.0)
    ext, alpha, beta, nll = forward_backward(probs, labels)
    occ = occupancy(alpha, beta, ext, nll, probs.shape[1])
    grad = ctc_grad_wrt_probs(occ, probs)
    if config.lam != 0:
        grad = grad + config.lam * pfr_grad_wrt_probs(probs, config)
    return grad


__all__ = [
    "DEFAULT_TAU",
    "NON_STREAMING_LAMBDAS",
    "STREAMING_LAMBDAS",
    "PfrConfig",
    "joint_grad_wrt_logits",
    "joint_grad_wrt_probs",
    "joint_loss",
    "joint_loss_and_grad",
    "pfr_grad_wrt_logits",
    "pfr_grad_wrt_probs",
    "pfr_loss",
]
