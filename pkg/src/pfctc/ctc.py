"""CTC negative log-likelihood via log-domain forward-backward.

Conventions: blank id is 0, indices are 0-based, ``probs`` is a ``(T, V)``
array of per-frame output probabilities. ``alpha[t, s]`` includes the
emission at frame ``t``; ``beta[t, s]`` covers frames ``t+1 .. T-1`` only,
so ``alpha[t] + beta[t]`` is the log mass of all paths through ``(t, s)``.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from pfctc.errors import InfeasibleError, UsageError
from pfctc.numerics import tempered_softmax_rows

BLANK = 0
NEG_INF = -math.inf

# brute-force enumeration limits
MAX_BRUTE_T = 8
MAX_BRUTE_V = 5


def extend_labels(labels: Sequence[int]) -> np.ndarray:
    """Interleave blanks: ``[a, b] -> [0, a, 0, b, 0]``."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if (labels == BLANK).any():
        raise UsageError("label sequence contains the blank id")
    if (labels < 0).any():
        raise UsageError("label ids must be non-negative")
    ext = np.zeros(2 * labels.size + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels: Sequence[int]) -> int:
    """Fewest frames that admit an alignment: one per label plus one per repeat."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    repeats = int((labels[1:] == labels[:-1]).sum()) if labels.size > 1 else 0
    return int(labels.size) + repeats


def _skip_mask(ext: np.ndarray) -> np.ndarray:
    # True where the s-2 -> s transition exists
    mask = np.zeros(ext.size, dtype=bool)
    if ext.size > 2:
        mask[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return mask


def _check(probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise UsageError(f"probs must be 2-D (T, V), got shape {probs.shape}")
    T, V = probs.shape
    if T < 1:
        raise UsageError("lattice has no frames")
    if ext.size and ext.max() >= V:
        raise UsageError(f"label id {int(ext.max())} out of range for V={V}")
    if (probs <= 0).any():
        raise UsageError("probabilities must be strictly positive")
    need = min_frames(ext[1::2])
    if T < need:
        raise InfeasibleError(T, need)
    return probs


def forward_alphas(probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log-domain forward table, shape ``(T, 2U+1)``."""
    ext = np.asarray(ext, dtype=np.int64)
    probs = _check(probs, ext)
    T = probs.shape[0]
    S = ext.size
    logp = np.log(probs[:, ext])
    skip = _skip_mask(ext)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, 0]
    if S > 1:
        alpha[0, 1] = logp[0, 1]
    prev1 = np.full(S, NEG_INF)
    prev2 = np.full(S, NEG_INF)
    for t in range(1, T):
        a = alpha[t - 1]
        prev1[1:] = a[:-1]
        prev2[2:] = a[:-2]
        acc = np.logaddexp(a, prev1)
        acc = np.where(skip, np.logaddexp(acc, prev2), acc)
        alpha[t] = acc + logp[t]
    return alpha


def backward_betas(probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log-domain backward table, shape ``(T, 2U+1)``.

    ``beta[T-1]`` is 0 at the two terminal positions and ``-inf`` elsewhere.
    """
    ext = np.asarray(ext, dtype=np.int64)
    probs = _check(probs, ext)
    T = probs.shape[0]
    S = ext.size
    logp = np.log(probs[:, ext])
    skip = _skip_mask(ext)
    # s -> s+2 exists iff s+2 -> ... is a valid skip target
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    nxt1 = np.full(S, NEG_INF)
    nxt2 = np.full(S, NEG_INF)
    for t in range(T - 2, -1, -1):
        b = beta[t + 1] + logp[t + 1]
        nxt1[:-1] = b[1:]
        nxt2[:-2] = b[2:]
        acc = np.logaddexp(b, nxt1)
        beta[t] = np.where(skip_from, np.logaddexp(acc, nxt2), acc)
    return beta


def _log_total(alpha: np.ndarray) -> float:
    last = alpha[-1]
    if last.size == 1:
        return float(last[0])
    return float(np.logaddexp(last[-1], last[-2]))


def ctc_neg_log_likelihood(probs: np.ndarray, labels: Sequence[int]) -> float:
    """``-ln P(labels | probs)`` summed over every valid alignment."""
    ext = extend_labels(labels)
    return -_log_total(forward_alphas(probs, ext))


def forward_backward(probs: np.ndarray, labels: Sequence[int]):
    """Run both recursions once; returns ``(ext, alpha, beta, nll)``."""
    ext = extend_labels(labels)
    alpha = forward_alphas(probs, ext)
    beta = backward_betas(probs, ext)
    return ext, alpha, beta, -_log_total(alpha)


def occupancy(alpha: np.ndarray, beta: np.ndarray, ext: np.ndarray,
              total_nll: float, vocab_size: int) -> np.ndarray:
    """Posterior token occupancy ``G[t, k]`` under the alignment distribution.

    ``G[t, k]`` sums ``alpha * beta / P`` over extended positions holding
    token ``k``; each row sums to one.
    """
    ext = np.asarray(ext, dtype=np.int64)
    post = np.exp(alpha + beta + total_nll)
    G = np.zeros((alpha.shape[0], vocab_size))
    for s, k in enumerate(ext):
        G[:, k] += post[:, s]
    return G


def ctc_grad_wrt_probs(occ: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """``dNLL/dp[t, k] = -G[t, k] / p[t, k]``."""
    return -occ / probs


def ctc_grad_wrt_logits(occ: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient through a unit-temperature softmax: ``p - G``."""
    return probs - occ


def ctc_loss_and_grad(logits: np.ndarray, labels: Sequence[int]):
    """NLL and its logit gradient for unit-temperature softmax outputs.

    Returns ``(nll, dlogits, probs)``.
    """
    probs = tempered_softmax_rows(logits, 1.0)
    ext, alpha, beta, nll = forward_backward(probs, labels)
    occ = occupancy(alpha, beta, ext, nll, probs.shape[1])
    return nll, ctc_grad_wrt_logits(occ, probs), probs


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return tuple(out)


def brute_force_likelihood(probs: np.ndarray, labels: Sequence[int]) -> float:
    """Reference NLL by enumerating all ``V**T`` frame labelings.

    Returns ``inf`` when no labeling collapses to ``labels``. Only for tiny
    lattices (``T <= 8``, ``V <= 5``).
    """
    probs = np.asarray(probs, dtype=np.float64)
    T, V = probs.shape
    if T > MAX_BRUTE_T or V > MAX_BRUTE_V:
        raise UsageError(f"brute force limited to T<={MAX_BRUTE_T}, V<={MAX_BRUTE_V}")
    target = tuple(int(k) for k in labels)
    total = 0.0
    frames = range(T)
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += math.prod(probs[t, path[t]] for t in frames)
    return math.inf if total == 0.0 else -math.log(total)


def brute_force_occupancy(probs: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Reference ``G[t, k]`` by path enumeration (posterior frame-label marginals)."""
    probs = np.asarray(probs, dtype=np.float64)
    T, V = probs.shape
    if T > MAX_BRUTE_T or V > MAX_BRUTE_V:
        raise UsageError(f"brute force limited to T<={MAX_BRUTE_T}, V<={MAX_BRUTE_V}")
    target = tuple(int(k) for k in labels)
    G = np.zeros((T, V))
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            w = math.prod(probs[t, path[t]] for t in range(T))
            total += w
            G[np.arange(T), path] += w
    if total == 0.0:
        raise InfeasibleError(T, min_frames(target))
    return G / total
