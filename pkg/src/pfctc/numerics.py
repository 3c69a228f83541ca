"""Log-domain arithmetic, tempered softmax and nearest-rank percentiles.

Everything here works in float64. Log-domain zero is ``-inf``.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from pfctc.errors import UsageError

NEG_INF = -math.inf


def log_sum_exp(values: Iterable[float]) -> float:
    """Return ``ln(sum(exp(v)))`` using a max shift.

    ``-inf`` entries contribute nothing; if every entry is ``-inf`` the
    result is ``-inf``.
    """
    arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                     dtype=np.float64).ravel()
    if arr.size == 0:
        raise UsageError("log_sum_exp of an empty sequence")
    if np.isnan(arr).any():
        raise UsageError("log_sum_exp received NaN")
    m = arr.max()
    if m == NEG_INF:
        return NEG_INF
    if m == math.inf:
        return math.inf
    return float(m + np.log(np.exp(arr - m).sum()))


def log_softmax_rows(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise ``log softmax(logits / tau)``."""
    if not tau > 0:
        raise UsageError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def tempered_softmax_rows(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / tau``.

    Args:
        logits: ``(T, V)`` array of finite scores.
        tau: temperature, strictly positive. Larger values flatten rows.

    Returns:
        ``(T, V)`` array whose rows sum to one.
    """
    if not tau > 0:
        raise UsageError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise UsageError("logits must be finite")
    z = z / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nearest_rank_percentile(values: Iterable[float], q: float) -> float:
    """Nearest-rank percentile: the ``ceil(q/100 * n)``-th smallest value."""
    data = sorted(float(v) for v in values)
    if not data:
        raise UsageError("percentile of an empty sequence")
    if not 0 < q <= 100:
        raise UsageError(f"percentile must be in (0, 100], got {q}")
    # 1e-9 guard keeps e.g. 0.9 * 10 from landing at rank 10 via 9.000000000000002
    rank = max(1, math.ceil(q / 100.0 * len(data) - 1e-9))
    return data[rank - 1]
