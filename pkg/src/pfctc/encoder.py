"""Windowed feed-forward acoustic encoder with hand-written backprop.

Frame ``t`` of the output sees input frames ``t-L .. t+R`` (zero padded at
the edges). Only the first layer is windowed; an optional second hidden
layer and the output projection act per frame, so the receptive field is
exactly the first layer's window. ``R`` is the lookahead: ``R=0`` is fully
causal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from pfctc.errors import UsageError

Params = dict[str, np.ndarray]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int
    hidden_dim: int
    vocab_size: int
    left_context: int = 4
    right_context: int = 2
    layers: int = 1

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise UsageError("vocab_size must be >= 2 (blank plus one token)")
        if self.left_context < 0 or self.right_context < 0:
            raise UsageError("context sizes must be >= 0")
        if self.layers not in (1, 2):
            raise UsageError("layers must be 1 or 2")

    @property
    def window(self) -> int:
        return self.left_context + 1 + self.right_context

    def to_dict(self) -> dict:
        return asdict(self)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """``Phi(x) + x * phi(x)``."""
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    H = config.hidden_dim
    shapes = {
        "W1": (config.window * config.feature_dim, H),
        "b1": (H,),
    }
    if config.layers == 2:
        shapes["W2"] = (H, H)
        shapes["b2"] = (H,)
    shapes["Wout"] = (H, config.vocab_size)
    shapes["bout"] = (config.vocab_size,)
    return shapes


def init_params(config: EncoderConfig, seed: int) -> Params:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("W"):
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        else:
            params[name] = np.zeros(shape)
    return params


def window_features(features: np.ndarray, left: int, right: int) -> np.ndarray:
    """Stack frames ``t-left .. t+right`` into one row per ``t``."""
    T, F = features.shape
    padded = np.zeros((T + left + right, F))
    padded[left:left + T] = features
    win = sliding_window_view(padded, left + 1 + right, axis=0)  # (T, F, W)
    return np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(T, -1)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]
    act: list[np.ndarray]


def encoder_forward(params: Params, config: EncoderConfig,
                    features: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Map a ``(T, feature_dim)`` matrix to ``(T, vocab_size)`` logits."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != config.feature_dim:
        raise UsageError(
            f"expected features of shape (T, {config.feature_dim}), got {features.shape}")
    x = window_features(features, config.left_context, config.right_context)
    pre, act = [], []
    h = x
    for i in range(1, config.layers + 1):
        a = h @ params[f"W{i}"] + params[f"b{i}"]
        h = gelu(a)
        pre.append(a)
        act.append(h)
    logits = h @ params["Wout"] + params["bout"]
    return logits, ForwardCache(x, pre, act)


def encoder_backward(params: Params, config: EncoderConfig, cache: ForwardCache,
                     dlogits: np.ndarray) -> Params:
    """Parameter gradients of any scalar whose logit gradient is ``dlogits``."""
    dlogits = np.asarray(dlogits, dtype=np.float64)
    h = cache.act[-1]
    if dlogits.shape != (h.shape[0], config.vocab_size):
        raise UsageError(
            f"dlogits shape {dlogits.shape} does not match ({h.shape[0]}, {config.vocab_size})")
    grads = {
        "Wout": h.T @ dlogits,
        "bout": dlogits.sum(axis=0),
    }
    dh = dlogits @ params["Wout"].T
    for i in range(config.layers, 0, -1):
        da = dh * gelu_grad(cache.pre[i - 1])
        below = cache.act[i - 2] if i > 1 else cache.inputs
        grads[f"W{i}"] = below.T @ da
        grads[f"b{i}"] = da.sum(axis=0)
        if i > 1:
            dh = da @ params[f"W{i}"].T
    return {name: grads[name] for name in params}
