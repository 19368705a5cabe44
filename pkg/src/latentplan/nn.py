"""Minimal feed-forward building blocks with hand-written backward passes.

Parameters live in plain ``dict[str, np.ndarray]`` containers. Forward
functions return caches that the matching backward functions consume; all
math is float64. Analytic gradients are verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigurationError

Params = dict

NORM_FLOOR = 1e-8  # pre-normalization norms below this get the epsilon bump


def rng_from_seed(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def he_init(rng, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(1, fan_in)), size=shape)


BIAS_INIT = 0.01  # keeps ReLU units alive at init, even in tiny test nets


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# dense / activations
# ---------------------------------------------------------------------------


def dense_fwd(x, w, b):
    return x @ w + b


def dense_bwd(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_bwd(dy, pre):
    return np.where(pre > 0.0, dy, 0.0)


def tanh_bwd(dy, out):
    return dy * (1.0 - out * out)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(dy, out):
    return dy * out * (1.0 - out)


# ---------------------------------------------------------------------------
# row-wise l2 normalization onto the unit sphere
# ---------------------------------------------------------------------------


def l2_normalize(x):
    """Normalize rows (or a single vector) to unit length.

    Returns (y, norm, denom); denom carries the epsilon bump applied when
    a norm falls below NORM_FLOOR, so division never blows up.
    """
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    denom = np.where(norm < NORM_FLOOR, norm + NORM_FLOOR, norm)
    return x / denom, norm, denom


def l2_normalize_bwd(dy, x, norm, denom):
    # y = x / denom with d(denom)/dx = x / norm (the epsilon is additive)
    inner = np.sum(dy * x, axis=-1, keepdims=True)
    safe_norm = np.maximum(norm, NORM_FLOOR)
    return dy / denom - x * inner / (safe_norm * denom * denom)


# ---------------------------------------------------------------------------
# ReLU MLP with a configurable output head
# ---------------------------------------------------------------------------


def mlp_init(rng, sizes) -> Params:
    params = {}
    last = len(sizes) - 2
    for i in range(len(sizes) - 1):
        params[f"w{i}"] = he_init(rng, sizes[i], (sizes[i], sizes[i + 1]))
        fill = 0.0 if i == last else BIAS_INIT
        params[f"b{i}"] = np.full(sizes[i + 1], fill)
    return params


def mlp_n_layers(params: Params) -> int:
    return sum(1 for k in params if k.startswith("w"))


def mlp_fwd(params: Params, x, out_act: str = "linear"):
    """Forward pass; hidden activations are ReLU. Returns (y, cache)."""
    n = mlp_n_layers(params)
    pres = []
    acts = [x]
    h = x
    for i in range(n):
        pre = dense_fwd(h, params[f"w{i}"], params[f"b{i}"])
        pres.append(pre)
        if i < n - 1:
            h = relu(pre)
        elif out_act == "linear":
            h = pre
        elif out_act == "tanh":
            h = np.tanh(pre)
        elif out_act == "sigmoid":
            h = sigmoid(pre)
        else:
            raise ConfigurationError(f"unknown output activation {out_act!r}")
        acts.append(h)
    return h, (pres, acts, out_act)


def mlp_bwd(params: Params, cache, dy):
    """Backward pass. Returns (dx, grads) with grads keyed like params."""
    pres, acts, out_act = cache
    n = len(pres)
    grads = {}
    if out_act == "tanh":
        dy = tanh_bwd(dy, acts[-1])
    elif out_act == "sigmoid":
        dy = sigmoid_bwd(dy, acts[-1])
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            dy = relu_bwd(dy, pres[i])
        dy, grads[f"w{i}"], grads[f"b{i}"] = dense_bwd(dy, acts[i], params[f"w{i}"])
    return dy, grads


# ---------------------------------------------------------------------------
# convolution layers (wrapping the backend kernels)
# ---------------------------------------------------------------------------


def conv_fwd(x, w, b, stride, pad):
    return kernels.conv2d_fwd(x, w, stride, pad) + b


def conv_bwd(dy, x, w, stride, pad):
    dy = np.ascontiguousarray(dy)
    dx = kernels.conv2d_bwd_x(dy, w, stride, pad, x.shape[1], x.shape[2])
    dw = kernels.conv2d_bwd_w(x, dy, w.shape[0], w.shape[1], stride, pad)
    return dx, dw, dy.sum(axis=(0, 1, 2))


def deconv_fwd(x, w, b, stride, pad, out_hw):
    """Transposed convolution; w is (kh, kw, C_out, C_in), adjoint of conv_fwd."""
    x = np.ascontiguousarray(x)
    return kernels.conv2d_bwd_x(x, w, stride, pad, out_hw[0], out_hw[1]) + b


def deconv_bwd(dy, x, w, stride, pad):
    dy = np.ascontiguousarray(dy)
    dx = kernels.conv2d_fwd(dy, w, stride, pad)
    dw = kernels.conv2d_bwd_w(dy, x, w.shape[0], w.shape[1], stride, pad)
    return dx, dw, dy.sum(axis=(0, 1, 2))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Per-parameter adaptive step sizes (first/second moment estimates)."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
