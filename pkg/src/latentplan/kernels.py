"""Hot numeric kernels: strided 2-D convolution and long noise chains.

Every kernel has a pure-numpy implementation (``*_np``) and, when numba is
available, a compiled loop version. The module-level names without suffix
are bound to the active backend (see :mod:`latentplan.backend`); both
variants stay importable so tests and ``benchmarks/bench_kernels.py`` can
compare them.

Array conventions: images are channels-last ``(B, H, W, C)`` float64,
convolution weights are ``(kh, kw, C_in, C_out)``.
"""

import numpy as np

from .backend import HAS_NUMBA

# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _patches(x, kh, kw, stride, pad):
    """View of all kernel windows, shape (B, Ho, Wo, kh, kw, Ci)."""
    b, h, w, ci = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    sb, sh, sw, sc = xp.strides
    shape = (b, ho, wo, kh, kw, ci)
    strides = (sb, sh * stride, sw * stride, sh, sw, sc)
    return np.lib.stride_tricks.as_strided(xp, shape, strides)


def conv2d_fwd_np(x, w, stride, pad):
    p = _patches(x, w.shape[0], w.shape[1], stride, pad)
    return np.tensordot(p, w, axes=([3, 4, 5], [0, 1, 2]))


def conv2d_bwd_w_np(x, dy, kh, kw, stride, pad):
    p = _patches(x, kh, kw, stride, pad)
    return np.tensordot(p, dy, axes=([0, 1, 2], [0, 1, 2]))


def conv2d_bwd_x_np(dy, w, stride, pad, h_in, w_in):
    b, ho, wo, _ = dy.shape
    kh, kw, ci, _ = w.shape
    dxp = np.zeros((b, h_in + 2 * pad, w_in + 2 * pad, ci))
    for i in range(kh):
        for j in range(kw):
            # rows of dy scatter onto the strided grid offset by (i, j)
            contrib = dy @ w[i, j].T
            dxp[:, i : i + (ho - 1) * stride + 1 : stride,
                j : j + (wo - 1) * stride + 1 : stride, :] += contrib
    if pad:
        return dxp[:, pad:-pad, pad:-pad, :]
    return dxp


def ou_chain_np(x0, theta, sigma, dt, mu, noise):
    """Full path of the discretized mean-reverting process, shape like noise."""
    n, m = noise.shape
    out = np.empty((n, m))
    x = x0.astype(np.float64).copy()
    root_dt = np.sqrt(dt)
    for t in range(n):
        x = x + theta * (mu - x) * dt + sigma * root_dt * noise[t]
        out[t] = x
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:
    from numba import njit

    @njit(cache=True)
    def conv2d_fwd_nb(x, w, stride, pad):  # pragma: no cover - exercised via alias
        b, h, wd, ci = x.shape
        kh, kw, _, co = w.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        y = np.zeros((b, ho, wo, co))
        for bi in range(b):
            for oi in range(ho):
                for oj in range(wo):
                    for i in range(kh):
                        ii = oi * stride - pad + i
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(kw):
                            jj = oj * stride - pad + j
                            if jj < 0 or jj >= wd:
                                continue
                            for c in range(ci):
                                v = x[bi, ii, jj, c]
                                if v == 0.0:
                                    continue
                                for o in range(co):
                                    y[bi, oi, oj, o] += v * w[i, j, c, o]
        return y

    @njit(cache=True)
    def conv2d_bwd_w_nb(x, dy, kh, kw, stride, pad):  # pragma: no cover
        b, h, wd, ci = x.shape
        _, ho, wo, co = dy.shape
        dw = np.zeros((kh, kw, ci, co))
        for bi in range(b):
            for oi in range(ho):
                for oj in range(wo):
                    for i in range(kh):
                        ii = oi * stride - pad + i
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(kw):
                            jj = oj * stride - pad + j
                            if jj < 0 or jj >= wd:
                                continue
                            for c in range(ci):
                                v = x[bi, ii, jj, c]
                                if v == 0.0:
                                    continue
                                for o in range(co):
                                    dw[i, j, c, o] += v * dy[bi, oi, oj, o]
        return dw

    @njit(cache=True)
    def conv2d_bwd_x_nb(dy, w, stride, pad, h_in, w_in):  # pragma: no cover
        b, ho, wo, co = dy.shape
        kh, kw, ci, _ = w.shape
        dx = np.zeros((b, h_in, w_in, ci))
        for bi in range(b):
            for oi in range(ho):
                for oj in range(wo):
                    for i in range(kh):
                        ii = oi * stride - pad + i
                        if ii < 0 or ii >= h_in:
                            continue
                        for j in range(kw):
                            jj = oj * stride - pad + j
                            if jj < 0 or jj >= w_in:
                                continue
                            for o in range(co):
                                g = dy[bi, oi, oj, o]
                                if g == 0.0:
                                    continue
                                for c in range(ci):
                                    dx[bi, ii, jj, c] += g * w[i, j, c, o]
        return dx

    @njit(cache=True)
    def ou_chain_nb(x0, theta, sigma, dt, mu, noise):  # pragma: no cover
        n, m = noise.shape
        out = np.empty((n, m))
        x = x0.copy()
        root_dt = np.sqrt(dt)
        for t in range(n):
            for c in range(m):
                x[c] = x[c] + theta * (mu - x[c]) * dt + sigma * root_dt * noise[t, c]
                out[t, c] = x[c]
        return out

    conv2d_fwd = conv2d_fwd_nb
    conv2d_bwd_w = conv2d_bwd_w_nb
    conv2d_bwd_x = conv2d_bwd_x_nb
    ou_chain = ou_chain_nb
else:
    conv2d_fwd = conv2d_fwd_np
    conv2d_bwd_w = conv2d_bwd_w_np
    conv2d_bwd_x = conv2d_bwd_x_np
    ou_chain = ou_chain_np
