"""Shared test utilities: central finite differences and comparison helpers."""

import numpy as np


def finite_diff_params(fn, params, h=1e-5, keys=None):
    """Central finite differences of scalar fn(params) w.r.t. every entry.

    fn must not mutate params. Returns a dict of gradients shaped like params.
    """
    grads = {}
    for k in keys if keys is not None else params.keys():
        arr = params[k]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(params)
            flat[i] = orig - h
            fm = fn(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[k] = g
    return grads


def finite_diff_array(fn, x, h=1e-5):
    """Central finite differences of scalar fn(x) w.r.t. array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst-case relative disagreement between two gradient sets."""
    if isinstance(analytic, dict):
        errs = [max_rel_err(analytic[k], numeric[k], floor) for k in analytic]
        return max(errs) if errs else 0.0
    num = np.abs(analytic - numeric)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((num / den).max()) if num.size else 0.0
