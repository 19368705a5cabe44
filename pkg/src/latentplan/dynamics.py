"""Learned latent forward model.

The network maps a stacked latent state (k unit-norm frame embeddings,
oldest first) plus an action to the next frame embedding. A full
prediction step rotates the stack by one block and renormalizes the new
block onto the unit sphere; the training loss compares the raw network
output against the encoder's next-frame embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, TrainingDivergedError


@dataclass(frozen=True)
class DynamicsConfig:
    k: int = 1                      # stacked frames per state
    d: int = 20                     # per-frame embedding size
    m: int = 1                      # action dimension
    hidden: tuple = (400, 400)
    lr: float = 1e-3
    batch_size: int = 64
    train_steps: int = 200          # gradient steps per optimization call
    holdout_fraction: float = 0.1

    @property
    def state_dim(self) -> int:
        return self.k * self.d

    @property
    def sizes(self) -> tuple:
        return (self.state_dim + self.m,) + tuple(self.hidden) + (self.d,)


def init_dynamics(config: DynamicsConfig, rng) -> nn.Params:
    return nn.mlp_init(nn.rng_from_seed(rng), config.sizes)


def _check_shapes(z, a, config):
    if z.shape[-1] != config.state_dim:
        raise ConfigurationError(f"state dim {z.shape[-1]} != {config.state_dim}")
    if a.shape[-1] != config.m:
        raise ConfigurationError(f"action dim {a.shape[-1]} != {config.m}")


def raw_next(z, a, params, config):
    """Network output for the next frame embedding, before renormalization."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_shapes(z, a, config)
    x = np.concatenate([z, a], axis=-1)
    out, _ = nn.mlp_fwd(params, x[None] if x.ndim == 1 else x)
    return out[0] if x.ndim == 1 else out


def predict_fwd(z, a, params, config):
    """One prediction step with cache for the backward pass.

    Blocks 1..k-1 of the output are bitwise copies of input blocks 2..k;
    the final block is the renormalized network output.
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_shapes(z, a, config)
    single = z.ndim == 1
    zb = z[None] if single else z
    ab = a[None] if single else a
    x = np.concatenate([zb, ab], axis=-1)
    raw, mlp_cache = nn.mlp_fwd(params, x)
    block, norm, denom = nn.l2_normalize(raw)
    out = np.concatenate([zb[:, config.d:], block], axis=-1)
    cache = (x, mlp_cache, raw, norm, denom, single)
    return (out[0] if single else out), cache


def predict(z, a, params, config: DynamicsConfig):
    out, _ = predict_fwd(z, a, params, config)
    return out


def predict_bwd(dout, params, config, cache):
    """Backward through one prediction step; parameters held fixed.

    Returns (dz, da) for the inputs of predict.
    """
    x, mlp_cache, raw, norm, denom, single = cache
    if single:
        dout = dout[None]
    d = config.d
    dblock = dout[:, -d:]
    draw = nn.l2_normalize_bwd(dblock, raw, norm, denom)
    dx, _ = nn.mlp_bwd(params, mlp_cache, draw)
    dz = np.zeros((dout.shape[0], config.state_dim))
    dz[:, d:] += dout[:, : config.state_dim - d]   # rotated copies
    dz += dx[:, : config.state_dim]
    da = dx[:, config.state_dim:]
    return (dz[0], da[0]) if single else (dz, da)


def rollout(z0, actions, params, config: DynamicsConfig):
    """Unroll n steps; result[0] is z0, result[i+1] = predict(result[i], a[i])."""
    z0 = np.asarray(z0, dtype=np.float64)
    out = np.empty((len(actions) + 1, config.state_dim))
    out[0] = z0
    for i, a in enumerate(actions):
        out[i + 1] = predict(out[i], a, params, config)
    return out


def loss_dynamics(z, a, z_next_true, params, config) -> float:
    """Euclidean distance between raw prediction and the true embedding."""
    raw = raw_next(z, a, params, config)
    res = raw - np.asarray(z_next_true, dtype=np.float64)
    if res.ndim == 1:
        return float(np.linalg.norm(res))
    return float(np.mean(np.linalg.norm(res, axis=1)))


def loss_dynamics_grad(z, a, z_next_true, params, config):
    """(mean loss, parameter gradients) over a batch of transitions."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    target = np.atleast_2d(np.asarray(z_next_true, dtype=np.float64))
    _check_shapes(z, a, config)
    x = np.concatenate([z, a], axis=-1)
    raw, cache = nn.mlp_fwd(params, x)
    res = raw - target
    norms = np.linalg.norm(res, axis=1)
    loss = float(np.mean(norms))
    draw = res / np.maximum(norms, 1e-12)[:, None] / res.shape[0]
    _, grads = nn.mlp_bwd(params, cache, draw)
    return loss, grads


@dataclass
class DynamicsTrainResult:
    params: nn.Params
    holdout_initial: float
    holdout_final: float
    step_losses: list = field(default_factory=list)


def train_dynamics(transitions, config: DynamicsConfig, seed=0,
                   params: nn.Params | None = None) -> DynamicsTrainResult:
    """Mini-batch Adam on the prediction loss.

    transitions is (Z, A, Z_next_true) arrays or a list of such tuples.
    Passing existing params continues training from them (the per-episode
    refresh); otherwise a fresh network is initialized from the seed.
    """
    if isinstance(transitions, (list, tuple)) and not isinstance(transitions[0], np.ndarray):
        zs = np.stack([t[0] for t in transitions])
        acts = np.stack([t[1] for t in transitions])
        nxt = np.stack([t[2] for t in transitions])
    else:
        zs, acts, nxt = transitions
    if len(zs) == 0:
        raise ConfigurationError("no transitions to train on")
    rng = nn.rng_from_seed(seed)
    params = init_dynamics(config, rng) if params is None else nn.copy_params(params)

    n = len(zs)
    n_hold = max(1, int(config.holdout_fraction * n)) if n >= 2 else 0
    order = rng.permutation(n)
    hold, train = order[:n_hold], order[n_hold:]
    if len(train) == 0:
        train = order

    def holdout_loss(p):
        idx = hold if len(hold) else train
        return loss_dynamics(zs[idx], acts[idx], nxt[idx], p, config)

    result = DynamicsTrainResult(params, holdout_initial=holdout_loss(params),
                                 holdout_final=np.nan)
    if config.train_steps == 0:
        result.holdout_final = result.holdout_initial
        return result
    opt = nn.Adam(params, config.lr)
    for step in range(config.train_steps):
        idx = train[rng.integers(0, len(train), size=min(config.batch_size, len(train)))]
        loss, grads = loss_dynamics_grad(zs[idx], acts[idx], nxt[idx], params, config)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"dynamics loss became {loss} at step {step}")
        opt.step(params, grads)
        result.step_losses.append(loss)
    result.params = nn.copy_params(params)
    result.holdout_final = holdout_loss(params)
    return result
