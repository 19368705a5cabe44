"""Deterministic actor-critic with two critic formulations.

The classical variant learns Q(z, a) and updates the actor by ascending
Q(z, pi(z)). The value variant learns V(z) and routes the policy gradient
through the frozen latent dynamics model: the actor ascends
V(step(z, pi(z))), and the critic bootstraps off V'(step(z, pi'(z))).
Target copies of both networks are tracked with soft updates.

A direct value regression without the dynamics model would only permit
on-policy updates and yields no action gradient at all, which is why that
formulation is not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import nn
from .errors import ConfigurationError


@dataclass(frozen=True)
class AgentConfig:
    variant: str = "q"              # "q" or "v"
    k: int = 1
    d: int = 20
    m: int = 1
    action_low: tuple = (-1.0,)
    action_high: tuple = (1.0,)
    hidden: tuple = (400, 300)
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    critic_lr: float = 1e-3
    actor_lr: float = 1e-4

    def __post_init__(self):
        if self.variant not in ("q", "v"):
            raise ConfigurationError(f"unknown critic variant {self.variant!r}")
        if len(self.action_low) != self.m or len(self.action_high) != self.m:
            raise ConfigurationError("action box does not match action dim")

    @property
    def state_dim(self) -> int:
        return self.k * self.d

    @property
    def box(self):
        return np.asarray(self.action_low, float), np.asarray(self.action_high, float)

    @property
    def actor_sizes(self):
        return (self.state_dim,) + tuple(self.hidden) + (self.m,)

    @property
    def critic_sizes(self):
        in_dim = self.state_dim + (self.m if self.variant == "q" else 0)
        return (in_dim,) + tuple(self.hidden) + (1,)


def init_agent(config: AgentConfig, rng) -> nn.Params:
    """Online actor/critic plus target copies, in one flat dict.

    Keys are prefixed actor_/critic_/actor_t_/critic_t_; targets start as
    exact copies of the online networks.
    """
    rng = nn.rng_from_seed(rng)
    actor = nn.mlp_init(rng, config.actor_sizes)
    critic = nn.mlp_init(rng, config.critic_sizes)
    params = {}
    for k, v in actor.items():
        params[f"actor_{k}"] = v
        params[f"actor_t_{k}"] = v.copy()
    for k, v in critic.items():
        params[f"critic_{k}"] = v
        params[f"critic_t_{k}"] = v.copy()
    return params


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)
            and not k.startswith(prefix + "t_")}


def _scale_action(raw_tanh, config):
    lo, hi = config.box
    return (lo + hi) / 2.0 + (hi - lo) / 2.0 * raw_tanh


def act_fwd(z, params, config, target=False):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    if zb.shape[1] != config.state_dim:
        raise ConfigurationError(f"state dim {zb.shape[1]} != {config.state_dim}")
    net = _sub(params, "actor_t_" if target else "actor_")
    out, cache = nn.mlp_fwd(net, zb, out_act="tanh")
    a = _scale_action(out, config)
    return (a[0] if single else a), cache


def act(z, params, config: AgentConfig, target=False):
    """Deterministic policy action, tanh-squashed into the action box."""
    a, _ = act_fwd(z, params, config, target)
    return a


def critic_value(z, a, params, config, target=False):
    """Q(z, a) for the q variant, V(z) for the v variant; returns (B,)."""
    net = _sub(params, "critic_t_" if target else "critic_")
    x = np.concatenate([z, a], axis=-1) if config.variant == "q" else z
    out, _ = nn.mlp_fwd(net, np.atleast_2d(x))
    return out[:, 0]


# ---------------------------------------------------------------------------
# losses (each returns (loss, grads) from the *_grad variant)
# ---------------------------------------------------------------------------


def _require(config, variant, op):
    if config.variant != variant:
        raise ConfigurationError(f"{op} requires the {variant!r} critic variant, "
                                 f"agent is configured with {config.variant!r}")


def _bellman_target_q(batch, params, config):
    a_next = act(batch["z_next"], params, config, target=True)
    q_next = critic_value(batch["z_next"], a_next, params, config, target=True)
    return batch["r"] + config.gamma * (1.0 - batch["done"]) * q_next


def loss_critic_q(batch, params, config) -> float:
    _require(config, "q", "loss_critic_q")
    q = critic_value(batch["z"], batch["a"], params, config)
    return float(np.mean(np.abs(q - _bellman_target_q(batch, params, config))))


def loss_critic_q_grad(batch, params, config):
    _require(config, "q", "loss_critic_q")
    target = _bellman_target_q(batch, params, config)  # constant branch
    net = _sub(params, "critic_")
    x = np.concatenate([batch["z"], batch["a"]], axis=-1)
    q, cache = nn.mlp_fwd(net, x)
    res = q[:, 0] - target
    loss = float(np.mean(np.abs(res)))
    dq = (np.sign(res) / len(res))[:, None]
    _, grads = nn.mlp_bwd(net, cache, dq)
    return loss, {f"critic_{k}": v for k, v in grads.items()}


def loss_actor_q(zs, params, config) -> float:
    _require(config, "q", "loss_actor_q")
    a = act(zs, params, config)
    return float(-np.mean(critic_value(zs, a, params, config)))


def loss_actor_q_grad(zs, params, config):
    _require(config, "q", "loss_actor_q")
    actor = _sub(params, "actor_")
    critic = _sub(params, "critic_")
    raw, a_cache = nn.mlp_fwd(actor, zs, out_act="tanh")
    a = _scale_action(raw, config)
    x = np.concatenate([zs, a], axis=-1)
    q, c_cache = nn.mlp_fwd(critic, x)
    loss = float(-np.mean(q))
    dq = np.full((len(zs), 1), -1.0 / len(zs))
    dx, _ = nn.mlp_bwd(critic, c_cache, dq)       # critic params stay fixed
    da = dx[:, config.state_dim:]
    lo, hi = config.box
    draw = da * (hi - lo) / 2.0
    _, grads = nn.mlp_bwd(actor, a_cache, draw)
    return loss, {f"actor_{k}": v for k, v in grads.items()}


def _bellman_target_v(batch, params, config, dyn_params, dyn_config):
    a_next = act(batch["z"], params, config, target=True)
    z_pred = dyn.predict(batch["z"], a_next, dyn_params, dyn_config)
    v_next = critic_value(z_pred, None, params, config, target=True)
    return batch["r"] + config.gamma * (1.0 - batch["done"]) * v_next


def loss_critic_v(batch, params, config, dyn_params, dyn_config) -> float:
    _require(config, "v", "loss_critic_v")
    v = critic_value(batch["z"], None, params, config)
    target = _bellman_target_v(batch, params, config, dyn_params, dyn_config)
    return float(np.mean(np.abs(v - target)))


def loss_critic_v_grad(batch, params, config, dyn_params, dyn_config):
    _require(config, "v", "loss_critic_v")
    target = _bellman_target_v(batch, params, config, dyn_params, dyn_config)
    net = _sub(params, "critic_")
    v, cache = nn.mlp_fwd(net, batch["z"])
    res = v[:, 0] - target
    loss = float(np.mean(np.abs(res)))
    dv = (np.sign(res) / len(res))[:, None]
    _, grads = nn.mlp_bwd(net, cache, dv)
    return loss, {f"critic_{k}": v for k, v in grads.items()}


def loss_actor_v(zs, params, config, dyn_params, dyn_config) -> float:
    _require(config, "v", "loss_actor_v")
    a = act(zs, params, config)
    z_pred = dyn.predict(zs, a, dyn_params, dyn_config)
    return float(-np.mean(critic_value(z_pred, None, params, config)))


def loss_actor_v_grad(zs, params, config, dyn_params, dyn_config):
    _require(config, "v", "loss_actor_v")
    actor = _sub(params, "actor_")
    critic = _sub(params, "critic_")
    raw, a_cache = nn.mlp_fwd(actor, zs, out_act="tanh")
    a = _scale_action(raw, config)
    z_pred, p_cache = dyn.predict_fwd(zs, a, dyn_params, dyn_config)
    v, c_cache = nn.mlp_fwd(critic, z_pred, )
    loss = float(-np.mean(v))
    dv = np.full((len(zs), 1), -1.0 / len(zs))
    dzp, _ = nn.mlp_bwd(critic, c_cache, dv)      # critic params stay fixed
    _, da = dyn.predict_bwd(dzp, dyn_params, dyn_config, p_cache)  # dynamics frozen
    lo, hi = config.box
    draw = da * (hi - lo) / 2.0
    _, grads = nn.mlp_bwd(actor, a_cache, draw)
    return loss, {f"actor_{k}": v for k, v in grads.items()}


def soft_update(online: nn.Params, target: nn.Params, tau: float) -> nn.Params:
    """target' = tau * online + (1 - tau) * target, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError("tau outside [0, 1]")
    if set(online) != set(target):
        raise ConfigurationError("online/target parameter sets differ")
    out = {}
    for k, o in online.items():
        if o.shape != target[k].shape:
            raise ConfigurationError(f"shape mismatch on {k}")
        out[k] = tau * o + (1.0 - tau) * target[k]
    return out


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Bounded FIFO store of transitions; uniform sampling with replacement."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.z = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.z_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, z, a, r, z_next, done) -> None:
        i = self._next
        self.z[i] = z
        self.a[i] = a
        self.r[i] = r
        self.z_next[i] = z_next
        self.done[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch: int, rng) -> dict:
        idx = rng.integers(0, self._size, size=batch)
        return {"z": self.z[idx], "a": self.a[idx], "r": self.r[idx],
                "z_next": self.z_next[idx], "done": self.done[idx]}

    def all(self) -> dict:
        n = self._size
        return {"z": self.z[:n], "a": self.a[:n], "r": self.r[:n],
                "z_next": self.z_next[:n], "done": self.done[:n]}


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


@dataclass
class StepInfo:
    skipped: bool = False
    critic_loss: float = np.nan
    actor_loss: float = np.nan


class AgentTrainer:
    """Owns the mutable parameters and optimizer state of one agent."""

    def __init__(self, config: AgentConfig, seed=0, params: nn.Params | None = None):
        self.config = config
        rng = nn.rng_from_seed(seed)
        self.params = nn.copy_params(params) if params is not None \
            else init_agent(config, rng)
        self.rng = rng
        self.critic_opt = nn.Adam(_sub(self.params, "critic_"), config.critic_lr)
        self.actor_opt = nn.Adam(_sub(self.params, "actor_"), config.actor_lr)

    def snapshot(self) -> nn.Params:
        return nn.copy_params(self.params)

    def train_step(self, buffer: ReplayBuffer, dyn_params=None, dyn_config=None) -> StepInfo:
        """One critic update, one actor update, one soft target update."""
        cfg = self.config
        if len(buffer) < cfg.batch_size:
            return StepInfo(skipped=True)
        batch = buffer.sample(cfg.batch_size, self.rng)
        if cfg.variant == "q":
            closs, cgrads = loss_critic_q_grad(batch, self.params, cfg)
            aloss, agrads = loss_actor_q_grad(batch["z"], self.params, cfg)
        else:
            if dyn_params is None:
                raise ConfigurationError("v variant requires a dynamics model")
            closs, cgrads = loss_critic_v_grad(batch, self.params, cfg,
                                               dyn_params, dyn_config)
            aloss, agrads = loss_actor_v_grad(batch["z"], self.params, cfg,
                                              dyn_params, dyn_config)
        self.critic_opt.step(_sub(self.params, "critic_"),
                             {k[len("critic_"):]: v for k, v in cgrads.items()})
        self.actor_opt.step(_sub(self.params, "actor_"),
                            {k[len("actor_"):]: v for k, v in agrads.items()})
        for prefix in ("actor_", "critic_"):
            updated = soft_update(_sub(self.params, prefix),
                                  _sub(self.params, prefix + "t_"), cfg.tau)
            for k, v in updated.items():
                self.params[prefix + "t_" + k] = v
        return StepInfo(critic_loss=closs, actor_loss=aloss)
