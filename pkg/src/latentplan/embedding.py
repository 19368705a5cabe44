"""Time-contrastive image autoencoder.

The encoder maps images through three stride-2 convolutions and a linear
layer onto the unit sphere; the decoder mirrors it. Training combines a
reconstruction loss on the anchor frame with a triplet loss that pulls
temporally adjacent frames together and pushes random frames at least a
margin apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigurationError, DatasetError, TrainingDivergedError

KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass(frozen=True)
class EmbeddingConfig:
    height: int = 64
    width: int = 64
    channels: int = 3
    latent_dim: int = 20
    conv_channels: tuple = (32, 32, 32)
    alpha: float = 0.5          # margin for the triplet hinge
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    holdout_fraction: float = 0.1

    def spatial_sizes(self):
        """(H, W) after each encoder stage, index 0 is the input size."""
        sizes = [(self.height, self.width)]
        for _ in self.conv_channels:
            h, w = sizes[-1]
            sizes.append(((h + 2 * PAD - KERNEL) // STRIDE + 1,
                          (w + 2 * PAD - KERNEL) // STRIDE + 1))
        return sizes

    @property
    def flat_dim(self) -> int:
        h, w = self.spatial_sizes()[-1]
        return h * w * self.conv_channels[-1]


@dataclass(frozen=True)
class Triplet:
    anchor: np.ndarray       # frame t
    positive: np.ndarray     # frame t+1, same episode
    negative: np.ndarray     # random frame, >1 step away if same episode


def init_embedding(config: EmbeddingConfig, rng) -> nn.Params:
    rng = nn.rng_from_seed(rng)
    chans = (config.channels,) + tuple(config.conv_channels)
    params = {}
    for i in range(len(config.conv_channels)):
        fan_in = KERNEL * KERNEL * chans[i]
        params[f"enc_conv{i}_w"] = nn.he_init(rng, fan_in, (KERNEL, KERNEL, chans[i], chans[i + 1]))
        params[f"enc_conv{i}_b"] = np.full(chans[i + 1], nn.BIAS_INIT)
    params["enc_fc_w"] = nn.he_init(rng, config.flat_dim, (config.flat_dim, config.latent_dim))
    params["enc_fc_b"] = np.full(config.latent_dim, nn.BIAS_INIT)
    params["dec_fc_w"] = nn.he_init(rng, config.latent_dim, (config.latent_dim, config.flat_dim))
    params["dec_fc_b"] = np.full(config.flat_dim, nn.BIAS_INIT)
    n = len(config.conv_channels)
    for i in range(n):
        # deconv stage i inverts encoder stage (n-1-i); weights are (kh, kw, C_out, C_in)
        src = n - 1 - i
        params[f"dec_conv{i}_w"] = nn.he_init(rng, KERNEL * KERNEL * chans[src + 1],
                                              (KERNEL, KERNEL, chans[src], chans[src + 1]))
        fill = 0.0 if i == n - 1 else nn.BIAS_INIT  # sigmoid head stays centered
        params[f"dec_conv{i}_b"] = np.full(chans[src], fill)
    return params


def _as_batch(x, config):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (config.height, config.width, config.channels):
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == (config.height, config.width, config.channels):
        return x, False
    raise ConfigurationError(
        f"image shape {x.shape} does not match configured "
        f"{(config.height, config.width, config.channels)}")


def encode_fwd(images, params, config):
    x, squeeze = _as_batch(images, config)
    pres, acts = [], [x]
    h = x
    for i in range(len(config.conv_channels)):
        pre = nn.conv_fwd(h, params[f"enc_conv{i}_w"], params[f"enc_conv{i}_b"], STRIDE, PAD)
        pres.append(pre)
        h = nn.relu(pre)
        acts.append(h)
    flat = h.reshape(h.shape[0], -1)
    prenorm = nn.dense_fwd(flat, params["enc_fc_w"], params["enc_fc_b"])
    z, norm, denom = nn.l2_normalize(prenorm)
    cache = (pres, acts, flat, prenorm, norm, denom, squeeze)
    return (z[0] if squeeze else z), cache


def encode(images, params, config: EmbeddingConfig):
    """Project image(s) to unit-norm latent vector(s)."""
    z, _ = encode_fwd(images, params, config)
    return z


def encode_bwd(dz, params, config, cache) -> nn.Params:
    """Gradients of <dz, encode(x)> w.r.t. encoder parameters."""
    pres, acts, flat, prenorm, norm, denom, squeeze = cache
    if squeeze:
        dz = dz[None]
    dpre = nn.l2_normalize_bwd(dz, prenorm, norm, denom)
    dflat, dw, db = nn.dense_bwd(dpre, flat, params["enc_fc_w"])
    grads = {"enc_fc_w": dw, "enc_fc_b": db}
    dh = dflat.reshape(acts[-1].shape)
    for i in range(len(config.conv_channels) - 1, -1, -1):
        dpre = nn.relu_bwd(dh, pres[i])
        dh, grads[f"enc_conv{i}_w"], grads[f"enc_conv{i}_b"] = nn.conv_bwd(
            dpre, acts[i], params[f"enc_conv{i}_w"], STRIDE, PAD)
    return grads


def decode_fwd(z, params, config):
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None]
    if z.shape[1] != config.latent_dim:
        raise ConfigurationError(f"latent dim {z.shape[1]} != configured {config.latent_dim}")
    sizes = config.spatial_sizes()
    n = len(config.conv_channels)
    fc_pre = nn.dense_fwd(z, params["dec_fc_w"], params["dec_fc_b"])
    h = nn.relu(fc_pre)
    deep_h, deep_w = sizes[-1]
    h = h.reshape(z.shape[0], deep_h, deep_w, config.conv_channels[-1])
    pres, acts = [], [h]
    for i in range(n):
        out_hw = sizes[n - 1 - i]
        pre = nn.deconv_fwd(h, params[f"dec_conv{i}_w"], params[f"dec_conv{i}_b"],
                            STRIDE, PAD, out_hw)
        pres.append(pre)
        h = nn.sigmoid(pre) if i == n - 1 else nn.relu(pre)
        acts.append(h)
    cache = (z, fc_pre, pres, acts, squeeze)
    return (h[0] if squeeze else h), cache


def decode(z, params, config: EmbeddingConfig):
    """Reconstruct image(s) from latent(s); outputs lie in [0, 1]."""
    out, _ = decode_fwd(z, params, config)
    return out


def decode_bwd(dout, params, config, cache):
    """Returns (grads, dz) for <dout, decode(z)>."""
    z, fc_pre, pres, acts, squeeze = cache
    if squeeze:
        dout = dout[None]
    n = len(config.conv_channels)
    grads = {}
    dh = dout
    for i in range(n - 1, -1, -1):
        dpre = nn.sigmoid_bwd(dh, acts[i + 1]) if i == n - 1 else nn.relu_bwd(dh, pres[i])
        dh, grads[f"dec_conv{i}_w"], grads[f"dec_conv{i}_b"] = nn.deconv_bwd(
            dpre, acts[i], params[f"dec_conv{i}_w"], STRIDE, PAD)
    dflat = dh.reshape(dh.shape[0], -1)
    dfc = nn.relu_bwd(dflat, fc_pre)
    dz, grads["dec_fc_w"], grads["dec_fc_b"] = nn.dense_bwd(dfc, z, params["dec_fc_w"])
    return grads, (dz[0] if squeeze else dz)


def _accumulate(total: nn.Params, part: nn.Params, scale: float = 1.0) -> None:
    for k, v in part.items():
        if k in total:
            total[k] += scale * v
        else:
            total[k] = scale * v


def _norm_rows(x):
    return np.linalg.norm(x.reshape(x.shape[0], -1), axis=1)


def loss_autoencoder(image, params, config) -> float:
    """Euclidean norm of the flattened reconstruction residual."""
    z, _ = encode_fwd(image, params, config)
    recon, _ = decode_fwd(z, params, config)
    return float(np.linalg.norm(np.asarray(image, dtype=np.float64).ravel() - recon.ravel()))


def loss_autoencoder_grad(image, params, config):
    """(loss, parameter gradients) of the reconstruction term alone."""
    x, _ = _as_batch(image, config)
    z, ce = encode_fwd(x, params, config)
    recon, cd = decode_fwd(z, params, config)
    res = x - recon
    norm = max(float(np.linalg.norm(res)), 1e-12)
    grads = {}
    dec_grads, dz = decode_bwd(-res / norm, params, config, cd)
    _accumulate(grads, dec_grads)
    _accumulate(grads, encode_bwd(dz, params, config, ce))
    return norm, grads


def loss_contrastive(triplet: Triplet, params, config, alpha: float | None = None) -> float:
    """Pull-together distance plus the hinged push-apart margin term."""
    alpha = config.alpha if alpha is None else alpha
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    za = encode(triplet.anchor, params, config)
    zp = encode(triplet.positive, params, config)
    zn = encode(triplet.negative, params, config)
    pos = float(np.linalg.norm(za - zp))
    neg = float(np.linalg.norm(za - zn))
    return pos + max(alpha - neg, 0.0)


def loss_total(triplet: Triplet, params, config, alpha: float | None = None) -> float:
    return loss_autoencoder(triplet.anchor, params, config) + \
        loss_contrastive(triplet, params, config, alpha)


def loss_total_batch(anchors, positives, negatives, params, config, alpha=None):
    """Mean of the per-triplet combined losses over a stacked batch."""
    loss, _ = _loss_total_batch_impl(anchors, positives, negatives, params, config,
                                     alpha, want_grads=False)
    return loss


def loss_total_grad(triplet: Triplet, params, config, alpha=None):
    """(loss, parameter gradients) for a single triplet."""
    return _loss_total_batch_impl(triplet.anchor[None], triplet.positive[None],
                                  triplet.negative[None], params, config, alpha,
                                  want_grads=True)


def _loss_total_batch_impl(anchors, positives, negatives, params, config, alpha,
                           want_grads):
    alpha = config.alpha if alpha is None else alpha
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    b = anchors.shape[0]
    za, ca = encode_fwd(anchors, params, config)
    zp, cp = encode_fwd(positives, params, config)
    zn, cn = encode_fwd(negatives, params, config)
    recon, cd = decode_fwd(za, params, config)

    res = anchors - recon
    ae_norms = _norm_rows(res)
    diff_pos = za - zp
    diff_neg = za - zn
    pos_norms = _norm_rows(diff_pos)
    neg_norms = _norm_rows(diff_neg)
    hinge = np.maximum(alpha - neg_norms, 0.0)
    loss = float(np.mean(ae_norms + pos_norms + hinge))
    if not want_grads:
        return loss, None

    safe = lambda v: np.maximum(v, 1e-12)
    # reconstruction branch: d||res|| / d recon = -res / ||res||
    drecon = -res / safe(ae_norms)[:, None, None, None] / b
    grads = {}
    dec_grads, dza_ae = decode_bwd(drecon, params, config, cd)
    _accumulate(grads, dec_grads)

    dza = dza_ae + diff_pos / safe(pos_norms)[:, None] / b
    dzp = -diff_pos / safe(pos_norms)[:, None] / b
    active = (hinge > 0.0).astype(np.float64)
    dza += -diff_neg / safe(neg_norms)[:, None] * active[:, None] / b
    dzn = diff_neg / safe(neg_norms)[:, None] * active[:, None] / b

    _accumulate(grads, encode_bwd(dza, params, config, ca))
    _accumulate(grads, encode_bwd(dzp, params, config, cp))
    _accumulate(grads, encode_bwd(dzn, params, config, cn))
    return loss, grads


# ---------------------------------------------------------------------------
# triplet sampling
# ---------------------------------------------------------------------------


def _check_dataset(dataset):
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    lengths = np.array([len(ep) for ep in dataset])
    if (lengths < 2).any():
        raise DatasetError("every episode needs at least 2 frames")
    return lengths


def sample_triplet_indices(lengths, batch: int, rng):
    """Index-level sampler: returns (ep_a, t_a, ep_n, t_n) arrays.

    Anchors are uniform over frames with a successor; negatives are uniform
    over all frames, redrawn while they land within one step of the anchor
    inside the same episode.
    """
    lengths = np.asarray(lengths)
    pair_counts = lengths - 1
    pair_cum = np.concatenate([[0], np.cumsum(pair_counts)])
    frame_cum = np.concatenate([[0], np.cumsum(lengths)])
    ep_a = np.empty(batch, dtype=np.int64)
    t_a = np.empty(batch, dtype=np.int64)
    ep_n = np.empty(batch, dtype=np.int64)
    t_n = np.empty(batch, dtype=np.int64)
    for i in range(batch):
        flat = rng.integers(0, pair_cum[-1])
        e = int(np.searchsorted(pair_cum, flat, side="right") - 1)
        t = int(flat - pair_cum[e])
        # neighbourhood exclusion leaves nothing only in tiny single-episode
        # stores; then fall back to excluding just the anchor frame
        n_excluded = min(t + 1, lengths[e] - 1) - max(t - 1, 0) + 1
        only_anchor = frame_cum[-1] - n_excluded == 0
        while True:
            nflat = rng.integers(0, frame_cum[-1])
            en = int(np.searchsorted(frame_cum, nflat, side="right") - 1)
            tn = int(nflat - frame_cum[en])
            if only_anchor:
                if en != e or tn != t:
                    break
            elif en != e or abs(tn - t) > 1:
                break
        ep_a[i], t_a[i], ep_n[i], t_n[i] = e, t, en, tn
    return ep_a, t_a, ep_n, t_n


def sample_triplets(dataset, batch: int, rng) -> list:
    """Draw a batch of Triplets from an episode-ordered image store."""
    lengths = _check_dataset(dataset)
    rng = nn.rng_from_seed(rng)
    ep_a, t_a, ep_n, t_n = sample_triplet_indices(lengths, batch, rng)
    return [Triplet(anchor=dataset[e][t], positive=dataset[e][t + 1],
                    negative=dataset[en][tn])
            for e, t, en, tn in zip(ep_a, t_a, ep_n, t_n)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTrainResult:
    params: nn.Params
    holdout_initial: float
    holdout_final: float
    epoch_losses: list = field(default_factory=list)


def _stack_triplets(dataset, idx):
    ep_a, t_a, ep_n, t_n = idx
    anchors = np.stack([dataset[e][t] for e, t in zip(ep_a, t_a)])
    positives = np.stack([dataset[e][t + 1] for e, t in zip(ep_a, t_a)])
    negatives = np.stack([dataset[e][t] for e, t in zip(ep_n, t_n)])
    return anchors, positives, negatives


def train_embedding(dataset, config: EmbeddingConfig, seed=0) -> EmbeddingTrainResult:
    """Mini-batch Adam training of the combined loss; seed-deterministic."""
    lengths = _check_dataset(dataset)
    rng = nn.rng_from_seed(seed)
    params = init_embedding(config, rng)

    order = rng.permutation(len(dataset))
    n_hold = min(len(dataset) - 1, max(1, round(config.holdout_fraction * len(dataset)))) \
        if len(dataset) >= 2 else 0
    hold_eps = [dataset[i] for i in order[:n_hold]] or list(dataset)
    train_eps = [dataset[i] for i in order[n_hold:]] or list(dataset)

    hold_lengths = np.array([len(ep) for ep in hold_eps])
    hold_rng = nn.rng_from_seed(rng.integers(2**32))
    hold_idx = sample_triplet_indices(hold_lengths, min(256, int(hold_lengths.sum())), hold_rng)
    hold_batch = _stack_triplets(hold_eps, hold_idx)

    def holdout_loss(p):
        return loss_total_batch(*hold_batch, p, config)

    result = EmbeddingTrainResult(params, holdout_initial=holdout_loss(params),
                                  holdout_final=np.nan)
    if config.epochs == 0:
        result.holdout_final = result.holdout_initial
        return result

    train_lengths = np.array([len(ep) for ep in train_eps])
    steps_per_epoch = max(1, int(train_lengths.sum()) // config.batch_size)
    opt = nn.Adam(params, config.lr)
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            idx = sample_triplet_indices(train_lengths, config.batch_size, rng)
            batch = _stack_triplets(train_eps, idx)
            loss, grads = _loss_total_batch_impl(*batch, params, config, None, True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"embedding loss became {loss} at epoch {epoch}")
            opt.step(params, grads)
            epoch_loss += loss
        result.epoch_losses.append(epoch_loss / steps_per_epoch)
    result.params = nn.copy_params(params)
    result.holdout_final = holdout_loss(params)
    return result
