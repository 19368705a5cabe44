"""Time-contrastive autoencoder: losses, sampling, training contracts."""

import numpy as np
import pytest

from latentplan import embedding as emb
from latentplan import nn
from latentplan.errors import ConfigurationError, DatasetError

from helpers import finite_diff_params, max_rel_err

TINY = emb.EmbeddingConfig(height=4, width=4, channels=1, latent_dim=2,
                           conv_channels=(2, 2, 2))
# wide enough that random images land on distinct latent points
SMALL = emb.EmbeddingConfig(height=8, width=8, channels=1, latent_dim=4,
                            conv_channels=(4, 6, 6))


def _rand_params(config, seed=0):
    return emb.init_embedding(config, np.random.default_rng(seed))


def _rand_image(config, rng):
    return rng.uniform(0.0, 1.0, size=(config.height, config.width, config.channels))


def _rand_triplet(config, rng):
    return emb.Triplet(_rand_image(config, rng), _rand_image(config, rng),
                       _rand_image(config, rng))


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(4))
def test_encode_unit_norm(seed):
    rng = np.random.default_rng(seed)
    params = _rand_params(TINY, seed)
    for _ in range(5):
        z = emb.encode(_rand_image(TINY, rng), params, TINY)
        assert abs(np.linalg.norm(z) - 1.0) < 1e-6


def test_encode_deterministic():
    rng = np.random.default_rng(1)
    params = _rand_params(TINY)
    im = _rand_image(TINY, rng)
    z1 = emb.encode(im, params, TINY)
    z2 = emb.encode(im, params, TINY)
    assert np.array_equal(z1, z2)


def test_encode_reduced_linear_config():
    # 1x1x1 image, pass-through convs, single linear weight 3, bias 0, d=1:
    # pre-norm value is 3*pixel, so the unit-norm output is sign(3*pixel).
    cfg = emb.EmbeddingConfig(height=1, width=1, channels=1, latent_dim=1,
                              conv_channels=(1, 1, 1))
    params = _rand_params(cfg)
    for i in range(3):
        w = np.zeros((3, 3, 1, 1))
        w[1, 1, 0, 0] = 1.0  # centered identity kernel
        params[f"enc_conv{i}_w"] = w
        params[f"enc_conv{i}_b"] = np.zeros(1)
    params["enc_fc_w"] = np.array([[3.0]])
    params["enc_fc_b"] = np.zeros(1)
    z = emb.encode(np.full((1, 1, 1), 0.5), params, cfg)
    assert np.allclose(z, [1.0])


def test_encode_shape_mismatch_is_configuration_error():
    params = _rand_params(TINY)
    with pytest.raises(ConfigurationError):
        emb.encode(np.zeros((5, 5, 1)), params, TINY)


def test_decode_shape_bounds_determinism():
    rng = np.random.default_rng(2)
    params = _rand_params(TINY)
    z = emb.encode(_rand_image(TINY, rng), params, TINY)
    im1 = emb.decode(z, params, TINY)
    im2 = emb.decode(z, params, TINY)
    assert im1.shape == (TINY.height, TINY.width, TINY.channels)
    assert im1.min() >= 0.0 and im1.max() <= 1.0
    assert np.array_equal(im1, im2)
    with pytest.raises(ConfigurationError):
        emb.decode(np.zeros(TINY.latent_dim + 1), params, TINY)


def test_encode_pairwise_distance_bounded_by_sphere_diameter():
    rng = np.random.default_rng(3)
    params = _rand_params(TINY, 7)
    zs = [emb.encode(_rand_image(TINY, rng), params, TINY) for _ in range(8)]
    for i in range(len(zs)):
        for j in range(len(zs)):
            assert np.linalg.norm(zs[i] - zs[j]) <= 2.0 + 1e-9


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_loss_autoencoder_zero_on_perfect_reconstruction():
    # zero decoder weights push every sigmoid to exactly 0.5
    params = _rand_params(TINY)
    for k in params:
        if k.startswith("dec"):
            params[k] = np.zeros_like(params[k])
    im = np.full((TINY.height, TINY.width, TINY.channels), 0.5)
    assert emb.loss_autoencoder(im, params, TINY) == 0.0


def test_loss_autoencoder_single_pixel_residual():
    params = _rand_params(TINY)
    for k in params:
        if k.startswith("dec"):
            params[k] = np.zeros_like(params[k])
    im = np.full((TINY.height, TINY.width, TINY.channels), 0.5)
    im[0, 0, 0] = 1.0
    assert np.isclose(emb.loss_autoencoder(im, params, TINY), 0.5)


def test_loss_contrastive_formula_and_hinge():
    rng = np.random.default_rng(4)
    params = _rand_params(SMALL, 0)
    trip = _rand_triplet(SMALL, rng)
    za = emb.encode(trip.anchor, params, SMALL)
    zp = emb.encode(trip.positive, params, SMALL)
    zn = emb.encode(trip.negative, params, SMALL)
    pos = np.linalg.norm(za - zp)
    neg = np.linalg.norm(za - zn)
    assert neg > 0.05
    for alpha in (0.1, 0.5, 2.5):
        want = pos + max(alpha - neg, 0.0)
        assert np.isclose(emb.loss_contrastive(trip, params, SMALL, alpha), want)
    # anchor == positive and a negative beyond the margin -> exactly 0
    same = emb.Triplet(trip.anchor, trip.anchor, trip.negative)
    assert emb.loss_contrastive(same, params, SMALL, alpha=neg / 2) == 0.0
    # all three identical -> alpha
    ident = emb.Triplet(trip.anchor, trip.anchor, trip.anchor)
    assert np.isclose(emb.loss_contrastive(ident, params, SMALL, alpha=0.5), 0.5)


def test_loss_contrastive_rejects_nonpositive_alpha():
    params = _rand_params(TINY)
    trip = _rand_triplet(TINY, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        emb.loss_contrastive(trip, params, TINY, alpha=0.0)


def test_loss_total_is_sum_of_components():
    rng = np.random.default_rng(6)
    params = _rand_params(TINY, 6)
    trip = _rand_triplet(TINY, rng)
    total = emb.loss_total(trip, params, TINY)
    want = emb.loss_autoencoder(trip.anchor, params, TINY) + \
        emb.loss_contrastive(trip, params, TINY)
    assert np.isclose(total, want, atol=1e-12)
    assert total >= 0.0


def test_losses_nonnegative_random():
    rng = np.random.default_rng(7)
    for seed in range(3):
        params = _rand_params(TINY, seed + 10)
        trip = _rand_triplet(TINY, rng)
        assert emb.loss_autoencoder(trip.anchor, params, TINY) >= 0.0
        assert emb.loss_contrastive(trip, params, TINY) >= 0.0
        assert emb.loss_total(trip, params, TINY) >= 0.0


def test_loss_autoencoder_gradient_matches_finite_differences():
    # spec-scale reduced configuration: 4x4x1 image, 2-d latent
    rng = np.random.default_rng(8)
    params = _rand_params(TINY, 3)
    im = _rand_image(TINY, rng)
    _, grads = emb.loss_autoencoder_grad(im, params, TINY)
    fd = finite_diff_params(lambda p: emb.loss_autoencoder(im, p, TINY), params)
    assert max_rel_err(grads, fd) <= 1e-3


@pytest.mark.parametrize("alpha", [0.2, 3.0])  # hinge inactive / active
def test_loss_total_gradient_matches_finite_differences(alpha):
    # seeds chosen so no ReLU pre-activation sits within the FD step of zero
    rng = np.random.default_rng(4)
    params = _rand_params(SMALL, 2)
    trip = _rand_triplet(SMALL, rng)
    _, grads = emb.loss_total_grad(trip, params, SMALL, alpha=alpha)

    def f(p):
        return emb.loss_total(trip, p, SMALL, alpha=alpha)

    fd = finite_diff_params(f, params)
    assert max_rel_err(grads, fd) <= 1e-3


def test_hinge_deadzone_kills_negative_branch_gradient():
    rng = np.random.default_rng(9)
    params = _rand_params(SMALL, 0)
    trip = _rand_triplet(SMALL, rng)
    za = emb.encode(trip.anchor, params, SMALL)
    zn = emb.encode(trip.negative, params, SMALL)
    alpha = np.linalg.norm(za - zn) / 2  # margin already satisfied
    assert alpha > 0
    loss, grads = emb.loss_total_grad(trip, params, SMALL, alpha=alpha)
    other = emb.Triplet(trip.anchor, trip.positive, _rand_image(SMALL, rng))
    zo = emb.encode(other.negative, params, SMALL)
    assert np.linalg.norm(za - zo) > alpha
    loss2, grads2 = emb.loss_total_grad(other, params, SMALL, alpha=alpha)
    # swapping one inactive negative for another changes nothing
    assert np.isclose(loss, loss2)
    for k in grads:
        assert np.allclose(grads[k], grads2[k], atol=1e-12)


# ---------------------------------------------------------------------------
# triplet sampling
# ---------------------------------------------------------------------------


def _unique_frame_dataset(lengths, config):
    """Frames whose constant pixel value encodes a global frame id."""
    total = sum(lengths)
    data, fid = [], 0
    for n in lengths:
        ep = np.zeros((n, config.height, config.width, config.channels))
        for t in range(n):
            ep[t] = fid / (total + 1)
            fid += 1
        data.append(ep)
    return data


def test_sample_triplets_two_frame_episode():
    data = _unique_frame_dataset([2], TINY)
    rng = np.random.default_rng(0)
    for trip in emb.sample_triplets(data, 16, rng):
        assert np.array_equal(trip.anchor, data[0][0])
        assert np.array_equal(trip.positive, data[0][1])


def test_sample_triplets_deterministic_under_seed():
    data = _unique_frame_dataset([4, 5], TINY)
    a = emb.sample_triplets(data, 12, np.random.default_rng(42))
    b = emb.sample_triplets(data, 12, np.random.default_rng(42))
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.anchor, tb.anchor)
        assert np.array_equal(ta.negative, tb.negative)


def test_sample_triplets_empty_dataset_errors():
    with pytest.raises(DatasetError):
        emb.sample_triplets([], 4, np.random.default_rng(0))
    with pytest.raises(DatasetError):
        emb.sample_triplets([np.zeros((1, 4, 4, 1))], 4, np.random.default_rng(0))


def test_negative_sampling_close_to_uniform():
    # 10 episodes x 10 frames; expected marginal computed by enumerating
    # every anchor's renormalized uniform respond over allowed negatives.
    lengths = [10] * 10
    n_frames = 100
    draws = 10_000
    rng = np.random.default_rng(2024)
    ep_a, t_a, ep_n, t_n = emb.sample_triplet_indices(np.array(lengths), draws, rng)

    frame_id = lambda e, t: 10 * e + t
    counts = np.zeros(n_frames)
    for e, t in zip(ep_n, t_n):
        counts[frame_id(e, t)] += 1

    anchors = [(e, t) for e in range(10) for t in range(9)]
    expected_p = np.zeros(n_frames)
    for (e, t) in anchors:
        allowed = np.ones(n_frames, bool)
        for dt in (-1, 0, 1):
            if 0 <= t + dt < 10:
                allowed[frame_id(e, t + dt)] = False
        expected_p[allowed] += 1.0 / allowed.sum()
    expected_p /= len(anchors)

    expect = draws * expected_p
    sigma = np.sqrt(draws * expected_p * (1 - expected_p))
    assert (np.abs(counts - expect) <= 3.2 * sigma).all()


def test_negative_never_adjacent_to_anchor():
    lengths = np.array([6, 3])
    rng = np.random.default_rng(5)
    ep_a, t_a, ep_n, t_n = emb.sample_triplet_indices(lengths, 500, rng)
    same = ep_a == ep_n
    assert (np.abs(t_n[same] - t_a[same]) > 1).all()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _toy_dataset(rng, n_eps=12, n_frames=6, config=TINY):
    data = []
    for _ in range(n_eps):
        base = rng.uniform(0.2, 0.8)
        ep = np.zeros((n_frames, config.height, config.width, config.channels))
        pos = rng.integers(0, config.width)
        for t in range(n_frames):
            ep[t, :, (pos + t) % config.width, :] = base
        data.append(ep)
    return data


@pytest.mark.slow
def test_train_embedding_decreases_holdout_loss():
    data = _toy_dataset(np.random.default_rng(0))
    cfg = emb.EmbeddingConfig(height=4, width=4, channels=1, latent_dim=2,
                              conv_channels=(2, 2, 2), epochs=30, batch_size=16)
    res = emb.train_embedding(data, cfg, seed=1)
    assert res.holdout_final < res.holdout_initial


def test_train_embedding_zero_epochs_is_identity():
    data = _toy_dataset(np.random.default_rng(1), n_eps=4)
    cfg = emb.EmbeddingConfig(height=4, width=4, channels=1, latent_dim=2,
                              conv_channels=(2, 2, 2), epochs=0)
    res = emb.train_embedding(data, cfg, seed=3)
    fresh = emb.init_embedding(cfg, np.random.default_rng(3))
    for k in fresh:
        assert np.array_equal(res.params[k], fresh[k])


def test_train_embedding_seed_determinism():
    data = _toy_dataset(np.random.default_rng(2), n_eps=5)
    cfg = emb.EmbeddingConfig(height=4, width=4, channels=1, latent_dim=2,
                              conv_channels=(2, 2, 2), epochs=2, batch_size=8)
    r1 = emb.train_embedding(data, cfg, seed=9)
    r2 = emb.train_embedding(data, cfg, seed=9)
    for k in r1.params:
        assert np.array_equal(r1.params[k], r2.params[k])


def test_param_count_deterministic():
    p1 = _rand_params(TINY, 0)
    p2 = _rand_params(TINY, 99)
    assert {k: v.shape for k, v in p1.items()} == {k: v.shape for k, v in p2.items()}
