import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmguard.envs import PLANAR_HOVER, TWO_LINK_ARM, EnvConfig
from wmguard.model import (
    PARAM_ORDER,
    ModelDims,
    ModelState,
    decode_obs,
    decode_reward,
    encode,
    init_params,
    param_shapes,
    prior_latent,
    sequence_step,
    zero_params,
)
from wmguard.policy import default_scripted, scripted_policy
from wmguard.training import (
    Adam,
    Batch,
    Episode,
    ReplayBuffer,
    SequenceSampler,
    TrainConfig,
    TrainingDiverged,
    clip_by_global_norm,
    collect_episode,
    compute_gradients,
    compute_loss,
    fit_world_model,
    train,
    write_metrics,
)

DIMS = ModelDims(d_obs=10, d_act=2, d_h=8, d_z=4, d_hidden=6)


def random_batch(seed, L=5, B=3, dims=DIMS):
    rng = np.random.default_rng(seed)
    return Batch(
        rng.normal(size=(L, B, dims.d_obs)),
        rng.uniform(-1, 1, size=(L - 1, B, dims.d_act)),
        rng.normal(size=(L - 1, B)),
    )


def random_params(seed, dims=DIMS, scale=0.5):
    rng = np.random.default_rng(seed)
    return {k: scale * rng.normal(size=s) for k, s in param_shapes(dims).items()}


def loss_oracle(p, batch, w_r, beta):
    """Sequence-by-sequence loop over the model's forward ops."""
    L, B, d = batch.obs.shape
    se_obs = se_rew = se_lat = 0.0
    for b in range(B):
        h = np.zeros(p["prior_w"].shape[0])
        for k in range(L):
            x = batch.obs[k, b]
            z = encode(p, x, h)
            s = ModelState(h, z)
            se_obs += float(np.sum((decode_obs(p, s) - x) ** 2))
            if k >= 1:
                se_rew += (float(decode_reward(p, s)) - batch.rewards[k - 1, b]) ** 2
                se_lat += float(np.sum((z - prior_latent(p, h)) ** 2))
            if k < L - 1:
                h = sequence_step(p, h, z, batch.actions[k, b])
    obs = se_obs / (L * B * d)
    rew = se_rew / ((L - 1) * B)
    lat = se_lat / ((L - 1) * B)
    return obs + w_r * rew + beta * lat, obs, rew, lat


def small_buffer(n=6, length=60, kind=PLANAR_HOVER, noise=0.01):
    cfg = EnvConfig(kind, episode_len=length, sensor_noise=noise)
    pol = scripted_policy(default_scripted(kind))
    buf = ReplayBuffer()
    for s in range(n):
        buf.add(collect_episode(cfg, pol, s))
    return buf


# --- episodes, buffer, sampler ----------------------------------------------


def test_episode_lengths():
    ep = collect_episode(EnvConfig(PLANAR_HOVER, episode_len=10), scripted_policy(default_scripted(PLANAR_HOVER)), 0)
    assert ep.observations.shape == (11, 10)
    assert ep.actions.shape == (10, 2) and ep.rewards.shape == (10,)
    assert ep.dones.tolist() == [False] * 9 + [True]


def test_episode_validation():
    with pytest.raises(ValueError):
        Episode(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        Episode(np.full((2, 2), np.nan), np.zeros((1, 2)), np.zeros(1), np.zeros(1))


def test_collect_is_deterministic():
    cfg = EnvConfig(TWO_LINK_ARM, episode_len=50, sensor_noise=0.01)
    pol = scripted_policy(default_scripted(TWO_LINK_ARM))
    a, b = collect_episode(cfg, pol, 4), collect_episode(cfg, pol, 4)
    assert a.observations.tobytes() == b.observations.tobytes()
    assert a.rewards.tobytes() == b.rewards.tobytes()


def test_scripted_planar_episodes_earn_positive_reward():
    cfg = EnvConfig(PLANAR_HOVER, sensor_noise=0.01)
    pol = scripted_policy(default_scripted(PLANAR_HOVER))
    totals = [collect_episode(cfg, pol, s).rewards.sum() for s in range(50)]
    assert np.mean(totals) > 0


def test_buffer_capacity_is_fifo():
    buf = ReplayBuffer(capacity=2)
    eps = [Episode(np.full((2, 1), float(i)), np.zeros((1, 1)), np.zeros(1), np.zeros(1)) for i in range(3)]
    for ep in eps:
        buf.add(ep)
    assert len(buf) == 2 and buf.episodes[0] is eps[1]


def test_sampler_covers_every_episode():
    buf = small_buffer(n=7, length=40)
    sampler = SequenceSampler(buf, seed=3)
    draws = [i for _ in range(10) for i, _ in sampler.sample(len(buf), 16)]
    counts = np.bincount(draws, minlength=len(buf))
    assert np.all(counts == 10)


def test_sampler_is_seeded():
    buf = small_buffer(n=4, length=40)
    a = SequenceSampler(buf, 1).sample(20, 16)
    b = SequenceSampler(buf, 1).sample(20, 16)
    assert a == b
    assert all(0 <= start <= 40 + 1 - 16 for _, start in a)


def test_batch_windows_are_aligned():
    buf = small_buffer(n=2, length=30)
    mean, std = buf.observation_stats()
    batch = Batch.from_windows(buf, [(1, 5)], 8, mean, std)
    ep = buf.episodes[1]
    np.testing.assert_array_equal(batch.obs[:, 0], (ep.observations[5:13] - mean) / std)
    np.testing.assert_array_equal(batch.actions[:, 0], ep.actions[5:12])
    np.testing.assert_array_equal(batch.rewards[:, 0], ep.rewards[5:12])


# --- loss ---------------------------------------------------------------------


def test_zero_params_zero_batch_zero_loss():
    p = zero_params(DIMS)
    batch = Batch(np.zeros((4, 2, 10)), np.zeros((3, 2, 2)), np.zeros((3, 2)))
    total, br = compute_loss(p, batch)
    assert (total, br.obs_recon, br.reward, br.latent_consistency) == (0.0, 0.0, 0.0, 0.0)
    grads, _ = compute_gradients(p, batch)
    assert all(np.all(g == 0) for g in grads.values())


def test_zero_params_unit_observations():
    p = zero_params(DIMS)
    batch = Batch(np.ones((4, 2, 10)), np.zeros((3, 2, 2)), np.zeros((3, 2)))
    _, br = compute_loss(p, batch)
    assert br.obs_recon == 1.0 and br.reward == 0.0 and br.latent_consistency == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_loss_matches_oracle(seed):
    p = random_params(seed)
    batch = random_batch(100 + seed)
    w_r, beta = 0.7, 1.3
    total, br = compute_loss(p, batch, w_r, beta)
    ref = loss_oracle(p, batch, w_r, beta)
    for got, want in zip((total, br.obs_recon, br.reward, br.latent_consistency), ref):
        assert abs(got - want) < 1e-10
    assert total == pytest.approx(br.obs_recon + w_r * br.reward + beta * br.latent_consistency, abs=1e-12)


def test_short_window_rejected():
    p = zero_params(DIMS)
    with pytest.raises(ValueError):
        compute_loss(p, Batch(np.zeros((1, 1, 10)), np.zeros((0, 1, 2)), np.zeros((0, 1))))


def test_doubling_targets_doubles_decoder_bias_gradient():
    """With zero params x_hat = 0, so d obs_recon / d dec_b2 = -2 sum(X) / |X|."""
    p = zero_params(DIMS)
    X = np.random.default_rng(0).normal(size=(2, 1, 10))
    base = Batch(X, np.zeros((1, 1, 2)), np.zeros((1, 1)))
    doubled = Batch(2.0 * X, np.zeros((1, 1, 2)), np.zeros((1, 1)))
    g1, _ = compute_gradients(p, base)
    g2, _ = compute_gradients(p, doubled)
    np.testing.assert_allclose(g1["dec_b2"], -2.0 * X.sum(axis=(0, 1)) / X[..., 0].size / 10, atol=1e-15)
    np.testing.assert_allclose(g2["dec_b2"], 2.0 * g1["dec_b2"], atol=1e-15)


# --- gradients ----------------------------------------------------------------


def central_difference(p, batch, name, idx, eps=1e-4, w_r=1.0, beta=1.0):
    orig = p[name][idx]
    p[name][idx] = orig + eps
    up, _ = compute_loss(p, batch, w_r, beta)
    p[name][idx] = orig - eps
    down, _ = compute_loss(p, batch, w_r, beta)
    p[name][idx] = orig
    return (up - down) / (2 * eps)


@pytest.mark.parametrize("name", PARAM_ORDER)
def test_gradient_matches_finite_differences_per_tensor(name):
    p = random_params(1)
    batch = random_batch(2, L=6)
    grads, _ = compute_gradients(p, batch, 0.8, 1.2)
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(4):
        idx = tuple(int(rng.integers(0, n)) for n in p[name].shape)
        fd = central_difference(p, batch, name, idx, w_r=0.8, beta=1.2)
        an = grads[name][idx]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-7) < 1e-4


def test_non_finite_gradients_raise():
    p = random_params(1)
    p["enc_w1"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        compute_gradients(p, random_batch(0))


# --- optimizer and training loop ---------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    out = Adam(p, 0.1).update(p, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(out["w"], [0.9, -1.9], atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.1, 100.0))
def test_clip_by_global_norm(values, max_norm):
    g = {"a": np.array(values)}
    clipped, norm = clip_by_global_norm(g, max_norm)
    assert norm == pytest.approx(np.linalg.norm(values))
    assert np.linalg.norm(clipped["a"]) <= max_norm * (1 + 1e-12) or np.linalg.norm(clipped["a"]) == pytest.approx(norm)


def test_zero_steps_leaves_params_unchanged():
    buf = small_buffer(n=2, length=40)
    p = init_params(DIMS, np.random.default_rng(0))
    out, metrics = train(p, buf, TrainConfig(train_steps=0, seq_len=16))
    assert metrics == []
    assert all(out[k].tobytes() == p[k].tobytes() for k in p)


def test_training_is_deterministic(tmp_path):
    buf = small_buffer(n=3, length=40)
    cfg = TrainConfig(train_steps=15, batch_size=4, seq_len=12, seed=5)
    runs = []
    for tag in ("a", "b"):
        p, metrics = train(init_params(DIMS, np.random.default_rng(0)), buf, cfg)
        write_metrics(metrics, tmp_path / f"{tag}.csv")
        runs.append(p)
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in PARAM_ORDER)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "total", "obs_recon", "reward", "latent_consistency", "grad_norm"]
    assert len(rows) == 16


def test_divergence_aborts_with_last_good_params():
    buf = small_buffer(n=2, length=40)
    p = init_params(DIMS, np.random.default_rng(0))
    p["dec_w2"][0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train(p, buf, TrainConfig(train_steps=5, batch_size=2, seq_len=8, seed=9))
    assert info.value.step == 0
    assert "seed 9" in str(info.value)
    assert info.value.last_good["dec_w2"][0, 0] == np.inf


def test_empty_buffer_rejected():
    with pytest.raises(ValueError):
        train(zero_params(DIMS), ReplayBuffer(), TrainConfig(train_steps=1))


@pytest.mark.parametrize("field,value", [("learning_rate", 0.0), ("batch_size", 0), ("seq_len", 1), ("grad_clip_norm", -1.0)])
def test_train_config_validation(field, value):
    with pytest.raises(ValueError):
        TrainConfig(**{field: value}).validate()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_held_out_loss_decreases(seed):
    buf = small_buffer(n=8, length=80)
    held = small_buffer(n=2, length=80)
    held.episodes = [collect_episode(EnvConfig(PLANAR_HOVER, episode_len=80, sensor_noise=0.01),
                                     scripted_policy(default_scripted(PLANAR_HOVER)), 1000 + i) for i in range(2)]
    dims = ModelDims(10, 2, d_h=16, d_z=4, d_hidden=16)
    model, _ = fit_world_model(buf, dims, TrainConfig(train_steps=200, batch_size=8, seq_len=16, seed=seed))
    batch = Batch.from_windows(held, [(0, 0), (1, 10)], 40, model.obs_mean, model.obs_std)
    init = init_params(dims, np.random.default_rng(seed))
    before, _ = compute_loss(init, batch)
    after, _ = compute_loss(model.params, batch)
    assert after < before
