import math

import numpy as np
import pytest

from armkit import awbc, simenv
from armkit.awbc import (GainWeight, PolicyConfig, PolicyNet, awbc_loss,
                         build_chunks, eval_policy, gains, load_policy,
                         rollout, save_policy, train_policy,
                         weights_statistical, weights_threshold)
from armkit.errors import ConfigurationError, ValidationError
from armkit.reconstruct import ProgressCurve
from armkit.simenv import Action
from armkit.tensorcore import Tensor

from conftest import tiny_sim_config


def test_policy_config_validation():
    with pytest.raises(ConfigurationError):
        PolicyConfig(horizon=0)
    with pytest.raises(ConfigurationError):
        PolicyConfig(weighting="magic")
    with pytest.raises(ConfigurationError):
        PolicyConfig.from_dict({"weighting": "none", "bogus": 3})


def test_gain_direct_evaluation():
    # (0.55 - 0.50) * 400 / 500 = 0.04
    p = np.full(400, 0.50)
    p[8:] = 0.55
    out = gains(p, horizon=8, length=400, mean_length=500.0)
    assert out[0] == (0, pytest.approx(0.04, abs=1e-12))


def test_gain_unit_scale():
    rng = np.random.default_rng(0)
    p = np.sort(rng.uniform(0, 1, 120))
    out = gains(p, horizon=10, length=120, mean_length=120.0)
    for t, dg in out:
        end = min(t + 10, 119)
        assert dg == pytest.approx(p[end] - p[t], abs=1e-12)


def test_gain_flat_curve_zero():
    p = np.full(64, 0.3)
    assert all(dg == 0.0 for _, dg in gains(p, 8, 64, 80.0))


def test_gain_tiles_episode():
    p = np.linspace(0, 1, 100)
    out = gains(p, horizon=8, length=100, mean_length=100.0)
    assert [t for t, _ in out] == list(range(0, 100, 8))


def test_gain_short_episode_fallback():
    p = np.linspace(0, 1, 5)
    with pytest.warns(UserWarning):
        out = gains(p, horizon=8, length=5, mean_length=10.0)
    assert len(out) == 1
    assert out[0] == (0, pytest.approx(0.5))


def test_gain_accepts_progress_curve():
    curve = ProgressCurve(episode_id="e", P=np.linspace(0, 1, 11),
                          anchored=True, anchor_index=10,
                          raw_cumsum=np.arange(11), stride=4)
    out = gains(curve, horizon=8, length=41, mean_length=41.0)
    assert len(out) == math.ceil(41 / 8)


def test_weights_statistical_reference_batch():
    batch = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    w = weights_statistical(batch)
    # mu=0.3, sigma=sqrt(0.02): the mean maps to the midpoint,
    # the extremes to (2 +/- sqrt(2))/4
    assert w[2] == pytest.approx(0.5, abs=1e-6)
    assert w[4] == pytest.approx((2 + math.sqrt(2)) / 4, abs=1e-4)
    assert w[0] == pytest.approx((2 - math.sqrt(2)) / 4, abs=1e-4)
    assert w[4] == pytest.approx(0.8536, abs=1e-4)
    assert w[0] == pytest.approx(0.1464, abs=1e-4)


def test_weights_clamp_floor():
    batch = np.array([0.0, 0.0, 0.0, 0.0, 10.0])
    w = weights_statistical(batch)
    assert w.min() >= 0.0 and w.max() <= 1.0
    # |z| in an n-batch is bounded by (n-1)/sqrt(n), so crossing 2 sigma
    # needs a big enough batch around the outlier
    below = np.array([-100.0] + [1.0, 1.1, 0.9, 1.05] * 3)
    w2 = weights_statistical(below)
    assert below[0] < below.mean() - 2 * below.std()
    assert w2[0] == 0.0


def test_weights_degenerate_batch():
    w = weights_statistical(np.full(7, 0.42))
    assert np.allclose(w, 0.5)


def test_weights_empty_batch_rejected():
    with pytest.raises(ValidationError):
        weights_statistical(np.array([]))


def test_weights_properties_random_batches():
    rng = np.random.default_rng(11)
    for _ in range(300):
        n = int(rng.integers(2, 40))
        g = rng.normal(rng.uniform(-1, 1), rng.uniform(0.05, 2.0), size=n)
        w = weights_statistical(g)
        assert (w >= 0).all() and (w <= 1).all()
        # monotone in the gain
        order = np.argsort(g)
        assert (np.diff(w[order]) >= -1e-12).all()
        # constant shift leaves weights unchanged
        w_shift = weights_statistical(g + 3.7)
        assert np.abs(w - w_shift).max() < 1e-9
        # positive scaling holds up to the eps term
        w_scale = weights_statistical(g * 4.0)
        assert np.abs(w - w_scale).max() < 1e-3


def test_weights_mean_maps_to_half():
    rng = np.random.default_rng(12)
    for _ in range(200):
        g = rng.normal(0, rng.uniform(0.2, 2.0), size=16)
        g = np.append(g, g.mean())  # appending the mean barely moves mu
        w = weights_statistical(g)
        assert w[-1] == pytest.approx(0.5, abs=1e-6)


def test_weights_threshold_rules():
    g = np.array([0.02, -0.03, 0.005, 0.0, 0.010001, 0.01])
    w = weights_threshold(g)
    assert list(w) == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]


def test_awbc_loss_zero_weights():
    rng = np.random.default_rng(13)
    policy = PolicyNet(PolicyConfig(horizon=4, hidden=(16,)), 6, rng)
    obs = rng.normal(size=(5, 6))
    acts = rng.integers(0, 3, size=(5, 4))
    logits = policy.logits(obs)
    loss = awbc_loss(logits, acts, np.zeros(5))
    assert float(loss.data) == 0.0
    loss.backward()
    for p in policy.named_parameters().values():
        assert p.grad is None or np.all(p.grad == 0.0)


def test_awbc_loss_unit_weights_is_bc():
    rng = np.random.default_rng(14)
    policy = PolicyNet(PolicyConfig(horizon=4, hidden=(16,)), 6, rng)
    obs = rng.normal(size=(5, 6))
    acts = rng.integers(0, 3, size=(5, 4))
    logits = policy.logits(obs)
    weighted = float(awbc_loss(logits, acts, np.ones(5)).data)
    # plain BC: mean over chunks of the chunk NLL
    z = logits.data
    lse = np.log(np.exp(z - z.max(-1, keepdims=True)).sum(-1)) \
        + z.max(-1, keepdims=True)[..., 0]
    picked = np.take_along_axis(z, acts[..., None], axis=-1)[..., 0]
    nll = (lse - picked).sum(axis=1).mean()
    assert weighted == pytest.approx(nll, rel=1e-12)


def test_awbc_loss_linear_in_weights():
    rng = np.random.default_rng(15)
    policy = PolicyNet(PolicyConfig(horizon=3, hidden=(8,)), 4, rng)
    obs = rng.normal(size=(6, 4))
    acts = rng.integers(0, 3, size=(6, 3))
    w = rng.uniform(0, 1, size=6)
    a = float(awbc_loss(policy.logits(obs), acts, w).data)
    b = float(awbc_loss(policy.logits(obs), acts, 2.0 * w).data)
    assert b == pytest.approx(2.0 * a, rel=1e-12)


def test_awbc_loss_misaligned_rejected():
    rng = np.random.default_rng(16)
    policy = PolicyNet(PolicyConfig(horizon=3, hidden=(8,)), 4, rng)
    logits = policy.logits(rng.normal(size=(6, 4)))
    with pytest.raises(ValidationError):
        awbc_loss(logits, rng.integers(0, 3, size=(6, 3)), np.ones(5))


def _store_with(tmp_path, spec, cfg, seed=21):
    from armkit.trajdata import EpisodeStore
    store = EpisodeStore.create(tmp_path / "pstore")
    for ep in simenv.gen_dataset(spec, seed, cfg):
        store.write_episode(ep)
    return store


def test_build_chunks_shapes(tmp_path):
    cfg = tiny_sim_config()
    store = _store_with(tmp_path, {"expert": 2, "failure": 1}, cfg)
    config = PolicyConfig(horizon=4, epochs=1)
    data = build_chunks(store, None, config)
    assert data.obs.shape[1] == cfg.feature_dim + cfg.proprio_dim
    assert data.actions.shape == (data.obs.shape[0], 4)
    assert data.gains.shape == (data.obs.shape[0],)
    total = sum(math.ceil(store.manifest_record(i)["length"] / 4)
                for i in store.episode_ids())
    assert data.obs.shape[0] == total


def test_train_policy_deterministic(tmp_path):
    cfg = tiny_sim_config()
    store = _store_with(tmp_path, {"expert": 2, "failure": 1}, cfg)
    config = PolicyConfig(horizon=4, epochs=2, hidden=(32,), lr=3e-3)
    a = train_policy(config, store, None, seed=5)
    b = train_policy(config, store, None, seed=5)
    assert a.trace == b.trace
    for k, v in a.policy.state_dict().items():
        assert np.array_equal(v, b.policy.state_dict()[k])


def test_policy_checkpoint_round_trip(tmp_path):
    cfg = tiny_sim_config()
    store = _store_with(tmp_path, {"expert": 1, "failure": 1}, cfg)
    config = PolicyConfig(horizon=4, epochs=1, hidden=(16,))
    result = train_policy(config, store, None, seed=6)
    path = tmp_path / "policy.ckpt"
    save_policy(result.policy, path)
    back = load_policy(path)
    assert back.config == config
    obs = np.zeros(cfg.feature_dim + cfg.proprio_dim)
    assert np.array_equal(back.act(obs), result.policy.act(obs))


def test_eval_policy_scripted_expert():
    cfg = tiny_sim_config()

    def always_advance(obs):
        return np.full(4, int(Action.ADVANCE))

    rate, mean_steps = eval_policy(always_advance, cfg, episodes=10,
                                   base_seed=3)
    assert rate == 1.0
    assert mean_steps == cfg.total_units


def test_eval_policy_random_near_zero():
    cfg = tiny_sim_config()
    rng = np.random.default_rng(9)

    def random_policy(obs):
        return rng.integers(0, 3, size=4)

    rate, _ = eval_policy(random_policy, cfg, episodes=10, base_seed=4)
    assert rate <= 0.1


def test_eval_policy_deterministic(tmp_path):
    cfg = tiny_sim_config()
    store = _store_with(tmp_path, {"expert": 2, "failure": 1}, cfg)
    config = PolicyConfig(horizon=4, epochs=2, hidden=(32,), lr=3e-3,
                          weighting="none")
    result = train_policy(config, store, None, seed=7)
    a = eval_policy(result.policy, cfg, episodes=8, base_seed=11)
    b = eval_policy(result.policy, cfg, episodes=8, base_seed=11)
    assert a == b


def test_bc_on_expert_data_succeeds(tmp_path):
    cfg = tiny_sim_config()
    store = _store_with(tmp_path, {"expert": 6, "failure": 1}, cfg)
    config = PolicyConfig(horizon=4, epochs=6, hidden=(64, 64), lr=2e-3,
                          weighting="none")
    result = train_policy(config, store, None, seed=8,
                          episode_ids=[i for i in store.episode_ids()
                                       if i.startswith("expert")])
    rate, _ = eval_policy(result.policy, cfg, episodes=20, base_seed=12)
    assert rate >= 0.95


def test_compute_gain_weights_export(tmp_path):
    cfg = tiny_sim_config()
    store = _store_with(tmp_path, {"expert": 1, "failure": 1}, cfg)
    config = PolicyConfig(horizon=4, epochs=1, weighting="statistical")
    data = build_chunks(store, None, config)
    rows = awbc.compute_gain_weights(data, config)
    assert len(rows) == data.gains.shape[0]
    assert all(0.0 <= r.weight <= 1.0 for r in rows)
    assert all(r.b_lower == pytest.approx(r.mu - 2 * r.sigma) for r in rows)
    out = tmp_path / "weights.csv"
    awbc.export_gain_weights_csv(rows, out)
    assert out.read_text().startswith("episode_id,t,delta_g,weight")
