import math

import numpy as np
import pytest

from armkit import armmodel, simenv
from armkit.armmodel import (ArmConfig, ArmModel, ArmOutputs, arm_loss,
                             clone_model, infer_episode_miso, infer_window,
                             load_checkpoint, mimo_pass_count,
                             miso_pass_count, save_checkpoint, train)
from armkit.errors import (ConfigurationError, ShapeError, TrainingError,
                           ValidationError)
from armkit.tensorcore import Tensor, grad_check
from armkit.tensorcore import tensor as T

from conftest import tiny_arm_config, tiny_sim_config


def _model(seed=123, **overrides):
    config = tiny_arm_config(**overrides)
    return ArmModel(config, np.random.default_rng(seed))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        tiny_arm_config(window=1)
    with pytest.raises(ConfigurationError):
        tiny_arm_config(width=30, heads=4)
    with pytest.raises(ConfigurationError):
        tiny_arm_config(lambda_int=-1.0)
    with pytest.raises(ConfigurationError):
        ArmConfig.from_dict({"window": 5, "bogus": 1})


def test_fuse_additivity(random_model):
    m = random_model
    cfg = m.config
    zero_v = np.zeros(cfg.d_vis)
    zero_s = np.zeros(cfg.d_state)
    fused = m.fuse(zero_v, zero_s, 1).data
    pv = m.proj_v(Tensor(zero_v)).data
    ps = m.proj_s(Tensor(zero_s)).data
    eg = m.embed_g(np.asarray(1)).data
    assert np.allclose(fused, pv + ps + eg, atol=1e-12)


def test_fuse_nonlinear(random_model):
    m = random_model
    cfg = m.config
    rng = np.random.default_rng(3)
    v = rng.normal(size=cfg.d_vis)
    s = np.zeros(cfg.d_state)
    base = m.fuse(np.zeros(cfg.d_vis), s, 0).data
    one = m.fuse(v, s, 0).data - base
    two = m.fuse(2 * v, s, 0).data - base
    assert not np.allclose(two, 2 * one, atol=1e-8)


def test_fuse_deterministic(random_model):
    m = random_model
    rng = np.random.default_rng(4)
    v = rng.normal(size=m.config.d_vis)
    s = rng.normal(size=m.config.d_state)
    assert np.array_equal(m.fuse(v, s, 0).data, m.fuse(v, s, 0).data)


def test_fuse_validation(random_model):
    m = random_model
    with pytest.raises(ShapeError):
        m.fuse(np.zeros(3), np.zeros(m.config.d_state), 0)
    with pytest.raises(ValidationError):
        m.fuse(np.zeros(m.config.d_vis), np.zeros(m.config.d_state), 99)


def test_encode_causality(random_model):
    m = random_model
    cfg = m.config
    rng = np.random.default_rng(5)
    xs = rng.normal(size=(1, cfg.window, cfg.width))
    h1 = m.encode(Tensor(xs)).data.copy()
    xs2 = xs.copy()
    xs2[:, -1, :] += rng.normal(size=cfg.width)
    h2 = m.encode(Tensor(xs2)).data
    assert np.array_equal(h1[:, :-1, :], h2[:, :-1, :])
    # perturbing the first position may change everything downstream
    xs3 = xs.copy()
    xs3[:, 0, :] += rng.normal(size=cfg.width)
    h3 = m.encode(Tensor(xs3)).data
    assert not np.allclose(h1[:, -1, :], h3[:, -1, :])


def test_encode_zero_layers_identity():
    m = _model(layers=0)
    rng = np.random.default_rng(6)
    xs = rng.normal(size=(2, m.config.window, m.config.width))
    out = m.encode(Tensor(xs)).data
    assert np.array_equal(out, xs)


def test_encode_row_count_checked(random_model):
    with pytest.raises(ShapeError):
        random_model.encode(Tensor(np.zeros((1, 3, 32))))


def test_heads_shapes(random_model):
    m = random_model
    W, d = m.config.window, m.config.width
    hs = Tensor(np.random.default_rng(7).normal(size=(W, d)))
    out = m.heads(hs)
    assert out.interval_logits.shape == (W - 1, 3)
    assert out.completion_prob.shape == (W,)
    assert ((out.completion_prob.data > 0)
            & (out.completion_prob.data < 1)).all()


def test_heads_identical_rows(random_model):
    m = random_model
    W, d = m.config.window, m.config.width
    row = np.random.default_rng(8).normal(size=d)
    hs = Tensor(np.tile(row, (W, 1)))
    out = m.heads(hs).interval_logits.data
    for i in range(1, W - 1):
        assert np.allclose(out[i], out[0], atol=1e-12)


def _targets_for(model, fill=1):
    W = model.config.window
    int_t = np.full((1, W - 1), fill, dtype=np.int64)
    comp_t = np.zeros((1, W))
    mask = np.ones((1, W))
    return int_t, comp_t, mask


def test_loss_uniform_logits_ln3(random_model):
    m = random_model
    W = m.config.window
    outputs = ArmOutputs(
        interval_logits=Tensor(np.zeros((1, W - 1, 3))),
        completion_prob=Tensor(np.full((1, W), 0.5)),
        hidden=Tensor(np.zeros((1, W, m.config.width))))
    int_t, comp_t, mask = _targets_for(m)
    values = arm_loss(outputs, int_t, comp_t, mask, m.config)
    assert values.interval == pytest.approx(math.log(3.0), rel=1e-12)


def test_loss_perfect_predictions_near_zero(random_model):
    m = random_model
    W = m.config.window
    logits = np.zeros((1, W - 1, 3))
    logits[..., 2] = 40.0  # confident "+1"
    outputs = ArmOutputs(
        interval_logits=Tensor(logits),
        completion_prob=Tensor(np.full((1, W), 1e-9)),
        hidden=Tensor(np.zeros((1, W, m.config.width))))
    int_t = np.full((1, W - 1), 2, dtype=np.int64)
    comp_t = np.zeros((1, W))
    mask = np.ones((1, W))
    values = arm_loss(outputs, int_t, comp_t, mask, m.config)
    assert values.total_value < 1e-6


def test_loss_lambda_linearity(random_model):
    m = random_model
    W = m.config.window
    rng = np.random.default_rng(9)
    outputs = ArmOutputs(
        interval_logits=Tensor(rng.normal(size=(1, W - 1, 3))),
        completion_prob=Tensor(rng.uniform(0.1, 0.9, size=(1, W))),
        hidden=Tensor(np.zeros((1, W, m.config.width))))
    int_t, comp_t, mask = _targets_for(m)

    def value(li, ls):
        cfg = tiny_arm_config(lambda_int=li, lambda_succ=ls)
        return arm_loss(outputs, int_t, comp_t, mask, cfg).total_value

    l_int = value(1.0, 0.0)
    l_succ = value(0.0, 1.0)
    # exact linearity at power-of-two weights
    assert value(2.0, 0.0) == 2.0 * l_int
    assert value(0.0, 4.0) == 4.0 * l_succ
    assert value(2.0, 1.0) == 2.0 * l_int + l_succ


def test_loss_ignores_padded_targets(random_model):
    m = random_model
    W = m.config.window
    rng = np.random.default_rng(10)
    outputs = ArmOutputs(
        interval_logits=Tensor(rng.normal(size=(1, W - 1, 3))),
        completion_prob=Tensor(rng.uniform(0.2, 0.8, size=(1, W))),
        hidden=Tensor(np.zeros((1, W, m.config.width))))
    int_t = np.array([[1, 2, -1, -1]])
    comp_t = np.array([[0.0, 0.0, 0.0, 0.0, 0.0]])
    mask = np.array([[1.0, 1.0, 1.0, 0.0, 0.0]])
    base = arm_loss(outputs, int_t, comp_t, mask, m.config)
    comp_t2 = comp_t.copy()
    comp_t2[0, 3:] = 1.0  # only padded positions change
    flipped = arm_loss(outputs, int_t, comp_t2, mask, m.config)
    assert base.total_value == flipped.total_value


def test_loss_all_padded_rejected(random_model):
    m = random_model
    W = m.config.window
    outputs = ArmOutputs(
        interval_logits=Tensor(np.zeros((1, W - 1, 3))),
        completion_prob=Tensor(np.full((1, W), 0.5)),
        hidden=Tensor(np.zeros((1, W, m.config.width))))
    with pytest.raises(ValidationError):
        arm_loss(outputs, np.full((1, W - 1), -1), np.zeros((1, W)),
                 np.zeros((1, W)), m.config)


def test_loss_no_labels_only_completion(random_model):
    m = random_model
    W = m.config.window
    outputs = ArmOutputs(
        interval_logits=Tensor(np.zeros((1, W - 1, 3))),
        completion_prob=Tensor(np.full((1, W), 0.3)),
        hidden=Tensor(np.zeros((1, W, m.config.width))))
    int_t = np.full((1, W - 1), -1, dtype=np.int64)
    values = arm_loss(outputs, int_t, np.zeros((1, W)), np.ones((1, W)),
                      m.config)
    assert values.interval == 0.0
    assert values.total_value == pytest.approx(values.completion)


def test_full_model_gradcheck():
    config = ArmConfig(window=3, stride=2, width=8, layers=1, heads=2,
                       ff_mult=2, d_vis=4, d_state=5, vocab_size=2,
                       batch_size=2)
    model = ArmModel(config, np.random.default_rng(21))
    rng = np.random.default_rng(22)
    vis = rng.normal(size=(2, 3, 4))
    pro = rng.normal(size=(2, 3, 5))
    g = np.array([0, 1])
    int_t = np.array([[0, 2], [1, -1]])
    comp_t = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    mask = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])

    def loss():
        out = model.forward(vis, pro, g)
        return arm_loss(out, int_t, comp_t, mask, config).total

    err = grad_check(loss, model.named_parameters(), eps=1e-5)
    assert err < 1e-4, f"full-model grad error {err}"


@pytest.fixture(scope="module")
def trained(tiny_trained):
    return tiny_trained


def test_train_converges_tiny_separable(tmp_path):
    # minimal separable dataset: 200 steps take L_int below 0.1
    from armkit.trajdata import EpisodeStore
    from armkit.labeling import label_dataset_oracle
    store = EpisodeStore.create(tmp_path / "sep")
    for ep in simenv.gen_dataset({"expert": 2, "failure": 1}, 3,
                                 tiny_sim_config()):
        store.write_episode(ep)
    labels = label_dataset_oracle(store, stride=4)
    config = tiny_arm_config(lr=1e-2, width=16, heads=2, batch_size=64)
    result = train(config, store, labels, seed=2, steps=200)
    tail = [row[2] for row in result.trace[-20:]]
    assert np.mean(tail) < 0.1, f"final interval loss {np.mean(tail)}"


def test_trained_model_accurate(trained, tiny_store, tiny_labels):
    acc = armmodel.interval_accuracy(trained.model, tiny_store, tiny_labels)
    assert acc > 0.9


def test_train_deterministic(tiny_store, tiny_labels):
    config = tiny_arm_config()
    a = train(config, tiny_store, tiny_labels, seed=12, steps=40)
    b = train(config, tiny_store, tiny_labels, seed=12, steps=40)
    assert a.trace == b.trace
    assert a.checkpoint_id == b.checkpoint_id


def test_train_validations(tiny_store, tiny_labels, tmp_path):
    config = tiny_arm_config()
    with pytest.raises(ValidationError):
        train(config, tiny_store, [], seed=1, steps=5)
    from armkit.trajdata import EpisodeStore
    lonely = EpisodeStore.create(tmp_path / "lonely")
    lonely.write_episode(simenv.gen_episode(tiny_sim_config(), "expert", 1))
    with pytest.raises(ValidationError):
        train(config, lonely, tiny_labels, seed=1, steps=5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_reported(tiny_store, tiny_labels):
    config = tiny_arm_config(lr=1e6)
    with pytest.raises(TrainingError):
        train(config, tiny_store, tiny_labels, seed=13, steps=60)


def test_lambda_int_zero_keeps_interval_at_chance(tiny_store, tiny_labels):
    config = tiny_arm_config(lambda_int=0.0)
    result = train(config, tiny_store, tiny_labels, seed=14, steps=150)
    acc = armmodel.interval_accuracy(result.model, tiny_store, tiny_labels,
                                     balanced=True)
    assert 0.15 <= acc <= 0.55


def test_checkpoint_round_trip(trained, tmp_path):
    path = tmp_path / "arm.ckpt"
    ckpt_id = save_checkpoint(trained.model, path)
    back = load_checkpoint(path)
    assert back.checkpoint_id == ckpt_id
    assert back.config == trained.model.config
    for k, v in trained.model.state_dict().items():
        assert np.array_equal(back.state_dict()[k], v)


def test_infer_window_deterministic(trained, tiny_cfg):
    ep = simenv.gen_episode(tiny_cfg, "expert", 5)
    W = trained.model.config.window
    stride = trained.model.config.stride
    idx = [t * stride for t in range(W)]
    out1 = infer_window(trained.model, ep.vis[idx], ep.proprio[idx])
    out2 = infer_window(trained.model, ep.vis[idx], ep.proprio[idx])
    assert np.array_equal(out1["interval_logits"], out2["interval_logits"])
    assert out1["completion_prob"].shape == (W,)
    assert out1["interval_logits"].shape == (W - 1, 3)


def test_infer_window_shape_validation(trained):
    with pytest.raises(ValidationError):
        infer_window(trained.model, np.zeros((3, 16)), np.zeros((5, 9)))


def test_padded_window_full_outputs(trained, tiny_cfg):
    ep = simenv.gen_episode(tiny_cfg, "expert", 5)
    W = trained.model.config.window
    idx = [0, 4, 8, 8, 8]  # tail replicated
    out = infer_window(trained.model, ep.vis[idx], ep.proprio[idx])
    assert out["completion_prob"].shape == (W,)


def test_batched_matches_sequential(trained, tiny_cfg):
    from armkit.armmodel import infer_windows_batch
    ep = simenv.gen_episode(tiny_cfg, "expert", 5)
    model32 = clone_model(trained.model, np.float32)
    stride = trained.model.config.stride
    W = trained.model.config.window
    starts = [0, 3, 7]
    vis_b = np.stack([ep.vis[[(s + i) * stride for i in range(W)]]
                      for s in starts])
    pro_b = np.stack([ep.proprio[[(s + i) * stride for i in range(W)]]
                      for s in starts])
    g = np.zeros(len(starts), dtype=np.int64)
    logits_b, comp_b = infer_windows_batch(model32, vis_b, pro_b, g)
    for row, s in enumerate(starts):
        single = infer_window(model32, vis_b[row], pro_b[row])
        assert np.abs(single["interval_logits"] - logits_b[row]).max() < 1e-5
        assert np.abs(single["completion_prob"] - comp_b[row]).max() < 1e-5


def test_miso_pass_counts(trained, tiny_cfg):
    assert miso_pass_count(100, 5) == 96
    assert mimo_pass_count(100, 5) == 20
    assert miso_pass_count(3, 5) == 1
    ep = simenv.gen_episode(tiny_cfg, "expert", 5)
    out = infer_episode_miso(trained.model, ep)
    t_sub = math.ceil(len(ep) / trained.model.config.stride)
    assert out.forward_passes == max(1, t_sub - 5 + 1)
    assert out.positions.shape[0] == t_sub - 5 + 1
    assert out.deltas.shape == out.positions.shape


def test_benchmark_modes(trained, tiny_cfg):
    ep = simenv.gen_episode(tiny_cfg, "expert", 5)
    result = armmodel.benchmark_modes(trained.model, ep, repeats=2)
    t_sub = math.ceil(len(ep) / trained.model.config.stride)
    assert result["mimo_forward_passes"] == mimo_pass_count(t_sub, 5)
    assert result["miso_forward_passes"] == miso_pass_count(t_sub, 5)
    assert result["mimo_seconds"] > 0 and result["miso_seconds"] > 0
