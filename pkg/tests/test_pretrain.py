import csv

import numpy as np
import pytest

from adac import dataset as ds
from adac import nn
from adac.diffusion import make_behavior_model
from adac.envs.maze import DEFAULT_ROUTE_MIX, collect_scripted_dataset, desk_maze
from adac.pretrain import (PretrainConfig, TransitionModel, ValueModel, expectile_value_loss,
                           expectile_weights, load_models, pretrain_all, save_models, split_indices,
                           transition_loss, transition_rmse)
from adac.verify import exact_expectile


def value_model(obs=3, tau=0.9, seed=0, widths=(8, 8)):
    return ValueModel(nn.init_params(nn.NetSpec((obs, *widths, 1)), np.random.default_rng(seed), np.float64), tau)


def transition_model(obs=3, act=2, seed=0):
    return TransitionModel(nn.init_params(nn.NetSpec((obs + act, 8, obs)), np.random.default_rng(seed), np.float64))


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_value_model_validation():
    with pytest.raises(ValueError):
        ValueModel(nn.init_params(nn.NetSpec((3, 2)), np.random.default_rng(0)))
    with pytest.raises(ValueError):
        value_model(tau=1.0)
    with pytest.raises(ValueError):
        PretrainConfig(value_target_rate=0.0)


def test_expectile_weights_direct_values():
    assert expectile_weights(np.array([1.0, -1.0]), 0.9).tolist() == [0.9, pytest.approx(0.1)]


def test_half_expectile_loss_is_half_mse():
    m = value_model(tau=0.5)
    rng = np.random.default_rng(1)
    s, s2 = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    r, d = rng.normal(size=10), rng.random(10) < 0.3
    u = r + 0.9 * (1 - d) * m(s2) - m(s)
    assert expectile_value_loss(m, s, r, s2, d, 0.9) == pytest.approx(0.5 * np.mean(u * u), rel=1e-12)


def test_zero_value_zero_reward_loss_is_zero():
    m = value_model()
    m.net.values[:] = 0.0
    s = np.ones((4, 3))
    assert expectile_value_loss(m, s, np.zeros(4), s, np.zeros(4), 0.99) == 0.0


def test_done_masks_the_bootstrap():
    m = value_model()
    s, s2 = np.zeros((1, 3)), np.ones((1, 3))
    v = m(s)[0]
    loss = expectile_value_loss(m, s, [1.0], s2, [True], 0.99)
    u = 1.0 - v
    assert loss == pytest.approx(expectile_weights(u, 0.9) * u * u, rel=1e-12)


def test_value_loss_gradient_finite_difference():
    m = value_model()
    rng = np.random.default_rng(2)
    s, s2 = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    r, d = rng.normal(size=16), rng.random(16) < 0.2
    frozen = m.net.copy()      # the next-state term is a constant, so differentiate against a frozen copy
    _, g = expectile_value_loss(m, s, r, s2, d, 0.9, return_grad=True, target=frozen)
    fd = nn.finite_difference_gradient(
        m.net, lambda p: expectile_value_loss(m, s, r, s2, d, 0.9, params=p, target=frozen))
    assert rel_err(g, fd) < 1e-4


def test_value_loss_without_target_blocks_next_state_gradient():
    m = value_model()
    rng = np.random.default_rng(3)
    s, s2, r, d = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), rng.normal(size=8), np.zeros(8)
    _, g_self = expectile_value_loss(m, s, r, s2, d, 0.9, return_grad=True)
    _, g_frozen = expectile_value_loss(m, s, r, s2, d, 0.9, return_grad=True, target=m.net.copy())
    assert np.array_equal(g_self, g_frozen)


def test_transition_loss_values_and_gradient():
    m = transition_model()
    m.net.values[:] = 0.0
    rng = np.random.default_rng(4)
    s, a = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    s2 = rng.normal(size=(5, 3))
    s2 /= np.linalg.norm(s2, axis=1, keepdims=True)
    assert transition_loss(m, s, a, s2) == pytest.approx(1.0)

    m = transition_model(seed=1)
    _, g = transition_loss(m, s, a, s2, return_grad=True)
    fd = nn.finite_difference_gradient(m.net, lambda p: transition_loss(m, s, a, s2, params=p))
    assert rel_err(g, fd) < 1e-4
    assert m(s[0], a[0]).shape == (3,)


def test_linear_value_matches_exact_expectile():
    # two one-hot states; state 1 ends with reward 0 or 1 (p = 0.3 / 0.7), state 0 either
    # moves to state 1 for free or ends with reward 0.5
    tau, gamma = 0.8, 0.9
    e0, e1 = [1.0, 0.0], [0.0, 1.0]
    rows = [(e1, 0.0, e1, True)] * 3 + [(e1, 1.0, e1, True)] * 7 \
        + [(e0, 0.0, e1, False)] * 6 + [(e0, 0.5, e0, True)] * 4
    s, r, s2, d = (np.array(c, dtype=float) for c in zip(*rows))
    m = ValueModel(nn.init_params(nn.NetSpec((2, 1), activation="identity"), np.random.default_rng(0),
                                  np.float64), tau)
    m.net.values[:] = 0.0                      # V(s) = w . onehot(s) + b
    opt = nn.OptimizerState.for_params(m.net, learning_rate=0.01)
    for _ in range(6000):
        _, g = expectile_value_loss(m, s, r, s2, d, gamma, return_grad=True)
        nn.adamw_step(m.net, g, opt)
    v1 = exact_expectile([0.0, 1.0], [0.3, 0.7], tau)
    v0 = exact_expectile([gamma * v1, 0.5], [0.6, 0.4], tau)
    assert m(np.array([e1]))[0] == pytest.approx(v1, abs=1e-3)
    assert m(np.array([e0]))[0] == pytest.approx(v0, abs=1e-3)


def test_split_indices_partition():
    tr, ho = split_indices(100, 0.05, np.random.default_rng(0))
    assert len(ho) == 5 and len(tr) == 95
    assert sorted(np.concatenate([tr, ho]).tolist()) == list(range(100))


@pytest.fixture(scope="module")
def small_data():
    trajs = collect_scripted_dataset(desk_maze(), DEFAULT_ROUTE_MIX, 6, np.random.default_rng(0))
    return ds.OfflineDataset.from_trajectories(trajs)


def tiny_config(steps=0):
    return PretrainConfig(behavior_steps=steps, value_steps=steps, transition_steps=steps, batch_size=32,
                          log_interval=10, behavior_hidden=(16, 16), value_hidden=(16,),
                          transition_hidden=(16,), holdout_size=64)


def test_zero_steps_returns_initial_models(small_data):
    cfg = tiny_config(0)
    res = pretrain_all(small_data, cfg, np.random.default_rng(3))
    _, b_rng, v_rng, p_rng = np.random.default_rng(3).spawn(4)
    b = make_behavior_model(4, 2, b_rng, cfg.diffusion_steps, cfg.behavior_hidden, cfg.emb_dim)
    assert res.behavior.noise_net.checksum() == b.noise_net.checksum()
    assert res.value.net.checksum() == nn.init_params(nn.NetSpec((4, 16, 1)), v_rng).checksum()
    assert res.transition.net.checksum() == nn.init_params(nn.NetSpec((6, 16, 4)), p_rng).checksum()
    assert all(len(rows) == 1 for rows in res.logs.values())


def test_pretraining_is_deterministic_and_round_trips(small_data, tmp_path):
    a = pretrain_all(small_data, tiny_config(30), np.random.default_rng(1), log_dir=tmp_path)
    b = pretrain_all(small_data, tiny_config(30), np.random.default_rng(1))
    for x, y in zip(a, b):
        net_x = getattr(x, "noise_net", None) or x.net
        net_y = getattr(y, "noise_net", None) or y.net
        assert net_x.checksum() == net_y.checksum()
    save_models(a, tmp_path)
    c = load_models(tmp_path, tiny_config(30))
    assert c.value.net.checksum() == a.value.net.checksum()
    with open(tmp_path / "pretrain_value.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "train_loss", "holdout_loss"] and rows[-1][0] == "30"


def test_load_models_reports_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError, match="adac pretrain"):
        load_models(tmp_path, PretrainConfig())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        pretrain_all(ds.OfflineDataset.empty(4, 2), tiny_config(), np.random.default_rng(0))


@pytest.mark.slow
def test_desk_learning_curves_drop_tenfold():
    spec = desk_maze()
    trajs = collect_scripted_dataset(spec, DEFAULT_ROUTE_MIX, 100, np.random.default_rng(0))
    data = ds.fit_normalization(ds.OfflineDataset.from_trajectories(trajs))
    res = pretrain_all(data, PretrainConfig(), np.random.default_rng(0))
    for name in ("value", "transition"):
        rows = res.logs[name]
        assert rows[-1][2] * 10 <= rows[0][2], name
    raw_range = np.ptp(data.normalize(data.next_observations), axis=0)
    rmse = transition_rmse(res.transition, data, np.arange(0, len(data), 7))
    assert np.all(rmse < 0.05 * raw_range)
