import numpy as np
import pytest

from morphine_rl import qnet, trainer
from morphine_rl.mdp import Normalizer, TransitionSet
from morphine_rl.qnet import Architecture, QParams
from morphine_rl.trainer import TrainConfig, compute_target, train, validate

import toy_mdp

ARCH2 = Architecture(n_inputs=1, hidden=1, stream_hidden=1, n_actions=2)


def linear_net(adv_weights, value_bias=0.0):
    """1-input net whose Q-values are value_bias + centered (x * adv_weights) for x > 0."""
    return QParams(ARCH2, {
        "W1": np.ones((1, 1)), "b1": np.zeros(1), "W2": np.ones((1, 1)), "b2": np.zeros(1),
        "Wv1": np.zeros((1, 1)), "bv1": np.zeros(1), "Wv2": np.zeros((1, 1)), "bv2": np.array([value_bias]),
        "Wa1": np.ones((1, 1)), "ba1": np.zeros(1), "Wa2": np.array([adv_weights], dtype=float), "ba2": np.zeros(2),
    })


def test_double_dqn_target_by_hand():
    # s' = 1: online Q = (-1, 1) picks action 1; target Q = 2 + (3, -3) = (5, -1) -> evaluates -1
    online = linear_net([-1.0, 1.0])
    target = linear_net([3.0, -3.0], value_bias=2.0)
    y = compute_target(online, target, np.array([0.2]), np.array([[1.0]]), np.array([False]), 0.9)
    assert y == pytest.approx([0.2 + 0.9 * -1.0])
    # vanilla max over the target net would use 5 instead
    vanilla = 0.2 + 0.9 * qnet.forward(target, np.array([[1.0]])).q_values.max()
    assert vanilla == pytest.approx(0.2 + 0.9 * 5.0)
    assert y[0] != pytest.approx(vanilla)


def test_terminal_and_myopic_targets():
    online = qnet.init_params(rng=0)
    target = qnet.init_params(rng=1)
    rng = np.random.default_rng(0)
    r = rng.uniform(-1, 1, 6)
    s2 = rng.normal(size=(6, 19))
    term = np.array([True, False, True, False, True, False])
    y = compute_target(online, target, r, s2, term, 0.99)
    np.testing.assert_array_equal(y[term], r[term])
    assert not np.allclose(y[~term], r[~term])
    np.testing.assert_array_equal(compute_target(online, target, r, s2, np.zeros(6, bool), 0.0), r)


def test_config_validation_and_mapping():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig.from_mapping({"gamma": "0.95", "batch_size": "16", "prioritized": "no",
                                    "huber_delta": "none", "unrelated": "x"})
    assert (cfg.gamma, cfg.batch_size, cfg.prioritized, cfg.huber_delta) == (0.95, 16, False, None)
    assert TrainConfig().gamma == 0.99 and TrainConfig().batch_size == 32


def test_beta_schedule():
    cfg = TrainConfig(total_steps=100)
    assert cfg.beta(0) == 0.4 and cfg.beta(100) == 1.0
    assert cfg.beta(50) == pytest.approx(0.7)


def test_zero_steps_returns_initialization():
    ts = toy_mdp.transitions(1)
    cfg = TrainConfig(total_steps=0, seed=4)
    res = train(ts, cfg)
    arch = Architecture(n_inputs=2, n_actions=2)
    assert qnet.params_equal(res.best, qnet.init_params(arch, np.random.default_rng(4)))
    assert res.log == []


def test_same_seed_same_log():
    ts = toy_mdp.transitions(2)
    cfg = TrainConfig(total_steps=300, target_sync_interval=50, eval_interval=100, seed=9)
    a = train(ts, cfg, validation=ts)
    b = train(ts, cfg, validation=ts)
    assert a.log_csv() == b.log_csv()
    assert qnet.params_equal(a.best, b.best) and qnet.params_equal(a.final, b.final)
    c = train(ts, TrainConfig(total_steps=300, target_sync_interval=50, eval_interval=100, seed=10), validation=ts)
    assert a.log_csv() != c.log_csv()


def test_log_columns():
    res = train(toy_mdp.transitions(1), TrainConfig(total_steps=10, eval_interval=5), validation=toy_mdp.transitions(1))
    lines = res.log_csv().splitlines()
    assert lines[0] == "step,loss,mean_q,beta,lr,val_metric"
    assert len(lines) == 11
    assert lines[1].endswith(",")  # no validation at step 1
    assert lines[5].split(",")[-1] != ""


def test_target_frozen_between_syncs():
    ts = toy_mdp.transitions(2)
    seen = []

    def on_sync(step, target):
        seen.append((step, target, target.flat.copy()))

    res = train(ts, TrainConfig(total_steps=250, target_sync_interval=60), on_sync=on_sync)
    assert res.target_syncs == [60, 120, 180, 240]
    assert [s for s, _, _ in seen] == res.target_syncs
    for _, target, snapshot in seen:
        np.testing.assert_array_equal(target.flat, snapshot)
    assert not np.array_equal(seen[0][2], seen[1][2])


def test_fixed_batch_overfit():
    decreasing = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        p = qnet.init_params(rng=rng)
        x = rng.normal(size=(32, 19))
        a = rng.integers(14, size=32)
        y = rng.uniform(-1, 1, 32)
        losses = []
        for _ in range(10):
            losses.append(qnet.weighted_loss(p, x, a, y))
            out = qnet.forward(p, x)
            td = out.q_values[np.arange(32), a] - y
            qnet.adam_update(p, qnet.backward(p, out, a, td), lr=1e-3)
        decreasing += all(b < a_ for a_, b in zip(losses, losses[1:]))
    assert decreasing >= 48


def test_validate_empty_set_reports_error():
    m = validate(qnet.init_params(rng=0), None, Normalizer.identity(19), 0.99)
    assert m.error and m.td_error is None
    empty = toy_mdp.transitions(1).subset(np.array([], dtype=int))
    assert validate(qnet.init_params(Architecture(n_inputs=2, n_actions=2), 0), empty, Normalizer.identity(2), 0.9).error


def test_training_lowers_validation_td_error():
    ts = toy_mdp.transitions(4)
    cfg = TrainConfig(gamma=toy_mdp.GAMMA, total_steps=3000, lr=1e-3, target_sync_interval=200, seed=0)
    res = train(ts, cfg)
    init = qnet.init_params(Architecture(n_inputs=2, n_actions=2), np.random.default_rng(0))
    before = validate(init, ts, res.normalizer, cfg.gamma).td_error
    after = validate(res.final, ts, res.normalizer, cfg.gamma).td_error
    assert after < before


def test_simulator_metric_is_deterministic():
    from morphine_rl.evaluation import simulate_policy

    def sim(params, norm):
        return simulate_policy(params, n_episodes=3, horizon=12, seed=5, normalizer=norm).mean_reward[0]

    p = qnet.init_params(rng=0)
    norm = Normalizer.identity(19)
    assert validate(p, None, norm, 0.99, sim).sim_return == validate(p, None, norm, 0.99, sim).sim_return


def test_best_checkpoint_selected_by_simulator():
    ts = toy_mdp.transitions(2)
    scores = iter([0.1, 0.5, 0.3, 0.2])
    res = train(ts, TrainConfig(total_steps=30, eval_interval=10), simulator=lambda p, n: next(scores))
    assert res.best_step == 10 and res.best_metric == 0.5


def test_divergence_aborts_with_last_good(tmp_path):
    ts = toy_mdp.transitions(2)
    bad = TransitionSet(ts.states, ts.actions, np.full(len(ts), np.inf), ts.next_states, ts.terminals, 2)
    with pytest.raises(trainer.TrainingDiverged) as info:
        train(bad, TrainConfig(total_steps=10, checkpoint_dir=str(tmp_path)))
    assert info.value.step == 1
    assert (tmp_path / "last_good.ckpt").exists()
    ck = qnet.load_checkpoint(tmp_path / "last_good.ckpt")
    assert qnet.params_equal(ck.params, info.value.last_good)


def test_checkpoint_dir_outputs(tmp_path):
    ts = toy_mdp.transitions(1)
    train(ts, TrainConfig(total_steps=5, checkpoint_dir=str(tmp_path)), validation=ts)
    assert (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "train_log.csv").read_text().startswith("step,loss")


def test_uniform_replay_path_runs():
    ts = toy_mdp.transitions(2)
    res = train(ts, TrainConfig(total_steps=50, prioritized=False, huber_delta=None))
    assert len(res.log) == 50
    assert all(row[3] == TrainConfig(total_steps=50).beta(row[0] - 1) for row in res.log)
