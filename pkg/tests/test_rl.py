import math
from collections import Counter

import numpy as np
import pytest

from pseudopilot.model import init_model
from pseudopilot.nn import ConfigError, OptimConfig
from pseudopilot.pseudo import PseudoPool, init_candidate_set, assign_pseudo_labels
from pseudopilot.rl import (
    Agent, EpisodeOver, QNet, ReplayPool, RewardParams, StateError, Transition, TransitionLog,
    build_state, class_centers, delta_entropy, mean_entropy, metric, p_f, q_forward, q_target,
    q_targets, q_update, replay_insert, replay_sample, reward, run_episode, sample_metric,
    sample_vectors, select_action, state_length, td_loss,
)

from .gradcheck import check_param_grads
from .helpers import linear_model


def _setup(seed=0, K=4, d=16, n_u=40, n_c=16):
    rng = np.random.default_rng(seed)
    model = init_model((2, d), K, rng)
    Xt = rng.normal(size=(3 * K, 2))
    yt = np.repeat(np.arange(K), 3)
    Xu = rng.normal(size=(n_u, 2)) * 3
    pool = init_candidate_set(assign_pseudo_labels(model, Xu), n_c, seed)
    return model, Xt, yt, Xu, pool


def _unit_rows(model, X):
    out = []
    for x in X:
        f = model.features(x[None]).value[0]
        p = model.predict_proba(x[None])[0]
        out.append(np.concatenate([f / np.linalg.norm(f), p]))
    return np.array(out)


# state

def test_state_length_default_dims():
    assert state_length(16, 4, 16) == 480
    model, Xt, yt, Xu, pool = _setup()
    assert build_state(pool, Xt, yt, Xu, model).shape == (480,)


def test_state_blocks_match_loop_oracle():
    model, Xt, yt, Xu, pool = _setup(1)
    s = build_state(pool, Xt, yt, Xu, model)
    w = 16 + 4
    rows = _unit_rows(model, Xu[[i for i, _ in pool.slots]])
    np.testing.assert_allclose(s[:16 * w].reshape(16, w), rows, atol=1e-12)
    lab = s[16 * w:20 * w].reshape(4, w)
    tv = _unit_rows(model, Xt)
    for j in range(4):
        np.testing.assert_allclose(lab[j], tv[yt == j].mean(0), atol=1e-12)
    unl = s[20 * w:].reshape(4, w)
    uv = _unit_rows(model, Xu)
    pred = model.predict(Xu)
    for j in range(4):
        expected = uv[pred == j].mean(0) if (pred == j).any() else np.zeros(w)
        np.testing.assert_allclose(unl[j], expected, atol=1e-12)


def test_single_labeled_sample_block_is_that_sample():
    model, Xt, yt, Xu, pool = _setup(2)
    Xt, yt = Xt[[0, 3, 6, 9]], yt[[0, 3, 6, 9]]
    s = build_state(pool, Xt, yt, Xu, model)
    lab = s[16 * 20:20 * 20].reshape(4, 20)
    np.testing.assert_allclose(lab[2], _unit_rows(model, Xt[2:3])[0], atol=1e-12)


def test_consumed_slot_block_is_zero_and_positive_joins_labeled_part():
    model, Xt, yt, Xu, pool = _setup(3)
    i, c = pool.take_action(5)
    s = build_state(pool, Xt, yt, Xu, model)
    assert np.all(s[5 * 20:6 * 20] == 0.0)
    assert np.any(s[4 * 20:5 * 20] != 0.0)
    lab = s[16 * 20:20 * 20].reshape(4, 20)
    members = np.vstack([Xt[yt == c], Xu[i:i + 1]])
    np.testing.assert_allclose(lab[c], _unit_rows(model, members).mean(0), atol=1e-12)


def test_state_requires_every_labeled_class():
    model, Xt, yt, Xu, pool = _setup(4)
    with pytest.raises(StateError, match="class 3"):
        build_state(pool, Xt[yt < 3], yt[yt < 3], Xu, model)


def test_state_unnormalized_option_keeps_raw_features():
    model, Xt, yt, Xu, pool = _setup(5)
    raw, _ = sample_vectors(model, Xu[:3], normalize=False)
    np.testing.assert_allclose(raw[:, :16], model.features(Xu[:3]).value)


# class centers and p_f

def test_centers_without_positives_are_labeled_means():
    model, Xt, yt, Xu, _ = _setup(6)
    z = class_centers(Xt, yt, Xu, [], model)
    F = model.features(Xt).value
    for j in range(4):
        np.testing.assert_allclose(z[j], F[yt == j].mean(0), atol=1e-12)


def test_centers_with_one_positive():
    model, Xt, yt, Xu, _ = _setup(7)
    Xt1, yt1 = Xt[[0, 3, 6, 9]], yt[[0, 3, 6, 9]]
    before = class_centers(Xt1, yt1, Xu, [], model)
    after = class_centers(Xt1, yt1, Xu, [(4, 1)], model)
    f1, f2 = model.features(Xt1[1:2]).value[0], model.features(Xu[4:5]).value[0]
    np.testing.assert_allclose(after[1], (f1 + f2) / 2, atol=1e-12)
    np.testing.assert_array_equal(np.delete(after, 1, 0), np.delete(before, 1, 0))


def test_center_error_names_class():
    model, Xt, yt, Xu, _ = _setup(8)
    with pytest.raises(StateError, match="class 0"):
        class_centers(Xt[yt != 0], yt[yt != 0], Xu, [], model)


def test_p_f_cases():
    centers = np.eye(4)
    assert p_f(np.ones(4), 2, centers, 30.0) == pytest.approx(0.25, abs=1e-15)
    expected = math.exp(30) / (math.exp(30) + 3)
    assert abs(p_f(np.array([0, 0, 5.0, 0]), 2, centers, 30.0) - expected) < 1e-12
    rng = np.random.default_rng(0)
    c = rng.normal(size=(5, 6))
    x = rng.normal(size=6)
    probs = [p_f(x, j, c, 30.0) for j in range(5)]
    assert all(0 < p < 1 for p in probs)
    assert abs(sum(probs) - 1.0) < 1e-12


# entropy change

def test_delta_entropy_identical_models_is_zero():
    model, _, _, Xu, _ = _setup(9)
    assert delta_entropy(model, model.clone(), Xu) == 0.0


def test_delta_entropy_positive_after_sharpening():
    before = linear_model(np.eye(2), np.array([[1.0, 0.2], [0.2, 1.0]]), scale=2.0)
    after = linear_model(np.eye(2), np.array([[1.0, -1.0], [-1.0, 1.0]]), scale=2.0)
    X = np.array([[1.0, 0.1], [0.1, 1.0], [2.0, 0.5]])
    de = delta_entropy(before, after, X)
    assert 0 < de <= math.log(2)
    assert mean_entropy(before, X) == pytest.approx(mean_entropy(before, X))


# metric and reward

def test_metric_examples():
    p = RewardParams()
    assert p.threshold == pytest.approx(-0.21072103131565256, abs=1e-15)
    assert metric(0.9, 0.9, 0.0, p) == p.threshold
    assert metric(1.0, 1.0, 0.0, p) == 0.0
    # log 0.95 + log 0.92 + 0.1 * 0.05
    assert metric(0.95, 0.92, 0.05, p) == pytest.approx(-0.1296749033266016, abs=1e-15)


def test_metric_is_one_plus_beta_log_q():
    for beta in (0.0, 0.5, 1.0, 2.0):
        for q in (0.3, 0.9, 0.99):
            assert metric(q, q, 0.0, RewardParams(beta=beta)) == pytest.approx((1 + beta) * math.log(q), abs=1e-14)


def test_reward_boundary():
    tau = RewardParams().threshold
    assert reward(tau, tau) == -1
    assert reward(tau + 1e-9, tau) == 1
    assert reward(metric(0.9 + 1e-6, 0.9 + 1e-6, 0.0, RewardParams()), tau) == 1
    assert {reward(x, 0.0) for x in np.linspace(-1, 1, 101)} == {-1, 1}


def test_tau_override():
    assert RewardParams(tau=-0.5).threshold == -0.5
    assert RewardParams(beta=2.0).threshold == pytest.approx(3 * math.log(0.9))


def test_sample_metric_matches_probabilities():
    model, Xt, yt, Xu, _ = _setup(10)
    centers = class_centers(Xt, yt, Xu, [], model)
    x, label = Xu[0], 1
    pc = model.predict_proba(x[None])[0, label]
    pf = p_f(model.features(x[None]).value[0], label, centers, model.scale)
    got = sample_metric(model, x, label, centers, 0.2, RewardParams())
    assert got == pytest.approx(metric(pc, pf, 0.2, RewardParams()), abs=1e-9)


# Q-network

def _forward_oracle(qnet, s):
    h = np.asarray(s, dtype=float)
    n = len(qnet.arch) - 1
    for i in range(n):
        W, b = qnet.params[f"Q{i}.weight"], qnet.params[f"Q{i}.bias"]
        z = [sum(h[r] * W[r, c] for r in range(len(h))) + b[c] for c in range(W.shape[1])]
        h = np.array([max(v, 0.0) for v in z]) if i < n - 1 else np.array(z)
    return h


def test_q_forward_zero_shape_and_pinned_value():
    q = QNet(6, 3, (5, 4), np.random.default_rng(42))
    s = np.array([0.5, -1.0, 2.0, 0.0, 1.5, -0.25])
    out = q_forward(q, s)
    assert out.shape == (3,)
    np.testing.assert_allclose(out, _forward_oracle(q, s), atol=1e-12)
    np.testing.assert_allclose(out, [0.07802525343771591, 0.5985422994627886, -1.3779939457817838], atol=1e-12)
    for name in q.params.names():
        q.params[name][:] = 0.0
    assert np.all(q_forward(q, s) == 0.0)


def test_q_forward_width_mismatch():
    with pytest.raises(ConfigError):
        q_forward(QNet(6, 3, (4,), np.random.default_rng(0)), np.zeros(5))


def _biased_qnet(values, in_dim=4):
    q = QNet(in_dim, len(values), (3,), np.random.default_rng(0))
    q.params["Q1.weight"][:] = 0.0
    q.params["Q1.bias"][:] = values
    return q


def test_greedy_action_over_occupied_slots():
    q = _biased_qnet([1.0, 5.0, 3.0, 2.0])
    rng = np.random.default_rng(0)
    assert select_action(q, np.zeros(4), [True, True, True, True], 0.0, rng) == 1
    assert select_action(q, np.zeros(4), [True, False, True, True], 0.0, rng) == 2
    with pytest.raises(EpisodeOver):
        select_action(q, np.zeros(4), [False] * 4, 0.5, rng)


def test_full_exploration_is_uniform_over_occupied():
    q = _biased_qnet(np.arange(6.0))
    mask = np.array([True, False, True, True, False, True])
    rng = np.random.default_rng(1)
    counts = Counter(select_action(q, np.zeros(4), mask, 1.0, rng) for _ in range(10_000))
    assert set(counts) == {0, 2, 3, 5}
    for a in (0, 2, 3, 5):
        assert abs(counts[a] / 10_000 - 0.25) < 0.02


def test_masked_slots_never_selected():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        mask = rng.random(16) < rng.random()
        if not mask.any():
            mask[rng.integers(16)] = True
        q = _biased_qnet(np.where(mask, 0.0, 1e9) + rng.normal(size=16))
        assert mask[select_action(q, np.zeros(4), mask, float(rng.random()), rng)]


# targets and updates

def _t(r, terminal=False, mask=(True, True, True), s_next=None, a=0):
    return Transition(np.zeros(4), a, r, np.zeros(4) if s_next is None else s_next, terminal, np.array(mask))


def test_q_target_cases():
    q = _biased_qnet([2.0, 1.0, 7.0])
    assert q_target(_t(1.0), q, 0.0) == 1.0
    assert q_target(_t(1.0, mask=(True, True, False)), q, 0.9) == pytest.approx(2.8, abs=1e-12)
    assert q_target(_t(-1.0, terminal=True), q, 0.9) == -1.0
    assert q_target(_t(1.0, mask=(False, False, False)), q, 0.9) == 1.0


def test_gamma_zero_targets_equal_rewards_exactly():
    rng = np.random.default_rng(3)
    q = QNet(4, 3, (5,), rng)
    batch = [_t(float(rng.choice([-1, 1])), bool(rng.random() < 0.5), s_next=rng.normal(size=4)) for _ in range(20)]
    assert q_targets(batch, q, 0.0).tolist() == [t.r for t in batch]


def _frozen_batch(rng, in_dim=10, n_act=4, n=32):
    return [Transition(rng.normal(size=in_dim), int(rng.integers(n_act)), float(rng.choice([-1, 1])),
                       rng.normal(size=in_dim), bool(rng.random() < 0.3), rng.random(n_act) < 0.7)
            for _ in range(n)]


def _sq_error(q, batch, gamma):
    V = q_targets(batch, q, gamma)
    Q = q_forward(q, np.stack([t.s for t in batch]))[np.arange(len(batch)), [t.a for t in batch]]
    return float(((Q - V) ** 2).sum())


def test_q_update_reduces_squared_error_monotonically():
    rng = np.random.default_rng(4)
    q = QNet(10, 4, (32, 16), rng, OptimConfig(base_lr=0.001))
    batch = _frozen_batch(rng)
    errs = [_sq_error(q, batch, 0.0)]
    for _ in range(100):
        q_update(q, batch, 0.0)
        errs.append(_sq_error(q, batch, 0.0))
    assert errs[-1] <= 0.5 * errs[0]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_q_update_fixed_point_leaves_parameters():
    rng = np.random.default_rng(5)
    q = QNet(4, 3, (5,), rng, OptimConfig(base_lr=0.01, weight_decay=0.0))
    states = rng.normal(size=(6, 4))
    Q = q_forward(q, states)
    batch = [Transition(s, i % 3, float(Q[i, i % 3]), s, True, np.ones(3, bool)) for i, s in enumerate(states)]
    before = q.params.clone()
    q_update(q, batch, 0.9)
    assert q.params.equal(before)


def test_q_update_rejects_empty_batch():
    with pytest.raises(ValueError):
        q_update(QNet(4, 3, (5,), np.random.default_rng(0)), [], 0.9)


def _min_hidden_gap(q, S):
    h, gap = S, np.inf
    for i in range(len(q.arch) - 2):
        z = h @ q.params[f"Q{i}.weight"] + q.params[f"Q{i}.bias"]
        gap, h = min(gap, np.abs(z).min()), np.maximum(z, 0)
    return gap


@pytest.mark.parametrize("trial", range(5))
def test_td_loss_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(50 + trial)
    while True:
        q = QNet(5, 3, (6, 4), rng)
        batch = _frozen_batch(rng, 5, 3, 8)
        if _min_hidden_gap(q, np.stack([t.s for t in batch])) > 1e-3:
            break
    for gamma in (0.0, 0.9):
        # semi-gradient: the bootstrap target is frozen before differencing
        V = q_targets(batch, q, gamma)
        assert check_param_grads(lambda: td_loss(q, batch, gamma, targets=V), q.params) < 1e-4


def test_q_update_does_not_touch_classifier():
    model, Xt, yt, Xu, pool = _setup(11)
    snapshot = model.params.clone()
    s = build_state(pool, Xt, yt, Xu, model)
    q = QNet(len(s), 16, (8,), np.random.default_rng(0))
    assert not set(q.params.names()) & set(model.params.names())
    batch = [Transition(s, 0, 1.0, s, False, pool.occupied.copy())] * 4
    for _ in range(5):
        q_update(q, batch, 0.9)
    assert model.params.equal(snapshot)


# replay

def test_replay_fifo_eviction():
    pool = ReplayPool(capacity=3)
    for i in range(4):
        replay_insert(pool, _t(float(i)))
    assert len(pool) == 3
    assert [t.r for t in pool.items] == [1.0, 2.0, 3.0]


def test_replay_samples_with_replacement_and_uniformly():
    rng = np.random.default_rng(6)
    pool = ReplayPool()
    for i in range(2):
        pool.insert(_t(float(i)))
    batch = replay_sample(pool, 8, rng)
    assert len(batch) == 8 and all(any(t is u for u in pool.items) for t in batch)
    for i in range(2, 4):
        pool.insert(_t(float(i)))
    counts = Counter(t.r for t in replay_sample(pool, 10_000, rng))
    for i in range(4):
        assert abs(counts[float(i)] / 10_000 - 0.25) < 0.02


def test_replay_empty_and_capacity_errors():
    with pytest.raises(IndexError):
        ReplayPool().sample(1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ReplayPool(0)


# agent and episodes

def test_epsilon_decays_linearly_to_zero():
    agent = Agent(QNet(4, 3, (5,), np.random.default_rng(0)), ReplayPool(), np.random.default_rng(0),
                  eps_decay_steps=4)
    eps = []
    for _ in range(6):
        eps.append(agent.epsilon)
        agent.observe(_t(1.0))
    assert eps == [1.0, 0.75, 0.5, 0.25, 0.0, 0.0]
    assert len(agent.replay) == 6


class StubEnv:
    """Rewards +1 except -1 at step ``fail_at`` (1-based); counts clone updates."""

    def __init__(self, fail_at=None):
        self.fail_at, self.steps = fail_at, 0

    def state(self, pool):
        return pool.occupied.astype(float)

    def advance(self, entry, pool):
        self.steps += 1

    def score(self, entry, pool):
        r = -1 if self.steps == self.fail_at else 1
        return r, 0.1 * r


def _agent(n):
    return Agent(QNet(n, n, (8,), np.random.default_rng(0)), ReplayPool(), np.random.default_rng(1))


def test_episode_stops_at_first_negative_reward():
    agent = _agent(16)
    pool = PseudoPool([(i, 0) for i in range(16)])
    log = run_episode(agent, pool, StubEnv(fail_at=3))
    assert len(log) == 3 and len(agent.replay) == 3
    assert len(pool.positive) == 3
    assert log.rewards == [1, 1, -1]
    assert log.terminals == [False, False, True]
    assert pool.n_occupied == 13


def test_all_positive_episode_drains_pool():
    agent = _agent(16)
    pool = PseudoPool([(i, 0) for i in range(16)])
    log = run_episode(agent, pool, StubEnv())
    assert len(log) == 16 and pool.empty
    assert log.terminals[-1] and not any(log.terminals[:-1])
    assert sorted(log.actions) == list(range(16))


def test_transition_log_file(tmp_path):
    path = tmp_path / "t.csv"
    pool = PseudoPool([(i, 0) for i in range(4)])
    run_episode(_agent(4), pool, StubEnv(fail_at=2), episode=7, log=TransitionLog(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "episode,step,action,reward,phi,terminal"
    assert [ln.split(",")[3] for ln in lines[1:]] == ["1", "-1"]
    assert lines[2].startswith("7,1,") and lines[2].endswith(",1")
