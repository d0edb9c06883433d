"""Self-check suite behind ``pseudopilot validate``.

Each check returns ``(passed, detail)``. Gradients are compared against
central finite differences; losses against plain-loop references.
"""

from __future__ import annotations

import math
import sys
from collections import Counter

import numpy as np

from . import losses
from .losses import LossWeights, entropy_loss, tml_loss
from .model import init_model
from .nn import grad
from .pseudo import PseudoPool
from .rl import (
    Agent, QNet, ReplayPool, RewardParams, Transition, metric, q_targets, q_update, reward,
    run_episode, select_action, td_loss,
)


def _random_problem(rng, margin=0.5):
    """Random model and batches, redrawn until away from ReLU kinks."""
    while True:
        K, d, n_in = int(rng.integers(2, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 5))
        arch = (n_in, int(rng.integers(3, 7)), d)
        model = init_model(arch, K, rng, margin=margin)
        ns, nt, nu = (int(rng.integers(1, 9)) for _ in range(3))
        Xs, Xt, Xu = (rng.uniform(-1, 1, (n, n_in)) for n in (ns, nt, nu))
        X = np.vstack([Xs, Xt, Xu])
        z = X @ model.params["F0.weight"] + model.params["F0.bias"]
        if np.abs(z).min() > 1e-3 and np.linalg.norm(model.features(X).value, axis=1).min() > 0.1:
            return model, (Xs, rng.integers(0, K, ns)), (Xt, rng.integers(0, K, nt)), Xu


def _fd_error(loss_fn, store, step=1e-5) -> float:
    """Relative error of the whole gradient vector against central differences."""
    analytic = grad(loss_fn(), store)
    a_all, n_all = [], []
    for name in store.names():
        w = store.values[name]
        num = np.zeros_like(w)
        for i in np.ndindex(w.shape):
            orig = w[i]
            w[i] = orig + step
            up = float(loss_fn().value)
            w[i] = orig - step
            down = float(loss_fn().value)
            w[i] = orig
            num[i] = (up - down) / (2 * step)
        a_all.append(analytic[name].ravel())
        n_all.append(num.ravel())
    a, n = np.concatenate(a_all), np.concatenate(n_all)
    scale = max(np.abs(a).max(), np.abs(n).max())
    diff = np.abs(a - n).max()
    return float(diff / scale if scale > 1e-10 else diff)


def _ce_reference(cos, y, s):
    total = 0.0
    for row, label in zip(cos, y):
        top = max(s * c for c in row)
        total += top + math.log(sum(math.exp(s * c - top) for c in row)) - s * row[label]
    return total / len(y)


def check_tml_reduces_to_ce(trials=100):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(trials):
        model, sb, tb, _ = _random_problem(rng, margin=0.0)
        W = model.params["C.weight"]
        Wn = W / np.linalg.norm(W, axis=1, keepdims=True)

        def cos(X):
            F = model.features(X).value
            return (F / np.linalg.norm(F, axis=1, keepdims=True)) @ Wn.T

        ref = _ce_reference(cos(sb[0]), sb[1], model.scale) + _ce_reference(cos(tb[0]), tb[1], model.scale)
        worst = max(worst, abs(float(tml_loss(model, sb, tb).value) - ref))
    return worst < 1e-6, f"max |diff| {worst:.2e} over {trials}"


def check_loss_gradients(trials=25):
    rng = np.random.default_rng(2)
    worst = 0.0
    w = LossWeights(0.1)
    for _ in range(trials):
        model, sb, tb, Xu = _random_problem(rng)
        both = (np.vstack([sb[0], tb[0]]), np.concatenate([sb[1], tb[1]]))
        for fn in (lambda: losses.tml_loss(model, sb, tb), lambda: losses.entropy_loss(model, Xu),
                   lambda: losses.combined_loss(model, sb, tb, Xu, w), lambda: losses.cml_loss(model, both)):
            worst = max(worst, _fd_error(fn, model.params))
    return worst < 1e-4, f"max rel error {worst:.2e} over {trials}"


def _random_batch(rng, in_dim, n_actions, n):
    out = []
    for _ in range(n):
        mask = rng.random(n_actions) < 0.6
        out.append(Transition(rng.normal(size=in_dim), int(rng.integers(n_actions)), float(rng.choice([-1, 1])),
                              rng.normal(size=in_dim), bool(rng.random() < 0.3), mask))
    return out


def _min_relu_gap(qnet, S):
    h, gap = S, np.inf
    for i in range(len(qnet.arch) - 2):
        z = h @ qnet.params[f"Q{i}.weight"] + qnet.params[f"Q{i}.bias"]
        gap, h = min(gap, np.abs(z).min()), np.maximum(z, 0)
    return gap


def check_td_gradients(trials=10):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(trials):
        in_dim, n_act = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        while True:
            qnet = QNet(in_dim, n_act, (6, 5), rng)
            batch = _random_batch(rng, in_dim, n_act, 8)
            if _min_relu_gap(qnet, np.stack([t.s for t in batch])) > 1e-3:
                break
        targets = q_targets(batch, qnet, 0.9)
        worst = max(worst, _fd_error(lambda: td_loss(qnet, batch, 0.9, targets), qnet.params))
    return worst < 1e-4, f"max rel error {worst:.2e} over {trials}"


def check_reward_boundary():
    p = RewardParams(beta=1.0, lam=0.1)
    at = metric(0.9, 0.9, 0.0, p)
    above = metric(0.9 + 1e-6, 0.9 + 1e-6, 0.0, p)
    ok = at == p.threshold and reward(at, p.threshold) == -1 and reward(above, p.threshold) == 1
    return ok, f"phi={at!r} tau={p.threshold!r}"


def check_entropy_bounds(trials=200):
    rng = np.random.default_rng(4)
    for _ in range(trials):
        model, _, _, Xu = _random_problem(rng)
        h = float(entropy_loss(model, Xu).value)
        if not 0.0 <= h <= math.log(model.n_classes) + 1e-12:
            return False, f"entropy {h} outside [0, log {model.n_classes}]"
    flat = init_model((3, 4), 5, rng)
    flat.params["C.weight"][:] = 1.0
    h = float(entropy_loss(flat, rng.normal(size=(7, 3))).value)
    return abs(h - math.log(5)) < 1e-9, f"uniform case {h:.12f} vs log 5"


def check_q_update():
    rng = np.random.default_rng(5)
    qnet = QNet(12, 4, (16, 16), rng)
    batch = _random_batch(rng, 12, 4, 32)
    start = float(td_loss(qnet, batch, 0.0).value)
    for _ in range(100):
        q_update(qnet, batch, 0.0)
    end = float(td_loss(qnet, batch, 0.0).value)
    return end <= 0.5 * start, f"TD loss {start:.4f} -> {end:.4f}"


def check_masking(trials=1000):
    rng = np.random.default_rng(6)
    qnet = QNet(8, 6, (8,), rng)
    for _ in range(trials):
        mask = rng.random(6) < 0.5
        if not mask.any():
            mask[rng.integers(6)] = True
        qnet.params["Q1.bias"][:] = np.where(mask, -1e6, 1e6)
        a = select_action(qnet, rng.normal(size=8), mask, float(rng.random()), rng)
        if not mask[a]:
            return False, f"picked consumed slot {a}"
    return True, f"{trials} pools"


def check_replay(draws=20000):
    rng = np.random.default_rng(7)
    pool = ReplayPool(capacity=5)
    for i in range(8):
        pool.insert(Transition(np.zeros(1), i, 0.0, np.zeros(1), True, np.zeros(1, dtype=bool)))
    kept = [t.a for t in pool.items]
    counts = Counter(t.a for t in pool.sample(draws, rng))
    chi2 = sum((counts[a] - draws / 5) ** 2 / (draws / 5) for a in kept)
    # chi-square with 4 dof, p = 0.001 critical value
    return kept == [3, 4, 5, 6, 7] and chi2 < 18.47, f"kept {kept}, chi2 {chi2:.2f}"


class _StubEnv:
    def __init__(self, fail_at):
        self.fail_at, self.steps = fail_at, 0

    def state(self, pool):
        return pool.occupied.astype(float)

    def advance(self, entry, pool):
        self.steps += 1

    def score(self, entry, pool):
        r = -1 if self.steps == self.fail_at else 1
        return r, float(r)


def check_episode_semantics():
    rng = np.random.default_rng(8)
    n = 16

    def episode(fail_at):
        agent = Agent(QNet(n, n, (8,), rng), ReplayPool(), rng)
        pool = PseudoPool([(i, 0) for i in range(n)])
        return run_episode(agent, pool, _StubEnv(fail_at)), pool

    short, pool = episode(3)
    full, _ = episode(None)
    ok = len(short) == 3 and len(pool.positive) == 3 and len(full) == n
    return ok, f"lengths {len(short)}, {len(full)}; |D_p|={len(pool.positive)}"


CHECKS = (
    ("tml_m0_equals_cross_entropy", check_tml_reduces_to_ce),
    ("loss_gradients", check_loss_gradients),
    ("td_loss_gradient", check_td_gradients),
    ("reward_boundary", check_reward_boundary),
    ("entropy_bounds", check_entropy_bounds),
    ("q_update_reduces_td_error", check_q_update),
    ("action_masking", check_masking),
    ("replay_fifo_uniform", check_replay),
    ("episode_semantics", check_episode_semantics),
)


def run_checks(stream=sys.stdout) -> bool:
    """Print a pass/fail table; True iff every check passes."""
    all_ok = True
    width = max(len(n) for n, _ in CHECKS)
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}", file=stream)
    print(f"{'overall':<{width}}  {'PASS' if all_ok else 'FAIL'}", file=stream)
    return all_ok
