"""Deep Q-learning agent that picks which pseudo-labeled samples to trust.

The state concatenates per-slot ``[feature, class-probabilities]`` blocks for
the candidate set (zeros once a slot is consumed), per-class averages of the
same vectors over labeled target plus positive samples, and per-class averages
over the unlabeled split grouped by predicted class.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .losses import cosine_logits, entropy_from_logits
from .nn import ConfigError, NumericError, OptimConfig, ParamStore, grad, init_mlp, mlp_forward, sgd_step


class StateError(ValueError):
    pass


class EpisodeOver(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardParams:
    beta: float = 1.0
    lam: float = 0.1
    tau: float | None = None

    @property
    def threshold(self) -> float:
        return (1.0 + self.beta) * math.log(0.9) if self.tau is None else self.tau


def state_length(n_candidates: int, n_classes: int, feature_dim: int) -> int:
    return (n_candidates + 2 * n_classes) * (feature_dim + n_classes)


def _grouped_means(vectors: np.ndarray, groups: np.ndarray, K: int, *, required: bool, what: str) -> np.ndarray:
    out = np.zeros((K, vectors.shape[1]))
    for j in range(K):
        members = groups == j
        if members.any():
            out[j] = vectors[members].mean(axis=0)
        elif required:
            raise StateError(f"class {j} has no {what} member")
    return out


def labeled_set(Xt, yt, Xu, positive: Sequence[tuple[int, int]]):
    """Stack labeled target data with positive samples under their pseudo-labels."""
    if not positive:
        return np.asarray(Xt), np.asarray(yt)
    idx = np.array([i for i, _ in positive], dtype=np.int64)
    lab = np.array([c for _, c in positive], dtype=np.int64)
    return np.vstack([Xt, Xu[idx]]), np.concatenate([yt, lab])


def sample_vectors(model, X, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``[feature, class-probabilities]`` rows and the probabilities.

    With ``normalize`` the feature part is scaled to unit length; the cosine
    head only sees directions, and raw norms make the Q regression stiff.
    """
    f, p = model.embed(X)
    if normalize:
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    return np.hstack([f, p]), p


def build_state(pool, Xt, yt, Xu, model, normalize: bool = True) -> np.ndarray:
    """Flat state vector for the current candidate pool under ``model``.

    The positive set is read from ``pool.positive``.
    """
    K, d = model.n_classes, model.feature_dim
    slot_idx = np.array([i for i, _ in pool.slots], dtype=np.int64)
    v_c, _ = sample_vectors(model, Xu[slot_idx], normalize)
    cand = v_c * pool.occupied[:, None]

    X_tp, y_tp = labeled_set(Xt, yt, Xu, pool.positive)
    v_tp, _ = sample_vectors(model, X_tp, normalize)
    lab = _grouped_means(v_tp, y_tp, K, required=True, what="labeled")

    v_u, p_u = sample_vectors(model, Xu, normalize)
    unl = _grouped_means(v_u, np.argmax(p_u, axis=1), K, required=False, what="unlabeled")
    state = np.concatenate([cand.ravel(), lab.ravel(), unl.ravel()])
    assert state.size == state_length(pool.capacity, K, d)
    return state


def class_centers(Xt, yt, Xu, positive, model) -> np.ndarray:
    """Mean feature per class over labeled target plus positive samples."""
    X_tp, y_tp = labeled_set(Xt, yt, Xu, positive)
    feats = model.features(X_tp).value
    return _grouped_means(feats, y_tp, model.n_classes, required=True, what="labeled or positive")


def _normalize(v: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise NumericError(f"zero-norm {what}")
    return v / norms


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def center_log_probs(features: np.ndarray, centers: np.ndarray, scale: float) -> np.ndarray:
    """Log of the scaled-cosine softmax against class centers, rows = samples."""
    f = _normalize(np.atleast_2d(features), "feature")
    z = _normalize(centers, "class center")
    return log_softmax_np(scale * np.clip(f @ z.T, -1.0, 1.0))


def p_f(feature: np.ndarray, label: int, centers: np.ndarray, scale: float) -> float:
    return float(np.exp(center_log_probs(feature, centers, scale)[0, label]))


def mean_entropy(model, X) -> float:
    feats = model.features(np.asarray(X, dtype=np.float64))
    return float(entropy_from_logits(cosine_logits(model.classifier(), feats) * model.scale).value)


def delta_entropy(model_before, model_after, Xu) -> float:
    """Entropy decrease on the unlabeled split between two models."""
    return mean_entropy(model_before, Xu) - mean_entropy(model_after, Xu)


def metric(p_c: float, p_f_value: float, delta_e: float, params: RewardParams) -> float:
    return math.log(p_c) + params.beta * math.log(p_f_value) + params.lam * delta_e


def sample_metric(model_after, x, label: int, centers: np.ndarray, delta_e: float, params: RewardParams) -> float:
    """Metric of one pseudo-labeled sample, with log-probabilities kept in log space."""
    f = model_after.features(np.atleast_2d(x))
    cos = cosine_logits(model_after.classifier(), f).value
    log_pc = log_softmax_np(model_after.scale * cos)[0, label]
    log_pf = center_log_probs(f.value, centers, model_after.scale)[0, label]
    return float(log_pc + params.beta * log_pf + params.lam * delta_e)


def reward(phi: float, tau: float) -> int:
    return 1 if phi > tau else -1


class QNet:
    """Two ReLU hidden layers and a linear output with one value per slot."""

    def __init__(self, in_dim: int, n_actions: int, hidden=(128, 64), rng=None, optim: OptimConfig | None = None):
        self.arch = (int(in_dim), *(int(h) for h in hidden), int(n_actions))
        self.params = ParamStore()
        init_mlp(self.params, self.arch, np.random.default_rng(rng), prefix="Q")
        self.optim = optim or OptimConfig(base_lr=0.001)

    @property
    def n_actions(self) -> int:
        return self.arch[-1]

    def forward(self, states) -> ad.Node:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.arch[0]:
            raise ConfigError(f"state length {states.shape[-1]} != Q-net input width {self.arch[0]}")
        return mlp_forward(self.params, np.atleast_2d(states), self.arch, prefix="Q")


def q_forward(qnet: QNet, state) -> np.ndarray:
    out = qnet.forward(state).value
    return out[0] if np.ndim(state) == 1 else out


def masked_argmax(q: np.ndarray, mask: np.ndarray) -> int:
    if not mask.any():
        raise EpisodeOver("no occupied slot")
    return int(np.argmax(np.where(mask, q, -np.inf)))


def select_action(qnet: QNet, state, occupied_mask, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over occupied slots only."""
    mask = np.asarray(occupied_mask, dtype=bool)
    valid = np.flatnonzero(mask)
    if len(valid) == 0:
        raise EpisodeOver("no occupied slot")
    if rng.random() < eps:
        return int(valid[rng.integers(len(valid))])
    return masked_argmax(q_forward(qnet, state), mask)


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool
    next_mask: np.ndarray


def q_targets(batch: Sequence[Transition], qnet: QNet, gamma: float) -> np.ndarray:
    """r + gamma * max over occupied next slots; just r for terminal transitions."""
    r = np.array([t.r for t in batch], dtype=np.float64)
    live = np.array([not t.terminal and t.next_mask.any() for t in batch])
    if gamma == 0.0 or not live.any():
        return r
    rows = [t for t, ok in zip(batch, live) if ok]
    q_next = q_forward(qnet, np.stack([t.s_next for t in rows]))
    best = np.where(np.stack([t.next_mask for t in rows]), q_next, -np.inf).max(axis=1)
    out = r.copy()
    out[live] += gamma * best
    return out


def q_target(t: Transition, qnet: QNet, gamma: float) -> float:
    return float(q_targets([t], qnet, gamma)[0])


def td_loss(qnet: QNet, batch: Sequence[Transition], gamma: float, targets=None) -> ad.Node:
    """Half the mean squared TD error; targets are constants.

    Its gradient is the summed semi-gradient update divided by the batch size.
    Pass precomputed ``targets`` to hold them fixed across evaluations.
    """
    if targets is None:
        targets = q_targets(batch, qnet, gamma)
    q = qnet.forward(np.stack([t.s for t in batch]))
    q_sa = ad.gather_rows(q, [t.a for t in batch])
    return 0.5 * ad.mean(ad.square(q_sa - targets))


def q_update(qnet: QNet, batch: Sequence[Transition], gamma: float, progress: float = 0.0) -> QNet:
    if not batch:
        raise ValueError("empty Q-learning batch")
    loss = td_loss(qnet, batch, gamma)
    sgd_step(qnet.params, grad(loss, qnet.params), qnet.optim, progress)
    return qnet


class ReplayPool:
    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def insert(self, t: Transition) -> None:
        self.items.append(t)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if not self.items:
            raise IndexError("cannot sample from an empty replay pool")
        picks = rng.integers(len(self.items), size=batch_size)
        return [self.items[i] for i in picks]


def replay_insert(pool: ReplayPool, t: Transition) -> ReplayPool:
    pool.insert(t)
    return pool


def replay_sample(pool: ReplayPool, batch_size: int, rng) -> list[Transition]:
    return pool.sample(batch_size, rng)


@dataclass
class Agent:
    qnet: QNet
    replay: ReplayPool
    rng: np.random.Generator
    gamma: float = 0.9
    batch_size: int = 32
    eps_decay_steps: int = 40
    updates_per_step: int = 1
    steps: int = 0

    @property
    def epsilon(self) -> float:
        """Linear decay from 1 to 0 over ``eps_decay_steps`` actions."""
        if self.eps_decay_steps <= 0:
            return 0.0
        return max(0.0, 1.0 - self.steps / self.eps_decay_steps)

    @property
    def progress(self) -> float:
        return 1.0 - self.epsilon

    def act(self, state, mask) -> int:
        return select_action(self.qnet, state, mask, self.epsilon, self.rng)

    def observe(self, t: Transition) -> None:
        self.replay.insert(t)
        for _ in range(self.updates_per_step):
            q_update(self.qnet, self.replay.sample(self.batch_size, self.rng), self.gamma, self.progress)
        self.steps += 1


class Environment(Protocol):
    def state(self, pool) -> np.ndarray: ...

    def advance(self, entry: tuple[int, int], pool) -> None: ...

    def score(self, entry: tuple[int, int], pool) -> tuple[int, float]: ...


@dataclass
class EpisodeLog:
    episode: int
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    phis: list = field(default_factory=list)
    terminals: list = field(default_factory=list)
    selected: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


def run_episode(agent: Agent, pool, env: Environment, episode: int = 0, log=None) -> EpisodeLog:
    """Select until the pool drains or a negative reward arrives.

    The sample that earned the negative reward stays in the positive set.
    """
    record = EpisodeLog(episode)
    s = env.state(pool)
    while not pool.empty:
        a = agent.act(s, pool.occupied.copy())
        entry = pool.take_action(a)
        env.advance(entry, pool)
        s_next = env.state(pool)
        r, phi = env.score(entry, pool)
        terminal = r < 0 or pool.empty
        agent.observe(Transition(s, a, float(r), s_next, terminal, pool.occupied.copy()))
        record.actions.append(a)
        record.rewards.append(int(r))
        record.phis.append(float(phi))
        record.terminals.append(terminal)
        record.selected.append(entry)
        if log is not None:
            log.write(episode, len(record) - 1, a, r, phi, terminal)
        if r < 0:
            break
        s = s_next
    return record


class TransitionLog:
    """Append-only CSV: episode,step,action,reward,phi,terminal."""

    HEADER = "episode,step,action,reward,phi,terminal\n"

    def __init__(self, path):
        self.path = path
        with open(path, "a") as fh:
            if fh.tell() == 0:
                fh.write(self.HEADER)

    def write(self, episode, step, action, r, phi, terminal) -> None:
        with open(self.path, "a") as fh:
            fh.write(f"{episode},{step},{action},{int(r)},{phi!r},{int(bool(terminal))}\n")
