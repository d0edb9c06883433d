"""Training flows: baselines, confidence-threshold self-training and the
Q-learning selective pseudo-labeling loop, plus evaluation.

Core ``fit_*`` functions never touch hidden labels. The ``run_*`` wrappers add
an evaluation callback per phase and package a :class:`RunResult`.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .datagen import DatasetBundle
from .losses import LossWeights, cml_loss, combined_loss, entropy_loss, tml_loss
from .model import Model, init_model
from .nn import grad, sgd_step
from .pseudo import PoolInitError, assign_pseudo_labels, confidence_select, init_candidate_set
from .rl import (
    Agent, QNet, ReplayPool, RewardParams, build_state, class_centers, labeled_set,
    mean_entropy, reward, run_episode, sample_metric, state_length,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# independent RNG streams per run; fixed so that e.g. TML and the pretraining
# phase of TML_DQNPL draw identical batches
_STREAMS = {"init": 0, "source": 1, "target": 2, "unlabeled": 3, "pool": 4, "agent": 5, "qnet": 6, "clone": 7}


def rng_for(seed: int, stream: str, extra: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAMS[stream], int(extra)])


class Cycler:
    """Minibatches from a reshuffled cyclic pass, so every item is visited
    once per cycle even when the set is smaller than the batch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self._perm = np.empty(0, dtype=np.int64)

    def draw(self, k: int) -> np.ndarray:
        out = []
        need = k
        while need > 0:
            if len(self._perm) == 0:
                self._perm = self.rng.permutation(self.n)
            take = self._perm[:need]
            self._perm = self._perm[need:]
            out.append(take)
            need -= len(take)
        return np.concatenate(out)


@dataclass
class TrainSet:
    Xs: np.ndarray
    ys: np.ndarray
    Xt: np.ndarray
    yt: np.ndarray
    Xu: np.ndarray


Objective = Callable[[Model, tuple, tuple, np.ndarray], ad.Node]


def objective_for(method: str, cfg: RunConfig) -> Objective:
    weights = LossWeights(cfg.alpha)

    if method == "S+T":
        return lambda m, sb, tb, xu: tml_loss(m.with_margin(0.0), sb, tb)
    if method == "ENT":
        return lambda m, sb, tb, xu: combined_loss(m.with_margin(0.0), sb, tb, xu, weights)
    if method in ("TML", "TML_SPL", "TML_DQNPL"):
        return lambda m, sb, tb, xu: combined_loss(m, sb, tb, xu, weights)
    if method == "CML":
        def cml(m, sb, tb, xu):
            batch = (np.vstack([sb[0], tb[0]]), np.concatenate([sb[1], tb[1]]))
            loss = cml_loss(m, batch)
            if cfg.alpha and len(xu):
                loss = loss + cfg.alpha * entropy_loss(m, xu)
            return loss
        return cml
    raise ValueError(f"no objective for method {method!r}")


def tml_only(m, sb, tb, xu):
    return tml_loss(m, sb, tb)


class Trainer:
    """Minibatch SGD over a TrainSet, one source pass per epoch.

    Labeled-target and unlabeled batches come from their own cyclers, each on
    its own RNG stream, so an objective that ignores the unlabeled batch is
    unaffected by what the unlabeled split contains.
    """

    def __init__(self, cfg: RunConfig, seed: int, tag: int = 0, uses_unlabeled: bool = True):
        self.cfg = cfg
        self.rng_s = rng_for(seed, "source", tag)
        self.rng_t = rng_for(seed, "target", tag)
        self.rng_u = rng_for(seed, "unlabeled", tag)
        self.uses_unlabeled = uses_unlabeled
        self.steps = 0

    def steps_per_epoch(self, data: TrainSet) -> int:
        return math.ceil(len(data.Xs) / self.cfg.batch_size)

    def fit(self, model: Model, data: TrainSet, objective: Objective, epochs: int,
            progress: tuple[float, float] = (0.0, 1.0), probe: Callable | None = None) -> list[float]:
        bs = self.cfg.batch_size
        optim = self.cfg.optim()
        t_cycle = Cycler(len(data.Xt), self.rng_t)
        u_cycle = Cycler(len(data.Xu), self.rng_u) if self.uses_unlabeled and len(data.Xu) else None
        total = max(1, epochs * self.steps_per_epoch(data))
        losses = []
        step = 0
        for _ in range(epochs):
            for sidx in _source_batches(len(data.Xs), bs, self.rng_s):
                tidx = t_cycle.draw(bs) if len(data.Xt) else np.empty(0, dtype=np.int64)
                xu = data.Xu[u_cycle.draw(bs)] if u_cycle is not None else data.Xu[:0]
                loss = objective(model, (data.Xs[sidx], data.ys[sidx]), (data.Xt[tidx], data.yt[tidx]), xu)
                value = float(loss.value)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at step {self.steps}")
                p = progress[0] + (progress[1] - progress[0]) * step / total
                sgd_step(model.params, grad(loss, model.params), optim, p)
                losses.append(value)
                if probe is not None:
                    probe(step, model)
                step += 1
                self.steps += 1
        return losses


def _source_batches(n, bs, rng):
    perm = rng.permutation(n)
    for start in range(0, n, bs):
        yield perm[start:start + bs]


def train_set(bundle: DatasetBundle, positive=(), exclude_positive: bool = True) -> TrainSet:
    """Source, labeled target (plus positives under pseudo-labels) and the
    unlabeled inputs, with positives removed from the latter."""
    Xt, yt = labeled_set(bundle.Xt, bundle.yt, bundle.Xu, list(positive))
    Xu = bundle.Xu
    if positive and exclude_positive:
        keep = np.ones(len(Xu), dtype=bool)
        keep[[i for i, _ in positive]] = False
        Xu = Xu[keep]
    return TrainSet(bundle.Xs, bundle.ys, Xt, yt, Xu)


def new_model(cfg: RunConfig, bundle: DatasetBundle) -> Model:
    arch = (bundle.input_dim, *cfg.hidden, cfg.feature_dim)
    return init_model(arch, bundle.K, rng_for(cfg.seed, "init"), cfg.scale, cfg.margin)


def fit_baseline(cfg: RunConfig, bundle: DatasetBundle, method: str | None = None, probe=None) -> Model:
    method = method or cfg.method
    model = new_model(cfg, bundle)
    objective = objective_for(method, cfg)
    uses_u = method != "S+T"
    Trainer(cfg, cfg.seed, uses_unlabeled=uses_u).fit(model, train_set(bundle), objective, cfg.epochs, probe=probe)
    return model


def pretrain_base(cfg: RunConfig, bundle: DatasetBundle, probe=None) -> Model:
    """Base model trained with source/target margin loss plus entropy."""
    return fit_baseline(cfg, bundle, method="TML", probe=probe)


def evaluate(model: Model, bundle: DatasetBundle) -> float:
    """Accuracy on the unlabeled split against its hidden labels."""
    truth = bundle.hidden_labels()
    return float(np.mean(model.predict(bundle.Xu) == truth))


@dataclass
class PhaseRecord:
    phase: str
    accuracy: float
    n_positive: int
    pseudo_precision: float
    random_precision: float


@dataclass
class RunResult:
    method: str
    seed: int
    phases: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    positive_precision: float = float("nan")
    random_precision: float = float("nan")
    wall_clock: float = 0.0

    @property
    def final_accuracy(self) -> float:
        return self.phases[-1].accuracy if self.phases else float("nan")

    @property
    def history(self) -> list[float]:
        return [p.accuracy for p in self.phases]

    def records(self) -> list[dict]:
        return [
            {"method": self.method, "seed": self.seed, "phase": p.phase, "accuracy": p.accuracy,
             "n_positive": p.n_positive, "pseudo_precision": p.pseudo_precision,
             "random_precision": p.random_precision}
            for p in self.phases
        ]


def _precision(pairs, truth) -> float:
    if not pairs:
        return float("nan")
    return float(np.mean([truth[i] == c for i, c in pairs]))


class Scorer:
    """Evaluation callback; the only code path that reads hidden labels."""

    def __init__(self, bundle: DatasetBundle, result: RunResult):
        self.bundle, self.result = bundle, result
        self._expected_hits = 0.0
        self._added = 0

    def __call__(self, phase: str, model: Model, positive=(), pool_pseudo=None, added=()):
        truth = self.bundle.hidden_labels()
        acc = float(np.mean(model.predict(self.bundle.Xu) == truth))
        if pool_pseudo is not None and added:
            pool_acc = _precision([(p.index, p.label) for p in pool_pseudo], truth)
            self._expected_hits += pool_acc * len(added)
            self._added += len(added)
        rand = self._expected_hits / self._added if self._added else float("nan")
        prec = _precision(list(positive), truth)
        self.result.phases.append(PhaseRecord(phase, acc, len(positive), prec, rand))
        self.result.positive_precision = prec
        self.result.random_precision = rand


def _finetune(cfg: RunConfig, bundle: DatasetBundle, model: Model, positive, trainer: Trainer, epochs: int):
    if epochs <= 0:
        return
    data = train_set(bundle, positive)
    p = cfg.finetune_progress
    trainer.fit(model, data, objective_for("TML", cfg), epochs, progress=(p, p))


def fit_tml_spl(cfg: RunConfig, bundle: DatasetBundle, on_phase=None) -> Model:
    model = pretrain_base(cfg, bundle)
    if on_phase:
        on_phase("pretrain", model)
    trainer = Trainer(cfg, cfg.seed, tag=1)
    for rnd in range(cfg.max_outer):
        pseudo = assign_pseudo_labels(model, bundle.Xu)
        chosen = confidence_select(pseudo, cfg.spl_threshold)
        if not chosen:
            log.warning("round %d: no pseudo-label above %.3f, skipping", rnd, cfg.spl_threshold)
            continue
        positive = [(p.index, p.label) for p in chosen]
        _finetune(cfg, bundle, model, positive, trainer, cfg.n_retrain_epochs)
        if on_phase:
            on_phase(f"round{rnd}", model, positive, pseudo, positive)
    return model


class CloneEnv:
    """Episode environment backed by a copy of the classifier.

    ``advance`` runs the one-epoch margin-loss update of the copy on source,
    labeled target and positive data; ``score`` rates the selected sample with
    the updated copy.
    """

    def __init__(self, clone: Model, bundle: DatasetBundle, cfg: RunConfig, trainer: Trainer):
        self.model, self.bundle, self.cfg, self.trainer = clone, bundle, cfg, trainer
        self.params = RewardParams(cfg.beta, cfg.lam, cfg.tau)
        self.delta_e = 0.0

    def state(self, pool) -> np.ndarray:
        return build_state(pool, self.bundle.Xt, self.bundle.yt, self.bundle.Xu, self.model)

    def advance(self, entry, pool) -> None:
        h_before = mean_entropy(self.model, self.bundle.Xu)
        data = train_set(self.bundle, pool.positive)
        p = self.cfg.finetune_progress
        self.trainer.fit(self.model, data, tml_only, self.cfg.clone_epochs, progress=(p, p))
        self.delta_e = h_before - mean_entropy(self.model, self.bundle.Xu)

    def score(self, entry, pool) -> tuple[int, float]:
        b = self.bundle
        centers = class_centers(b.Xt, b.yt, b.Xu, pool.positive, self.model)
        idx, label = entry
        phi = sample_metric(self.model, b.Xu[idx], label, centers, self.delta_e, self.params)
        return reward(phi, self.params.threshold), phi


def make_agent(cfg: RunConfig, bundle: DatasetBundle) -> Agent:
    in_dim = state_length(cfg.n_candidates, bundle.K, cfg.feature_dim)
    qnet = QNet(in_dim, cfg.n_candidates, cfg.q_hidden, rng_for(cfg.seed, "qnet"), cfg.q_optim())
    return Agent(qnet, ReplayPool(cfg.replay_capacity), rng_for(cfg.seed, "agent"),
                 cfg.gamma, cfg.q_batch_size, cfg.eps_decay_steps, cfg.q_updates_per_step)


@dataclass
class DQNPLState:
    model: Model
    agent: Agent
    positive: list
    episodes: list


def fit_tml_dqnpl(cfg: RunConfig, bundle: DatasetBundle, on_phase=None, transition_log=None,
                  env_factory=CloneEnv) -> DQNPLState:
    model = pretrain_base(cfg, bundle)
    if on_phase:
        on_phase("pretrain", model)
    agent = make_agent(cfg, bundle)
    pool_rng = rng_for(cfg.seed, "pool")
    main_trainer = Trainer(cfg, cfg.seed, tag=1)
    positive: list = []
    episodes = []
    best_h, stale = mean_entropy(model, bundle.Xu), 0
    for it in range(cfg.max_outer):
        taken = {i for i, _ in positive}
        eligible = [i for i in range(bundle.n_unlabeled) if i not in taken]
        if len(eligible) < cfg.n_candidates:
            if it == 0:
                raise PoolInitError(f"{bundle.n_unlabeled} unlabeled samples cannot fill "
                                    f"{cfg.n_candidates} candidate slots")
            log.info("outer %d: only %d eligible samples left, stopping", it, len(eligible))
            break
        pseudo = assign_pseudo_labels(model, bundle.Xu[eligible], eligible)
        clone = model.clone()
        pool = init_candidate_set(pseudo, cfg.n_candidates, pool_rng, positive=positive)
        env = env_factory(clone, bundle, cfg, Trainer(cfg, cfg.seed, tag=100 + it))
        episode = run_episode(agent, pool, env, it, transition_log)
        episodes.append(episode)
        positive = list(pool.positive)
        _finetune(cfg, bundle, model, positive, main_trainer, cfg.n_retrain_epochs)
        if on_phase:
            on_phase(f"outer{it}", model, positive, pseudo, episode.selected)
        if not cfg.carry_positive:
            positive = []
        h = mean_entropy(model, bundle.Xu)
        if h < best_h:
            best_h, stale = h, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("outer %d: unlabeled entropy stalled, stopping", it)
                break
    return DQNPLState(model, agent, positive, episodes)


def run(cfg: RunConfig, bundle: DatasetBundle, transition_log=None) -> RunResult:
    """Train one (method, seed) cell and score every phase."""
    start = time.perf_counter()
    result = RunResult(cfg.method, cfg.seed)
    scorer = Scorer(bundle, result)
    if cfg.method == "TML_DQNPL":
        state = fit_tml_dqnpl(cfg, bundle, on_phase=scorer, transition_log=transition_log)
        result.episodes = [
            {"episode": e.episode, "length": len(e), "rewards": list(e.rewards)} for e in state.episodes
        ]
    elif cfg.method == "TML_SPL":
        fit_tml_spl(cfg, bundle, on_phase=scorer)
    else:
        scorer("final", fit_baseline(cfg, bundle))
    result.wall_clock = time.perf_counter() - start
    return result


def train_baseline(cfg: RunConfig, bundle: DatasetBundle) -> RunResult:
    if cfg.method not in ("S+T", "ENT", "TML", "CML"):
        raise ValueError(f"{cfg.method} is not a baseline method")
    return run(cfg, bundle)


def run_tml_spl(cfg: RunConfig, bundle: DatasetBundle) -> RunResult:
    return run(cfg.replace(method="TML_SPL"), bundle)


def run_tml_dqnpl(cfg: RunConfig, bundle: DatasetBundle, transition_log=None) -> RunResult:
    return run(cfg.replace(method="TML_DQNPL"), bundle, transition_log)
