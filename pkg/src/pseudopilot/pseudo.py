"""Hard pseudo-labels, confidence filtering, and candidate/positive set bookkeeping."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class InvalidAction(IndexError):
    pass


class PoolInitError(ValueError):
    pass


class Pseudo(NamedTuple):
    index: int
    label: int
    confidence: float


def assign_pseudo_labels(model, X, indices: Sequence[int] | None = None) -> list[Pseudo]:
    """Argmax class of the scaled-cosine softmax and its probability.

    ``indices`` name the rows of ``X`` in the caller's numbering; by default
    they are ``range(len(X))``. Ties go to the lowest class id.
    """
    X = np.asarray(X, dtype=np.float64)
    if indices is None:
        indices = range(len(X))
    if len(X) == 0:
        return []
    proba = model.predict_proba(X)
    labels = np.argmax(proba, axis=1)
    conf = proba[np.arange(len(X)), labels]
    return [Pseudo(int(i), int(c), float(p)) for i, c, p in zip(indices, labels, conf)]


def confidence_select(pseudo_list: Sequence[Pseudo], threshold: float) -> list[Pseudo]:
    """Entries whose confidence is strictly above ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    return [p for p in pseudo_list if p.confidence > threshold]


class PseudoPool:
    """Fixed-size candidate slots plus the positive set they drain into."""

    def __init__(self, slots: Sequence[tuple[int, int]], positive: Sequence[tuple[int, int]] = ()):
        self.slots = [(int(i), int(c)) for i, c in slots]
        self.capacity = len(self.slots)
        self.occupied = np.ones(self.capacity, dtype=bool)
        self.positive = [(int(i), int(c)) for i, c in positive]
        self.added = 0
        taken = {i for i, _ in self.positive}
        if len({i for i, _ in self.slots}) != self.capacity or taken & {i for i, _ in self.slots}:
            raise PoolInitError("candidate indices must be distinct and not already positive")

    @property
    def n_occupied(self) -> int:
        return int(self.occupied.sum())

    @property
    def empty(self) -> bool:
        return not self.occupied.any()

    def take_action(self, a: int) -> tuple[int, int]:
        if not 0 <= a < self.capacity or not self.occupied[a]:
            raise InvalidAction(f"slot {a} is not occupied")
        self.occupied[a] = False
        entry = self.slots[a]
        self.positive.append(entry)
        self.added += 1
        return entry

    def check(self) -> None:
        assert self.n_occupied + self.added == self.capacity


def init_candidate_set(pseudo_list: Sequence[Pseudo], n_candidates: int, seed, positive=()) -> PseudoPool:
    """Seeded uniform draw without replacement; slot order is draw order."""
    if n_candidates < 1:
        raise PoolInitError("candidate set size must be positive")
    if len(pseudo_list) < n_candidates:
        raise PoolInitError(f"need {n_candidates} pseudo-labeled samples, have {len(pseudo_list)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pick = rng.choice(len(pseudo_list), size=n_candidates, replace=False)
    return PseudoPool([(pseudo_list[j].index, pseudo_list[j].label) for j in pick], positive)


def take_action(pool: PseudoPool, a: int) -> tuple[tuple[int, int], PseudoPool]:
    return pool.take_action(a), pool
