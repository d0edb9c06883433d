"""Cosine classifier head and the training objectives built on it.

Logits are scaled cosines between L2-normalized features and class weights.
The target margin loss adds an angular margin to the true-class logit of
labeled target samples only; the complete margin variant applies it to every
labeled sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nn import NumericError

NORM_EPS = 1e-12
# below this 1 - cos^2 the sine branch of the margin derivative is dropped
SIN_EPS = 1e-12


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class CosineClassifier:
    weight: Node
    scale: float = 30.0
    margin: float = 0.5

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def l2_normalize_rows(x: Node, what: str = "feature") -> Node:
    norms = np.sqrt((x.value**2).sum(axis=1))
    bad = np.flatnonzero(norms < NORM_EPS)
    if len(bad):
        raise NumericError(f"zero-norm {what} vector at index {int(bad[0])}")
    return x / ad.sqrt(ad.total(ad.square(x), axis=1, keepdims=True))


def cosine_logits(clf: CosineClassifier, features: Node) -> Node:
    """Unscaled cosines, shape (batch, K), clamped to [-1, 1]."""
    f = l2_normalize_rows(ad.as_node(features))
    w = l2_normalize_rows(clf.weight, what="class weight")
    return ad.clip(f @ ad.transpose(w), -1.0, 1.0)


def margin_adjust(cos_theta, m: float):
    """cos(theta + m) from cos(theta) by the addition formula, theta in [0, pi]."""
    c = np.clip(cos_theta, -1.0, 1.0)
    sin_theta = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    return c * math.cos(m) - sin_theta * math.sin(m)


def margin_adjust_grad(cos_theta, m: float):
    c = np.clip(cos_theta, -1.0, 1.0)
    one_minus = 1.0 - c * c
    safe = one_minus > SIN_EPS
    sin_theta = np.sqrt(np.where(safe, one_minus, 1.0))
    return math.cos(m) + np.where(safe, c / sin_theta, 0.0) * math.sin(m)


def _check_labels(y, K: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if len(y) and (y.min() < 0 or y.max() >= K):
        raise LabelError(f"label outside [0, {K})")
    return y


def margin_logits(cos: Node, y, scale: float, m: float) -> Node:
    """s*cos everywhere except s*cos(theta_y + m) in each row's true column."""
    y = _check_labels(y, cos.shape[1])
    if m == 0.0:
        return cos * scale
    cy = ad.gather_rows(cos, y)
    adjusted = ad.unary(cy, lambda c: margin_adjust(c, m), lambda c: margin_adjust_grad(c, m))
    delta = ad.reshape(adjusted - cy, (-1, 1))
    onehot = np.zeros(cos.shape)
    onehot[np.arange(len(y)), y] = 1.0
    return (cos + delta * onehot) * scale


def cross_entropy(logits: Node, y) -> Node:
    y = _check_labels(y, logits.shape[1])
    return -ad.mean(ad.gather_rows(ad.log_softmax(logits), y))


def entropy_from_logits(logits: Node) -> Node:
    logp = ad.log_softmax(logits)
    return ad.mean(-ad.total(ad.exp(logp) * logp, axis=1))


def _nonempty(batch) -> bool:
    return batch is not None and len(batch[1]) > 0


def tml_loss(model, source_batch, target_batch) -> Node:
    """Source cross-entropy plus margin cross-entropy on labeled target samples.

    Each batch is an ``(X, y)`` pair. The two means are weighted equally; an
    empty target batch contributes nothing.
    """
    clf = model.classifier()
    loss = None
    if _nonempty(source_batch):
        Xs, ys = source_batch
        cos = cosine_logits(clf, model.features(Xs))
        loss = cross_entropy(cos * clf.scale, _check_labels(ys, clf.n_classes))
    if _nonempty(target_batch):
        Xt, yt = target_batch
        cos = cosine_logits(clf, model.features(Xt))
        term = cross_entropy(margin_logits(cos, yt, clf.scale, clf.margin), yt)
        loss = term if loss is None else loss + term
    if loss is None:
        raise ValueError("tml_loss needs at least one nonempty batch")
    return loss


def entropy_loss(model, X) -> Node:
    """Mean prediction entropy over an unlabeled batch."""
    if X is None or len(X) == 0:
        raise ValueError("entropy_loss needs a nonempty batch")
    clf = model.classifier()
    return entropy_from_logits(cosine_logits(clf, model.features(X)) * clf.scale)


def combined_loss(model, source_batch, target_batch, unlabeled_X, weights: LossWeights = LossWeights()) -> Node:
    loss = tml_loss(model, source_batch, target_batch)
    if weights.alpha == 0.0 or unlabeled_X is None or len(unlabeled_X) == 0:
        return loss
    return loss + weights.alpha * entropy_loss(model, unlabeled_X)


def cml_loss(model, labeled_batch) -> Node:
    """Margin cross-entropy averaged over labeled samples of both domains.

    Written as a negative log-likelihood so that minimizing it fits the labels.
    """
    X, y = labeled_batch
    if len(y) == 0:
        raise ValueError("cml_loss needs a nonempty batch")
    clf = model.classifier()
    cos = cosine_logits(clf, model.features(X))
    return cross_entropy(margin_logits(cos, y, clf.scale, clf.margin), y)
