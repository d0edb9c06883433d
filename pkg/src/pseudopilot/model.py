"""MLP feature extractor plus bias-free cosine classifier sharing one ParamStore."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import CosineClassifier, cosine_logits
from .nn import ParamStore, init_mlp, mlp_forward

CLASSIFIER_WEIGHT = "C.weight"


@dataclass
class Model:
    params: ParamStore
    arch: tuple
    scale: float = 30.0
    margin: float = 0.5

    @property
    def feature_dim(self) -> int:
        return self.arch[-1]

    @property
    def n_classes(self) -> int:
        return self.params[CLASSIFIER_WEIGHT].shape[0]

    def features(self, X) -> ad.Node:
        return mlp_forward(self.params, X, self.arch, prefix="F")

    def classifier(self, margin: float | None = None) -> CosineClassifier:
        m = self.margin if margin is None else margin
        return CosineClassifier(self.params.node(CLASSIFIER_WEIGHT), self.scale, m)

    def clone(self) -> "Model":
        return Model(self.params.clone(), self.arch, self.scale, self.margin)

    def with_margin(self, margin: float) -> "Model":
        """Same parameters (shared, not copied) under a different margin."""
        return Model(self.params, self.arch, self.scale, margin)

    def embed(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Features and softmax class probabilities, as plain arrays."""
        f = self.features(np.asarray(X, dtype=np.float64))
        logits = cosine_logits(self.classifier(), f).value * self.scale
        return f.value, softmax(logits)

    def predict_proba(self, X) -> np.ndarray:
        return self.embed(X)[1]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_model(arch, n_classes: int, rng: np.random.Generator, scale: float = 30.0, margin: float = 0.5) -> Model:
    arch = tuple(int(a) for a in arch)
    params = ParamStore()
    init_mlp(params, arch, rng, prefix="F")
    params.add(CLASSIFIER_WEIGHT, rng.normal(0.0, 1.0, size=(n_classes, arch[-1])))
    return Model(params, arch, scale, margin)
