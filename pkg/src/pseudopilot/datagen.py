"""Synthetic domain-shifted Gaussian blobs and the three SSDA splits.

A bundle holds labeled source data, a k-shot labeled target split and an
unlabeled target split whose true labels are kept for evaluation only. Reads
of those hidden labels go through :meth:`DatasetBundle.hidden_labels`, which
counts every access and refuses while the bundle is sealed.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_PREFIX = "pseudopilot-data v1"
SPLITS = ("source", "target", "unlabeled")


class DataFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


class HiddenLabelAccess(RuntimeError):
    """Raised when hidden target labels are read while the bundle is sealed."""


@dataclass(frozen=True)
class Sample:
    x: tuple
    domain: str
    true_label: int | None = None
    pseudo_label: int | None = None
    pseudo_confidence: float | None = None

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == "source" and self.true_label is None:
            raise ValueError("source samples must carry a label")
        if (self.pseudo_label is None) != (self.pseudo_confidence is None):
            raise ValueError("pseudo_confidence must be present iff pseudo_label is")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


class DatasetBundle:
    def __init__(self, Xs, ys, Xt, yt, Xu, yu, K: int):
        self.K = int(K)
        self.Xs, self.ys = _frozen(Xs, np.float64), _frozen(ys, np.int64)
        self.Xt, self.yt = _frozen(Xt, np.float64), _frozen(yt, np.int64)
        self.Xu = _frozen(Xu, np.float64)
        self._yu = _frozen(yu, np.int64)
        self.input_dim = int(self.Xs.shape[1])
        self.hidden_reads = 0
        self._sealed = False
        self._validate()

    def _validate(self):
        for name, X, y in (("source", self.Xs, self.ys), ("target", self.Xt, self.yt), ("unlabeled", self.Xu, self._yu)):
            if X.ndim != 2 or X.shape[1] != self.input_dim:
                raise DataFormatError(f"{name} inputs must be (n, {self.input_dim})")
            if len(X) != len(y):
                raise DataFormatError(f"{name} inputs and labels differ in length")
            if len(y) and (y.min() < 0 or y.max() >= self.K):
                raise DataFormatError(f"{name} split has a class id outside [0, {self.K})")
        missing = sorted(set(range(self.K)) - set(self.yt.tolist()))
        if missing:
            raise DataFormatError(f"labeled target split lacks classes {missing}")

    @property
    def n_unlabeled(self) -> int:
        return len(self.Xu)

    def hidden_labels(self) -> np.ndarray:
        """True labels of the unlabeled split. Evaluation use only."""
        if self._sealed:
            raise HiddenLabelAccess("hidden target labels read while bundle is sealed")
        self.hidden_reads += 1
        return self._yu

    @contextlib.contextmanager
    def sealed(self):
        prev, self._sealed = self._sealed, True
        try:
            yield self
        finally:
            self._sealed = prev

    def without_unlabeled_inputs(self) -> "DatasetBundle":
        """Copy whose unlabeled inputs are replaced by a single zero row per class.

        The hidden labels are kept so the copy can still be scored.
        """
        Xu = np.zeros((self.K, self.input_dim))
        return DatasetBundle(self.Xs, self.ys, self.Xt, self.yt, Xu, np.arange(self.K), self.K)

    def samples(self, split: str) -> list[Sample]:
        if split == "source":
            return [Sample(tuple(x), "source", int(y)) for x, y in zip(self.Xs, self.ys)]
        if split == "target":
            return [Sample(tuple(x), "target", int(y)) for x, y in zip(self.Xt, self.yt)]
        if split == "unlabeled":
            return [Sample(tuple(x), "target") for x in self.Xu]
        raise ValueError(f"unknown split {split!r}")

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return self.K == other.K and all(
            np.array_equal(a, b)
            for a, b in (
                (self.Xs, other.Xs), (self.ys, other.ys), (self.Xt, other.Xt),
                (self.yt, other.yt), (self.Xu, other.Xu), (self._yu, other._yu),
            )
        )

    def __repr__(self):
        return (f"DatasetBundle(K={self.K}, dim={self.input_dim}, "
                f"source={len(self.Xs)}, target={len(self.Xt)}, unlabeled={len(self.Xu)})")


def class_means(K: int, input_dim: int, separation: float, sigma: float = 1.0) -> np.ndarray:
    """Means on a circle in the first two coordinates, neighbours ``separation * sigma`` apart."""
    radius = separation * sigma / (2.0 * math.sin(math.pi / K))
    angles = 2.0 * np.pi * np.arange(K) / K
    means = np.zeros((K, input_dim))
    means[:, 0] = radius * np.cos(angles)
    if input_dim > 1:
        means[:, 1] = radius * np.sin(angles)
    return means


def apply_shift(X: np.ndarray, shift_magnitude: float, rotation_angle: float) -> np.ndarray:
    """Rotate the first two coordinates about the origin, then translate along the first axis."""
    X = np.array(X, dtype=np.float64)
    if X.shape[1] >= 2:
        c, s = math.cos(rotation_angle), math.sin(rotation_angle)
        x0, x1 = X[:, 0].copy(), X[:, 1].copy()
        X[:, 0] = c * x0 - s * x1
        X[:, 1] = s * x0 + c * x1
    X[:, 0] += shift_magnitude
    return X


def kshot_split(X, y, k: int, seed: int):
    """Seeded k-per-class labeled split; everything else goes to the unlabeled split.

    Returns ``((X_labeled, y_labeled), (X_unlabeled, y_unlabeled))`` with both
    parts ordered by class, then by shuffled position.
    """
    X, y = np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)
    if k < 1:
        raise SplitError("k must be at least 1")
    rng = np.random.default_rng(seed)
    lab, unl = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        if len(idx) < k + 1:
            raise SplitError(f"class {c} has {len(idx)} samples, need at least {k + 1}")
        idx = idx[rng.permutation(len(idx))]
        lab.append(idx[:k])
        unl.append(idx[k:])
    lab, unl = np.concatenate(lab), np.concatenate(unl)
    return (X[lab], y[lab]), (X[unl], y[unl])


def make_shifted_blobs(
    seed: int,
    K: int = 4,
    input_dim: int = 2,
    shift_magnitude: float = 0.0,
    rotation_angle: float = 0.0,
    n_source_per_class: int = 100,
    k_shot: int = 3,
    n_unlabeled_per_class: int = 100,
    separation: float = 6.0,
    sigma: float = 1.0,
) -> DatasetBundle:
    if K < 2:
        raise ValueError("need at least two classes")
    if min(input_dim, n_source_per_class, k_shot, n_unlabeled_per_class) < 1:
        raise ValueError("dimensions and counts must be positive")
    rng = np.random.default_rng(seed)
    means = class_means(K, input_dim, separation, sigma)

    def draw(n_per_class):
        y = np.repeat(np.arange(K), n_per_class)
        X = means[y] + sigma * rng.standard_normal((len(y), input_dim))
        return X, y

    Xs, ys = draw(n_source_per_class)
    Xpool, ypool = draw(k_shot + n_unlabeled_per_class)
    Xpool = apply_shift(Xpool, shift_magnitude, rotation_angle)
    split_seed = int(rng.integers(2**31))
    (Xt, yt), (Xu, yu) = kshot_split(Xpool, ypool, k_shot, split_seed)
    return DatasetBundle(Xs, ys, Xt, yt, Xu, yu, K)


def save_bundle(bundle: DatasetBundle, path) -> None:
    """Line-oriented text: a header, then ``split,label,x1,...,xd`` per sample."""
    lines = [f"{HEADER_PREFIX} K={bundle.K} dim={bundle.input_dim}"]
    for split, X, y in (
        ("source", bundle.Xs, bundle.ys),
        ("target", bundle.Xt, bundle.yt),
        ("unlabeled", bundle.Xu, bundle._yu),
    ):
        for xi, yi in zip(X, y):
            lines.append(",".join([split, str(int(yi))] + [repr(float(v)) for v in xi]))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str):
    parts = line.split()
    if " ".join(parts[:2]) != HEADER_PREFIX or len(parts) != 4:
        raise DataFormatError(f"line 1: expected '{HEADER_PREFIX} K=<K> dim=<d>'")
    try:
        K = int(parts[2].removeprefix("K=")) if parts[2].startswith("K=") else None
        dim = int(parts[3].removeprefix("dim=")) if parts[3].startswith("dim=") else None
    except ValueError:
        K = dim = None
    if K is None or dim is None or K < 2 or dim < 1:
        raise DataFormatError("line 1: malformed K= or dim= field")
    return K, dim


def load_bundle(path) -> DatasetBundle:
    text = Path(path).read_text()
    if not text.endswith("\n"):
        raise DataFormatError("file is truncated (no trailing newline)")
    lines = text.splitlines()
    if not lines:
        raise DataFormatError("empty file")
    K, dim = _parse_header(lines[0])
    rows = {s: ([], []) for s in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != dim + 2:
            raise DataFormatError(f"line {lineno}: expected {dim + 2} fields, got {len(fields)}")
        split, label = fields[0], fields[1]
        if split not in rows:
            raise DataFormatError(f"line {lineno}: unknown split {split!r}")
        if label == "?":
            raise DataFormatError(f"line {lineno}: unknown labels are not supported in bundles")
        try:
            yi = int(label)
            xi = [float(v) for v in fields[2:]]
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        if not 0 <= yi < K:
            raise DataFormatError(f"line {lineno}: class id {yi} outside [0, {K})")
        if not all(math.isfinite(v) for v in xi):
            raise DataFormatError(f"line {lineno}: non-finite coordinate")
        rows[split][0].append(xi)
        rows[split][1].append(yi)

    def arrays(split):
        X, y = rows[split]
        return np.array(X, dtype=np.float64).reshape(-1, dim), np.array(y, dtype=np.int64)

    (Xs, ys), (Xt, yt), (Xu, yu) = (arrays(s) for s in SPLITS)
    return DatasetBundle(Xs, ys, Xt, yt, Xu, yu, K)
