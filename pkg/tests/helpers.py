import numpy as np

from pseudopilot.model import CLASSIFIER_WEIGHT, Model, init_model
from pseudopilot.nn import ParamStore

KINK_GAP = 1e-3


def _min_hidden_preactivation(model: Model, X: np.ndarray) -> float:
    h, gap = X, np.inf
    n = len(model.arch) - 1
    for i in range(n):
        z = h @ model.params[f"F{i}.weight"] + model.params[f"F{i}.bias"]
        if i < n - 1:
            gap = min(gap, np.abs(z).min())
            h = np.maximum(z, 0)
    return gap


def random_setup(rng: np.random.Generator, hidden=True, margin=0.5, scale=30.0):
    """Small random model and labeled source/target plus unlabeled batches.

    Draws are repeated until no hidden ReLU input sits within ``KINK_GAP`` of
    zero, keeping central differences away from kinks, and no feature vector
    is near zero.
    """
    while True:
        K = int(rng.integers(2, 6))
        d = int(rng.integers(2, 9))
        in_dim = int(rng.integers(2, 5))
        arch = (in_dim, int(rng.integers(3, 7)), d) if hidden else (in_dim, d)
        model = init_model(arch, K, rng, scale=scale, margin=margin)
        ns, nt, nu = (int(rng.integers(1, 9)) for _ in range(3))
        Xs, Xt, Xu = (rng.uniform(-1, 1, size=(n, in_dim)) for n in (ns, nt, nu))
        ys, yt = rng.integers(0, K, ns), rng.integers(0, K, nt)
        X = np.vstack([Xs, Xt, Xu])
        feat_norm = np.linalg.norm(model.features(X).value, axis=1).min()
        if _min_hidden_preactivation(model, X) > KINK_GAP and feat_norm > 0.1:
            return model, (Xs, ys), (Xt, yt), Xu


def linear_model(W_feat, W_cls, scale=30.0, margin=0.5) -> Model:
    """Single linear extractor layer with zero bias and the given class weights."""
    W_feat = np.asarray(W_feat, dtype=float)
    params = ParamStore({
        "F0.weight": W_feat, "F0.bias": np.zeros(W_feat.shape[1]),
        CLASSIFIER_WEIGHT: np.asarray(W_cls, dtype=float),
    })
    return Model(params, (W_feat.shape[0], W_feat.shape[1]), scale, margin)


def ce_oracle(cos: np.ndarray, y, scale: float, margin: float = 0.0) -> float:
    """Per-sample loop: -log softmax with the true logit margin-shifted."""
    total = 0.0
    for row, label in zip(cos, y):
        logits = [scale * c for c in row]
        theta = np.arccos(np.clip(row[label], -1, 1))
        logits[label] = scale * np.cos(theta + margin)
        top = max(logits)
        lse = top + np.log(sum(np.exp(v - top) for v in logits))
        total += lse - logits[label]
    return total / len(y)


def cos_oracle(feats: np.ndarray, W: np.ndarray) -> np.ndarray:
    out = np.zeros((len(feats), len(W)))
    for i, f in enumerate(feats):
        for j, w in enumerate(W):
            out[i, j] = float(np.dot(f, w) / (np.linalg.norm(f) * np.linalg.norm(w)))
    return np.clip(out, -1, 1)
