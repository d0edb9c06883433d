"""Central finite-difference oracle, independent of the reverse-mode path."""

import numpy as np

from pseudopilot.nn import ParamStore, grad

STEP = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference over the larger of the two max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-10:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(loss_fn, store: ParamStore, name: str, step: float = STEP) -> np.ndarray:
    w = store.values[name]
    out = np.zeros_like(w)
    for i in np.ndindex(w.shape):
        orig = w[i]
        w[i] = orig + step
        up = float(loss_fn().value)
        w[i] = orig - step
        down = float(loss_fn().value)
        w[i] = orig
        out[i] = (up - down) / (2 * step)
    return out


def check_param_grads(loss_fn, store: ParamStore, names=None) -> float:
    """Relative error of the concatenated gradient over the named parameters."""
    analytic = grad(loss_fn(), store)
    names = list(names or store.names())
    a = np.concatenate([analytic[n].ravel() for n in names])
    n = np.concatenate([numeric_grad(loss_fn, store, name).ravel() for name in names])
    return rel_error(a, n)
