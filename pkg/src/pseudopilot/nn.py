"""Parameters, dense stacks, SGD with momentum and checkpoint files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

CKPT_MAGIC = b"PSEUDOPILOT-CKPT-1\n"


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Named float64 parameters with same-shaped momentum buffers.

    Leaf nodes are cached per name and alias the stored arrays, so an in-place
    optimizer step is seen by the next forward pass without rebuilding them.
    """

    def __init__(self, values: dict[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self._leaves: dict[str, Node] = {}
        for name, v in (values or {}).items():
            self.add(name, v)

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {name!r} has non-finite entries")
        self.values[name] = arr
        self.momentum[name] = np.zeros_like(arr)

    def node(self, name: str) -> Node:
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = self._leaves[name] = Node(self.values[name], name=name)
        return leaf

    def names(self) -> list[str]:
        return list(self.values)

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def __len__(self):
        return len(self.values)

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, v in self.values.items():
            out.values[name] = v.copy()
            out.momentum[name] = self.momentum[name].copy()
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, parameters and momentum buffers."""
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(self.values[n], other.values[n])
            and np.array_equal(self.momentum[n], other.momentum[n])
            for n in self.values
        )


def layer_names(prefix: str, i: int) -> tuple[str, str]:
    return f"{prefix}{i}.weight", f"{prefix}{i}.bias"


def init_mlp(store: ParamStore, arch: Sequence[int], rng: np.random.Generator, prefix: str = "F") -> None:
    """He-normal weights, zero biases."""
    for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
        w_name, b_name = layer_names(prefix, i)
        store.add(w_name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        store.add(b_name, np.zeros(fan_out))


def mlp_forward(params: ParamStore, x, arch: Sequence[int], prefix: str = "F", final_relu: bool = False) -> Node:
    """Affine layers with ReLU between them; the last layer is linear unless ``final_relu``."""
    x = ad.as_node(x)
    if x.value.ndim != 2 or x.shape[1] != arch[0]:
        raise ConfigError(f"input shape {x.shape} does not match input width {arch[0]}")
    n_layers = len(arch) - 1
    h = x
    for i in range(n_layers):
        w_name, b_name = layer_names(prefix, i)
        if w_name not in params or b_name not in params:
            raise ConfigError(f"missing parameters for layer {prefix}{i}")
        if params[w_name].shape != (arch[i], arch[i + 1]) or params[b_name].shape != (arch[i + 1],):
            raise ConfigError(f"layer {prefix}{i} shape does not match arch {tuple(arch)}")
        h = h @ params.node(w_name) + params.node(b_name)
        if i < n_layers - 1 or final_relu:
            h = ad.relu(h)
    return h


def grad(loss: Node, params: ParamStore) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar loss wrt every parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    for leaf in params._leaves.values():
        leaf.grad = None
    ad.backward(loss)
    out = {}
    for name, value in params.values.items():
        leaf = params._leaves.get(name)
        g = None if leaf is None else leaf.grad
        out[name] = np.zeros_like(value) if g is None else np.array(g, dtype=np.float64)
    return out


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_rate: float = 10.0
    decay_power: float = 0.75

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")


def lr_schedule(cfg: OptimConfig, progress: float) -> float:
    """Annealed rate base_lr / (1 + decay_rate * p) ** decay_power."""
    p = min(max(float(progress), 0.0), 1.0)
    return cfg.base_lr / (1.0 + cfg.decay_rate * p) ** cfg.decay_power


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], cfg: OptimConfig, progress: float) -> ParamStore:
    """In-place momentum SGD step with weight decay folded into the gradient."""
    for name, g in grads.items():
        if g.shape != params.values[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    lr = lr_schedule(cfg, progress)
    for name, g in grads.items():
        w = params.values[name]
        v = params.momentum[name]
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * w
        w -= lr * v
    return params


def save_checkpoint(params: ParamStore, path) -> None:
    """Binary container: magic line, record count, then one record per array.

    Record layout (little-endian): kind u8 (0 parameter, 1 momentum),
    name length u16, utf-8 name, ndim u8, dims u64 each, float64 values.
    """
    chunks = [CKPT_MAGIC, struct.pack("<I", 2 * len(params))]
    for kind, table in ((0, params.values), (1, params.momentum)):
        for name, arr in table.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<BH", kind, len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ParamStore:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError("missing PSEUDOPILOT-CKPT-1 header")
    pos = len(CKPT_MAGIC)

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (count,) = read("<I")
    values, momentum = {}, {}
    for rec in range(count):
        kind, name_len = read("<BH")
        if pos + name_len > len(data):
            raise CheckpointError(f"truncated checkpoint in record {rec}")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = read("<B")
        shape = read(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(data):
            raise CheckpointError(f"truncated values in record {rec} ({name!r})")
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
        pos += 8 * n
        target = {0: values, 1: momentum}.get(kind)
        if target is None:
            raise CheckpointError(f"unknown record kind {kind} in record {rec}")
        target[name] = arr.reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last record")
    if set(values) != set(momentum):
        raise CheckpointError("parameter and momentum records do not match")
    store = ParamStore()
    for name, v in values.items():
        store.values[name] = v
        if momentum[name].shape != v.shape:
            raise CheckpointError(f"momentum shape mismatch for {name!r}")
        store.momentum[name] = momentum[name]
    return store


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Shuffled index chunks covering range(n) once."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]
