"""Minimal reverse-mode autodiff core for the tagger.

Float64 numpy throughout.  Every operation builds a node in a dynamic
graph; ``backward`` walks the graph once and accumulates gradients into
leaf variables.  The LSTM cell is a single fused node with a hand-coded
backward pass, which keeps graph overhead negligible at the sequence
lengths this toolkit handles.

Checkpoints are a versioned little-endian binary container holding the
parameters, the optimizer moments, and one JSON metadata record; the
round trip is bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Var:
    """A float64 array plus its gradient and graph linkage."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents: tuple = (), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


def _accum(var: Var, grad: np.ndarray) -> None:
    if var.grad is None:
        var.grad = np.zeros_like(var.value)
    var.grad += grad


def _node(value, parents: tuple, backward) -> Var:
    if _grad_enabled:
        return Var(value, parents, backward)
    return Var(value)


def backward(root: Var) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.value.shape != ():
        raise ValueError("backward expects a scalar root")
    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    _accum(root, np.ones_like(root.value))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# --------------------------------------------------------------------------
# Operations


def const(value) -> Var:
    return Var(value)


def add(a: Var, b: Var) -> Var:
    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.value + b.value, (a, b), back)


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def back(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return _node(av * bv, (a, b), back)


def scale(a: Var, s: float) -> Var:
    def back(g):
        _accum(a, g * s)

    return _node(a.value * s, (a,), back)


def concat(parts: Sequence[Var]) -> Var:
    sizes = [p.value.shape[0] for p in parts]

    def back(g):
        offset = 0
        for p, size in zip(parts, sizes):
            _accum(p, g[offset : offset + size])
            offset += size

    return _node(np.concatenate([p.value for p in parts]), tuple(parts), back)


def slice_(a: Var, start: int, stop: int) -> Var:
    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        a.grad[start:stop] += g

    return _node(a.value[start:stop], (a,), back)


def affine(w: Var, x: Var, b: Var) -> Var:
    """w @ x + b for a matrix w and vectors x, b."""
    xv = x.value

    def back(g):
        _accum(w, np.outer(g, xv))
        _accum(x, w.value.T @ g)
        _accum(b, g)

    return _node(w.value @ xv + b.value, (w, x, b), back)


def sigmoid(a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))

    def back(g):
        _accum(a, g * s * (1.0 - s))

    return _node(s, (a,), back)


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)

    def back(g):
        _accum(a, g * (1.0 - t * t))

    return _node(t, (a,), back)


def embedding(table: Var, index: int) -> Var:
    if not 0 <= index < table.value.shape[0]:
        raise IndexError(f"embedding row {index} out of range")

    def back(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        table.grad[index] += g

    return _node(table.value[index], (table,), back)


def vsum(items: Sequence[Var]) -> Var:
    """Sum of scalar Vars."""

    def back(g):
        for item in items:
            _accum(item, g)

    return _node(sum(i.value.item() for i in items), tuple(items), back)


def vec_sum(a: Var) -> Var:
    """Sum of all entries of one Var, as a scalar."""

    def back(g):
        _accum(a, np.full_like(a.value, g))

    return _node(a.value.sum(), (a,), back)


def weighted_sum(items: Sequence[Var], weights: Sequence[float]) -> Var:
    """Fixed-coefficient linear combination of scalar Vars."""

    def back(g):
        for item, w in zip(items, weights):
            _accum(item, g * w)

    total = sum(float(i.value) * w for i, w in zip(items, weights))
    return _node(total, tuple(items), back)


@dataclass
class LstmCellState:
    """Hidden and cell vectors of one LSTM cell."""

    hidden: Var
    cell: Var

    @classmethod
    def zeros(cls, size: int) -> "LstmCellState":
        return cls(Var(np.zeros(size)), Var(np.zeros(size)))


def lstm_step(w: Var, b: Var, x: Var, state: LstmCellState) -> LstmCellState:
    """One LSTM cell update with packed (i, f, g, o) gate weights.

    ``w`` has shape (4H, D+H), ``b`` (4H,); gates are sigmoid except the
    tanh candidate.  Returns the new state; fully differentiable w.r.t.
    the weights, the input, and the previous state.
    """
    h_prev, c_prev = state.hidden, state.cell
    hsize = h_prev.value.shape[0]
    if w.value.shape != (4 * hsize, x.value.shape[0] + hsize):
        raise ValueError(
            f"lstm weight shape {w.value.shape} does not fit "
            f"input {x.value.shape[0]} and hidden {hsize}"
        )
    xh = np.concatenate([x.value, h_prev.value])
    z = w.value @ xh + b.value
    gi = 1.0 / (1.0 + np.exp(-z[:hsize]))
    gf = 1.0 / (1.0 + np.exp(-z[hsize : 2 * hsize]))
    gg = np.tanh(z[2 * hsize : 3 * hsize])
    go = 1.0 / (1.0 + np.exp(-z[3 * hsize :]))
    c_new = gf * c_prev.value + gi * gg
    tc = np.tanh(c_new)
    h_new = go * tc
    input_size = x.value.shape[0]

    def back(g):
        gh = g[:hsize]
        gc = g[hsize:] + gh * go * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gc * gg * gi * (1.0 - gi),
                gc * c_prev.value * gf * (1.0 - gf),
                gc * gi * (1.0 - gg * gg),
                gh * tc * go * (1.0 - go),
            ]
        )
        _accum(b, dz)
        _accum(w, np.outer(dz, xh))
        dxh = w.value.T @ dz
        _accum(x, dxh[:input_size])
        _accum(h_prev, dxh[input_size:])
        _accum(c_prev, gc * gf)

    packed = _node(np.concatenate([h_new, c_new]), (w, b, x, h_prev, c_prev), back)
    return LstmCellState(hidden=slice_(packed, 0, hsize), cell=slice_(packed, hsize, 2 * hsize))


def log_softmax(values: np.ndarray) -> np.ndarray:
    """Numerically stable log softmax (plain numpy, no graph)."""
    shifted = values - values.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(values: np.ndarray) -> np.ndarray:
    e = np.exp(values - values.max())
    return e / e.sum()


def softmax_cross_entropy(logits: Var, target: int) -> Var:
    """-log softmax(logits)[target], stable under large logits."""
    if not 0 <= target < logits.value.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.value.shape[0]} classes")
    ls = log_softmax(logits.value)

    def back(g):
        p = np.exp(ls)
        p[target] -= 1.0
        _accum(logits, g * p)

    return _node(-ls[target], (logits,), back)


def dropout_mask(
    length: int, probability: float, rng: np.random.Generator, train: bool = True
) -> np.ndarray:
    """Inverted-scaling dropout mask; all-ones outside training."""
    if not 0.0 <= probability < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {probability}")
    if not train or probability == 0.0:
        return np.ones(length)
    keep = rng.random(length) >= probability
    return keep / (1.0 - probability)


def apply_mask(a: Var, mask: np.ndarray) -> Var:
    def back(g):
        _accum(a, g * mask)

    return _node(a.value * mask, (a,), back)


# --------------------------------------------------------------------------
# Parameters and optimization


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], limit: float = 0.2) -> np.ndarray:
    """Uniform draws strictly inside (-limit, limit)."""
    values = rng.uniform(-limit, limit, size=shape)
    values[values <= -limit] = 0.0
    return values


class ParameterStore:
    """Named parameters with gradient accumulators and Adam moments."""

    def __init__(self) -> None:
        self.params: dict[str, Var] = {}
        self.moments_m: dict[str, np.ndarray] = {}
        self.moments_v: dict[str, np.ndarray] = {}
        self.step: int = 0

    def add(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        var = Var(np.array(value, dtype=np.float64))
        self.params[name] = var
        self.moments_m[name] = np.zeros_like(var.value)
        self.moments_v[name] = np.zeros_like(var.value)
        return var

    def __getitem__(self, name: str) -> Var:
        return self.params[name]

    def __iter__(self) -> Iterable[str]:
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grads(self) -> None:
        for var in self.params.values():
            var.grad = None

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: var.value.copy() for name, var in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, var in self.params.items():
            var.value[...] = values[name]


def clip_gradients(store: ParameterStore, max_norm: float = 5.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for var in store.params.values():
        if var.grad is not None:
            total += float((var.grad * var.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for var in store.params.values():
            if var.grad is not None:
                var.grad *= factor
    return float(norm)


def adam_step(
    store: ParameterStore,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Adam with bias correction; clears gradient accumulators afterward."""
    store.step += 1
    bc1 = 1.0 - beta1**store.step
    bc2 = 1.0 - beta2**store.step
    for name, var in store.params.items():
        grad = var.grad if var.grad is not None else np.zeros_like(var.value)
        m = store.moments_m[name]
        v = store.moments_v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        var.value -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.zero_grads()


def gradient_check(
    function: Callable[[ParameterStore], Var],
    store: ParameterStore,
    epsilon: float | Sequence[float] = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` must rebuild its graph on every call and return a scalar.
    Passing several step sizes scores each coordinate at its best one:
    cancellation noise shrinks with larger steps and truncation error with
    smaller ones, and no single step serves both regimes at once.
    """
    epsilons = (epsilon,) if isinstance(epsilon, float) else tuple(epsilon)
    store.zero_grads()
    backward(function(store))
    analytic = {
        name: (var.grad.copy() if var.grad is not None else np.zeros_like(var.value))
        for name, var in store.params.items()
    }
    store.zero_grads()

    worst = 0.0
    with no_grad():
        for name, var in store.params.items():
            flat = var.value.reshape(-1)
            for i in range(flat.shape[0]):
                original = flat[i]
                a = analytic[name].reshape(-1)[i]
                best = math.inf
                for eps in epsilons:
                    flat[i] = original + eps
                    up = float(function(store).value)
                    flat[i] = original - eps
                    down = float(function(store).value)
                    flat[i] = original
                    numeric = (up - down) / (2.0 * eps)
                    best = min(best, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                worst = max(worst, best)
    return worst


# --------------------------------------------------------------------------
# Checkpoint container

_MAGIC = b"VTCK"
_VERSION = 1


def save_checkpoint(
    stream: BinaryIO,
    store: ParameterStore,
    metadata: dict,
    include_optimizer: bool = True,
) -> None:
    """Write the versioned binary checkpoint (bit-exact round trip)."""
    stream.write(_MAGIC)
    stream.write(struct.pack("<II", _VERSION, len(store.params)))
    for name, var in store.params.items():
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        dims = var.value.shape
        stream.write(struct.pack("<I", len(dims)))
        for d in dims:
            stream.write(struct.pack("<I", d))
        stream.write(np.ascontiguousarray(var.value, dtype="<f8").tobytes())
    stream.write(struct.pack("<B", 1 if include_optimizer else 0))
    if include_optimizer:
        stream.write(struct.pack("<Q", store.step))
        for name in store.params:
            stream.write(np.ascontiguousarray(store.moments_m[name], dtype="<f8").tobytes())
            stream.write(np.ascontiguousarray(store.moments_v[name], dtype="<f8").tobytes())
    meta_bytes = json.dumps(metadata, ensure_ascii=False, sort_keys=True).encode("utf-8")
    stream.write(struct.pack("<Q", len(meta_bytes)))
    stream.write(meta_bytes)


def _read_exact(stream: BinaryIO, count: int) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise ValueError("truncated checkpoint")
    return data


def load_checkpoint(stream: BinaryIO) -> tuple[ParameterStore, dict]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    if _read_exact(stream, 4) != _MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", _read_exact(stream, 8))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    store = ParameterStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(stream, 4))
        name = _read_exact(stream, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(stream, 4))
        dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(_read_exact(stream, 8 * size), dtype="<f8").copy().reshape(dims)
        store.add(name, values)
    (has_optimizer,) = struct.unpack("<B", _read_exact(stream, 1))
    if has_optimizer:
        (store.step,) = struct.unpack("<Q", _read_exact(stream, 8))
        for name, var in store.params.items():
            size = var.value.size
            store.moments_m[name] = (
                np.frombuffer(_read_exact(stream, 8 * size), dtype="<f8")
                .copy()
                .reshape(var.value.shape)
            )
            store.moments_v[name] = (
                np.frombuffer(_read_exact(stream, 8 * size), dtype="<f8")
                .copy()
                .reshape(var.value.shape)
            )
    (meta_len,) = struct.unpack("<Q", _read_exact(stream, 8))
    metadata = json.loads(_read_exact(stream, meta_len).decode("utf-8"))
    return store, metadata
