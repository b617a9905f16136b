"""Reverse-mode autodiff over numpy, sized for desk-scale transformers.

Design constraints that shape this module: gradients must be bit-reproducible
(64-bit mode for all equivalence tests), backward accumulates into persistent
parameter buffers, and the finite-difference checker must stay independent of
every analytic gradient here.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# forward formulas shared with the no-grad inference path


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x * x * x)))


def layer_norm_np(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return gamma * xhat + beta, xhat, inv


def softmax_np(x: np.ndarray, allowed: np.ndarray | None = None) -> np.ndarray:
    if allowed is not None:
        if not np.all(allowed.any(axis=-1)):
            raise ShapeError("masked_softmax: a row is fully masked")
        x = np.where(allowed, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# graph

class Tensor:
    __slots__ = ("data", "grad", "name", "is_param", "_parents", "_vjps", "_needs_grad")

    def __init__(self, data: np.ndarray, parents=(), vjps=(), *,
                 name: str | None = None, is_param: bool = False):
        self.data = data
        self.grad = np.zeros_like(data) if is_param else None
        self.name = name
        self.is_param = is_param
        self._parents = tuple(parents)
        self._vjps = tuple(vjps)
        self._needs_grad = is_param or any(p._needs_grad for p in self._parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or ("param" if self.is_param else "tensor")
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e
    return Tensor(out, (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(g, b.shape),
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from e
    return Tensor(out, (a, b), (
        lambda g: _unbroadcast(g, a.shape),
        lambda g: _unbroadcast(-g, b.shape),
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e
    return Tensor(out, (a, b), (
        lambda g: _unbroadcast(g * b.data, a.shape),
        lambda g: _unbroadcast(g * a.data, b.shape),
    ))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor(a.data * s, (a,), (lambda g: g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    return Tensor(a.data @ b.data, (a, b), (
        lambda g: g @ b.data.swapaxes(-1, -2),
        lambda g: a.data.swapaxes(-1, -2) @ g,
    ))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), (a,),
                  (lambda g: np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"rows: [{start}:{stop}] out of range for shape {a.shape}")

    def vjp(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return out

    return Tensor(a.data[start:stop].copy(), (a,), (vjp,))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input")
    for p in parts[1:]:
        _check_same_dtype("concat", parts[0], p)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * parts[i].ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    out = np.concatenate([p.data for p in parts], axis=axis)
    return Tensor(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def embedding(weights: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weights.shape[0]):
        raise ShapeError(f"embedding: id out of range for table of {weights.shape[0]}")

    def vjp(g):
        out = np.zeros_like(weights.data)
        np.add.at(out, idx, g)
        return out

    return Tensor(weights.data[idx], (weights,), (vjp,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature dim {d}")
    out, xhat, inv = layer_norm_np(x.data, gamma.data, beta.data, eps)
    lead = tuple(range(x.ndim - 1))

    def vjp_x(g):
        dxh = g * gamma.data
        return inv * (dxh
                      - dxh.mean(axis=-1, keepdims=True)
                      - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))

    return Tensor(out, (x, gamma, beta), (
        vjp_x,
        lambda g: (g * xhat).sum(axis=lead),
        lambda g: g.sum(axis=lead),
    ))


def gelu(x: Tensor) -> Tensor:
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data * x.data)
        return g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du)

    return Tensor(0.5 * x.data * (1.0 + t), (x,), (vjp,))


def softmax(x: Tensor) -> Tensor:
    p = softmax_np(x.data)
    return Tensor(p, (x,), (
        lambda g: p * (g - (g * p).sum(axis=-1, keepdims=True)),
    ))


def masked_softmax(x: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last dim with disallowed slots pinned to exactly zero.

    `allowed` is a constant boolean mask broadcastable to x. Gradients at
    masked positions are exactly zero, so a masked slot can never leak.
    """
    p = softmax_np(x.data, np.broadcast_to(allowed, x.shape))
    return Tensor(p, (x,), (
        lambda g: p * (g - (g * p).sum(axis=-1, keepdims=True)),
    ))


def log_softmax(x: Tensor) -> Tensor:
    y = log_softmax_np(x.data)
    p = np.exp(y)
    return Tensor(y, (x,), (
        lambda g: g - p * g.sum(axis=-1, keepdims=True),
    ))


def take_lastdim(x: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"take_lastdim: need (T,V) and (T,) ids, got {x.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"take_lastdim: id out of range for width {x.shape[1]}")
    rng = np.arange(x.shape[0])

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rng, idx), g)
        return out

    return Tensor(x.data[rng, idx], (x,), (vjp,))


def sum_all(x: Tensor) -> Tensor:
    return Tensor(x.data.sum(), (x,), (lambda g: g * np.ones_like(x.data),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor(x.data.mean(), (x,), (lambda g: g * np.full_like(x.data, 1.0 / n),))


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> None:
    """Accumulate dloss/dparam into every reachable parameter's .grad.

    Calling twice without zero_grad doubles the buffers exactly.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar, got shape {loss.shape}")
    if not loss._parents and not loss.is_param:
        raise GraphError("tensor is not part of a recorded computation")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_param:
            node.grad += g
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent._needs_grad:
                continue
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# parameters

class ParamStore:
    """Named parameter tensors with persistent gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data), name=name, is_param=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def n_parameters(self) -> int:
        return sum(int(t.data.size) for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            total += float((t.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm and norm > 0:
            factor = max_norm / norm
            for t in self._params.values():
                t.grad *= t.grad.dtype.type(factor)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}


# ---------------------------------------------------------------------------
# rng and gradient checking

class Rng:
    """Seeded random source; every draw in the system flows through one."""

    def __init__(self, seed):
        self._g = np.random.default_rng(seed)

    def normal(self, shape, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self._g.standard_normal(shape) * std).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._g.permutation(n)

    def integers(self, low: int, high: int) -> int:
        return int(self._g.integers(low, high))

    def uniform(self) -> float:
        return float(self._g.random())

    def choice_p(self, p: np.ndarray) -> int:
        return int(self._g.choice(len(p), p=p))


def grad_check(scalar_fn: Callable[[], Tensor], store: ParamStore,
               eps: float = 1e-5, sample_fraction: float = 0.05,
               seed: int = 0) -> float:
    """Central-difference check of backward() against scalar_fn.

    Samples a fraction of coordinates per parameter (at least one each) and
    returns the worst relative error |a - n| / max(1e-8, |a| + |n|). Requires
    a 64-bit parameter build; float32 noise would swamp the check.
    """
    for name, p in store.items():
        if p.data.dtype != np.float64:
            raise ShapeError(f"grad_check requires float64 params, {name} is {p.data.dtype}")

    store.zero_grad()
    backward(scalar_fn())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in store.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = flat.size
        k = min(n, max(1, int(round(n * sample_fraction))))
        for i in rng.choice(n, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = scalar_fn().item()
            flat[i] = orig - eps
            f_minus = scalar_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(gflat[i])
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst
