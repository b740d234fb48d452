"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

A ``Value`` wraps an ndarray together with a gradient accumulator and the
graph edges needed for the backward pass. Operations build the graph lazily:
a result only records its parents when at least one input requires a
gradient, so forward passes over frozen parameter trees allocate no graph
at all (that is the "inference mode" used by the teacher networks).

Reductions rely on numpy's deterministic summation, so identical graphs
evaluated on identical inputs are bitwise reproducible on a given platform.
Max/min reductions route their gradient to the first (lowest-index) extremum.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Value",
    "cat",
    "backward",
    "zero_grads",
    "finite_diff_check",
    "finite_diff_report",
    "GradCheckError",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class GradCheckError(RuntimeError):
    """Raised when a finite-difference probe produces a non-finite loss."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcast when producing it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad.reshape(shape)


class Value:
    """Node in the computation graph: data, grad, and backward recipe."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Value", ...] = (),
        backward: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.data = data if type(data) is np.ndarray else np.asarray(data)
        self._grad = None  # materialized lazily; always reads as data-shaped
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _lift(self, other) -> "Value":
        if isinstance(other, Value):
            return other
        if isinstance(other, (int, float)):
            # match own dtype so python scalars never promote a float32 graph
            return Value(np.asarray(other, dtype=self.data.dtype))
        return Value(np.asarray(other))

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other) -> "Value":
        other = self._lift(other)
        out = self.data + other.data

        def bwd(g):
            return _unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)

        return _make(out, (self, other), bwd)

    __radd__ = __add__

    def __sub__(self, other) -> "Value":
        other = self._lift(other)
        out = self.data - other.data

        def bwd(g):
            return _unbroadcast(g, self.data.shape), -_unbroadcast(g, other.data.shape)

        return _make(out, (self, other), bwd)

    def __rsub__(self, other) -> "Value":
        return self._lift(other).__sub__(self)

    def __mul__(self, other) -> "Value":
        other = self._lift(other)
        out = self.data * other.data

        def bwd(g):
            return (
                _unbroadcast(g * other.data, self.data.shape),
                _unbroadcast(g * self.data, other.data.shape),
            )

        return _make(out, (self, other), bwd)

    __rmul__ = __mul__

    def __neg__(self) -> "Value":
        out = -self.data

        def bwd(g):
            return (-g,)

        return _make(out, (self,), bwd)

    def __matmul__(self, other) -> "Value":
        other = self._lift(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul requires operands with ndim >= 2")
        out = self.data @ other.data

        def bwd(g):
            ga = g @ other.data.swapaxes(-1, -2)
            gb = self.data.swapaxes(-1, -2) @ g
            return (
                _unbroadcast(ga, self.data.shape),
                _unbroadcast(gb, other.data.shape),
            )

        return _make(out, (self, other), bwd)

    def sqdiff(self, other) -> "Value":
        """Elementwise squared difference (a - b)**2."""
        other = self._lift(other)
        d = self.data - other.data
        out = d * d

        def bwd(g):
            gd = 2.0 * d * g
            return _unbroadcast(gd, self.data.shape), _unbroadcast(-gd, other.data.shape)

        return _make(out, (self, other), bwd)

    # -- shape ops -----------------------------------------------------

    def reshape(self, shape) -> "Value":
        out = self.data.reshape(shape)

        def bwd(g):
            return (g.reshape(self.data.shape),)

        return _make(out, (self,), bwd)

    def transpose(self, axes=None) -> "Value":
        out = np.transpose(self.data, axes)
        if axes is None:
            inv = None
        else:
            inv = np.argsort(np.asarray(axes))

        def bwd(g):
            return (np.transpose(g, inv),)

        return _make(out, (self,), bwd)

    def take(self, indices, axis: int = 0) -> "Value":
        """Index-select along `axis`; backward scatter-adds into the source."""
        idx = np.asarray(indices)
        out = np.take(self.data, idx, axis=axis)

        def bwd(g):
            gx = np.zeros_like(self.data)
            gm = np.moveaxis(gx, axis, 0)
            np.add.at(gm, idx, np.moveaxis(g, axis, 0))
            return (gx,)

        return _make(out, (self,), bwd)

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Value":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.data.shape),)

        return _make(out, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Value":
        out = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else self.data.shape[axis]

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, self.data.shape),)

        return _make(out, (self,), bwd)

    def _extremum(self, axis, keepdims, argfn, redfn) -> "Value":
        out = redfn(self.data, axis=axis, keepdims=keepdims)

        def bwd(g):
            gx = np.zeros_like(self.data)
            if axis is None:
                flat_idx = argfn(self.data)  # first occurrence on ties
                gx.reshape(-1)[flat_idx] = g
            else:
                idx = np.expand_dims(argfn(self.data, axis=axis), axis)
                ge = g if keepdims else np.expand_dims(g, axis)
                np.put_along_axis(gx, idx, ge, axis=axis)
            return (gx,)

        return _make(out, (self,), bwd)

    def max(self, axis=None, keepdims: bool = False) -> "Value":
        return self._extremum(axis, keepdims, np.argmax, np.max)

    def min(self, axis=None, keepdims: bool = False) -> "Value":
        return self._extremum(axis, keepdims, np.argmin, np.min)

    # -- elementwise nonlinearities -------------------------------------

    def exp(self) -> "Value":
        out = np.exp(self.data)

        def bwd(g):
            return (g * out,)

        return _make(out, (self,), bwd)

    def log(self) -> "Value":
        out = np.log(self.data)

        def bwd(g):
            return (g / self.data,)

        return _make(out, (self,), bwd)

    def sigmoid(self) -> "Value":
        out = _sigmoid(self.data)

        def bwd(g):
            return (g * out * (1.0 - out),)

        return _make(out, (self,), bwd)

    def logsigmoid(self) -> "Value":
        # stable log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|))
        x = self.data
        out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

        def bwd(g):
            return (g * _sigmoid(-x),)

        return _make(out, (self,), bwd)

    def gelu(self) -> "Value":
        x = self.data
        x2 = x * x
        t = np.tanh(_GELU_C * x + (_GELU_C * _GELU_A) * (x2 * x))
        out = 0.5 * (x + x * t)

        def bwd(g):
            du = _GELU_C + (3.0 * _GELU_C * _GELU_A) * x2
            dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            return (g * dydx,)

        return _make(out, (self,), bwd)

    def softmax(self, axis: int = -1) -> "Value":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return _make(out, (self,), bwd)

    def layer_norm(self, eps: float = 1e-5) -> "Value":
        """Normalize the last axis to zero mean / unit variance (no affine)."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv

        def bwd(g):
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - y * gym),)

        return _make(y, (self,), bwd)

    # -- autodiff driver -------------------------------------------------

    def backward(self) -> None:
        backward(self)

    def detach(self) -> np.ndarray:
        return self.data.copy()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _make(out_data, parents, backward_fn) -> Value:
    if any(p.requires_grad for p in parents):
        return Value(out_data, requires_grad=True, parents=parents, backward=backward_fn)
    return Value(out_data)


def cat(values: Iterable[Value], axis: int = 0) -> Value:
    """Concatenate values along `axis`."""
    vals = list(values)
    if not vals:
        raise ValueError("cat requires at least one value")
    out = np.concatenate([v.data for v in vals], axis=axis)
    sizes = [v.data.shape[axis] for v in vals]

    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _make(out, tuple(vals), bwd)


def backward(root: Value) -> None:
    """Populate grads of every value reachable from a scalar root.

    Gradients accumulate into ``.grad``: calling backward twice without
    zeroing doubles every leaf gradient exactly.
    """
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    topo: list[Value] = []
    visited: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # pass-local adjoints keep repeated backward calls purely additive
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = adj.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            prev = adj.get(key)
            adj[key] = pg if prev is None else prev + pg

    for node in topo:
        g = adj.get(id(node))
        if g is not None:
            node._grad = g if node._grad is None else node._grad + g


def zero_grads(values: Iterable[Value]) -> None:
    for v in values:
        v._grad = None


def finite_diff_report(
    f: Callable[[dict[str, Value]], Value],
    params: dict[str, Value],
    eps: float = 1e-4,
    max_coords_per_param: int | None = 16,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Central-difference gradient check, one max relative error per parameter.

    `f` must be deterministic; callers wanting full precision should supply
    float64 parameter trees. The relative error at a coordinate is
    ``|g_auto - g_num| / max(1, |g_auto|, |g_num|)``.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    zero_grads(params.values())
    base = f(params)
    if base.data.size != 1:
        raise ValueError("finite_diff check target must be scalar")
    if not np.isfinite(base.data):
        raise GradCheckError("loss is non-finite at the unperturbed point")
    base.backward()
    auto = {name: v.grad.copy() for name, v in params.items()}

    report: dict[str, float] = {}
    for name, v in params.items():
        flat = v.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(f(params).data)
            flat[c] = orig - eps
            lo = float(f(params).data)
            flat[c] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise GradCheckError(f"non-finite loss while perturbing parameter '{name}'")
            g_num = (hi - lo) / (2.0 * eps)
            g_auto = float(auto[name].reshape(-1)[c])
            err = abs(g_auto - g_num) / max(1.0, abs(g_auto), abs(g_num))
            worst = max(worst, err)
        report[name] = worst
    return report


def finite_diff_check(
    f: Callable[[dict[str, Value]], Value],
    params: dict[str, Value],
    eps: float = 1e-4,
    max_coords_per_param: int | None = 16,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error of autodiff gradients against central differences."""
    report = finite_diff_report(f, params, eps, max_coords_per_param, rng)
    return max(report.values()) if report else 0.0
