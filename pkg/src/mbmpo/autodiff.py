"""Dense math and reverse-mode differentiation for small MLPs.

The engine is deliberately tiny: values are float64 numpy arrays, the
primitive set is what policy/model objectives need (affine maps, tanh,
relu, exp, log, sqrt, square, sum, mean) and nothing else. Parameters
live in flat `ParameterVector`s with a deterministic (name, shape)
layout so optimizers can treat everything as one vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, UnsupportedOperationError

Array = np.ndarray


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sum_to(shape: tuple[int, ...], out_shape: tuple[int, ...]):
    if shape == out_shape:
        return lambda g: g
    return lambda g: _unbroadcast(g, shape)


def _neg_sum_to(shape: tuple[int, ...], out_shape: tuple[int, ...]):
    if shape == out_shape:
        return lambda g: -g
    return lambda g: _unbroadcast(-g, shape)


def _scaled_sum_to(scale: Array, shape: tuple[int, ...], out_shape: tuple[int, ...]):
    if shape == out_shape:
        return lambda g: g * scale
    return lambda g: _unbroadcast(g * scale, shape)


class Node:
    """A value in the computation graph plus vector-Jacobian hooks."""

    __slots__ = ("value", "parents")
    __array_priority__ = 100.0
    __array_ufunc__ = None  # force numpy to defer to our reflected ops

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents  # tuple of (Node, vjp callable)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        out = self.value + (other.value if isinstance(other, Node) else np.asarray(other))
        parents = [(self, _sum_to(self.shape, out.shape))]
        if isinstance(other, Node):
            parents.append((other, _sum_to(other.shape, out.shape)))
        return Node(out, tuple(parents))

    __radd__ = __add__

    def __neg__(self):
        return Node(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        out = self.value - (other.value if isinstance(other, Node) else np.asarray(other))
        parents = [(self, _sum_to(self.shape, out.shape))]
        if isinstance(other, Node):
            parents.append((other, _neg_sum_to(other.shape, out.shape)))
        return Node(out, tuple(parents))

    def __rsub__(self, other):
        out = np.asarray(other) - self.value
        return Node(out, ((self, _neg_sum_to(self.shape, out.shape)),))

    def __mul__(self, other):
        ov = other.value if isinstance(other, Node) else np.asarray(other, dtype=np.float64)
        out = self.value * ov
        parents = [(self, _scaled_sum_to(ov, self.shape, out.shape))]
        if isinstance(other, Node):
            parents.append((other, _scaled_sum_to(self.value, other.shape, out.shape)))
        return Node(out, tuple(parents))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return Node(
                self.value / other.value,
                (
                    (self, lambda g, s=self.shape, ov=other.value: _unbroadcast(g / ov, s)),
                    (
                        other,
                        lambda g, s=other.shape, sv=self.value, ov=other.value: _unbroadcast(
                            -g * sv / (ov * ov), s
                        ),
                    ),
                ),
            )
        ov = np.asarray(other, dtype=np.float64)
        return Node(
            self.value / ov,
            ((self, lambda g, s=self.shape: _unbroadcast(g / ov, s)),),
        )

    def __rtruediv__(self, other):
        ov = np.asarray(other, dtype=np.float64)
        return Node(
            ov / self.value,
            (
                (
                    self,
                    lambda g, s=self.shape, sv=self.value: _unbroadcast(-g * ov / (sv * sv), s),
                ),
            ),
        )

    def __matmul__(self, other):
        a = self.value
        b = other.value if isinstance(other, Node) else np.asarray(other, dtype=np.float64)
        out = a @ b
        parents = [(self, _matmul_vjp_left(a, b))]
        if isinstance(other, Node):
            parents.append((other, _matmul_vjp_right(a, b)))
        return Node(out, tuple(parents))

    def __rmatmul__(self, other):
        a = np.asarray(other, dtype=np.float64)
        b = self.value
        return Node(a @ b, ((self, _matmul_vjp_right(a, b)),))

    def __pow__(self, other):  # keep the primitive set closed
        raise UnsupportedOperationError("power is not a supported primitive; use square/sqrt")


def _matmul_vjp_left(a: Array, b: Array) -> Callable[[Array], Array]:
    if a.ndim == 1 and b.ndim == 1:  # dot -> scalar
        return lambda g: g * b
    if a.ndim == 1:  # (n,) @ (n,m) -> (m,)
        return lambda g: b @ g
    if b.ndim == 1:  # (m,n) @ (n,) -> (m,)
        return lambda g: np.outer(g, b)
    return lambda g: g @ b.T  # (N,n) @ (n,m)


def _matmul_vjp_right(a: Array, b: Array) -> Callable[[Array], Array]:
    if a.ndim == 1 and b.ndim == 1:
        return lambda g: g * a
    if a.ndim == 1:
        return lambda g: np.outer(a, g)
    if b.ndim == 1:
        return lambda g: a.T @ g
    return lambda g: a.T @ g


# -- primitive functions (dispatch on Node vs ndarray) -----------------


def tanh(x):
    if isinstance(x, Node):
        out = np.tanh(x.value)
        return Node(out, ((x, lambda g: g * (1.0 - out * out)),))
    return np.tanh(x)


def relu(x):
    if isinstance(x, Node):
        mask = x.value > 0.0
        return Node(np.where(mask, x.value, 0.0), ((x, lambda g: g * mask),))
    return np.maximum(x, 0.0)


def exp(x):
    if isinstance(x, Node):
        out = np.exp(x.value)
        return Node(out, ((x, lambda g: g * out),))
    return np.exp(x)


def log(x):
    if isinstance(x, Node):
        return Node(np.log(x.value), ((x, lambda g, v=x.value: g / v),))
    return np.log(x)


def sqrt(x):
    if isinstance(x, Node):
        out = np.sqrt(x.value)
        return Node(out, ((x, lambda g: g / (2.0 * out)),))
    return np.sqrt(x)


def square(x):
    if isinstance(x, Node):
        return Node(x.value * x.value, ((x, lambda g, v=x.value: 2.0 * g * v),))
    return np.square(x)


def reduce_sum(x, axis=None):
    if not isinstance(x, Node):
        return np.sum(x, axis=axis)

    def vjp(g, shape=x.shape, axis=axis):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return Node(np.sum(x.value, axis=axis), ((x, vjp),))


def reduce_mean(x, axis=None):
    if not isinstance(x, Node):
        return np.mean(x, axis=axis)
    n = x.value.size if axis is None else x.shape[axis]

    def vjp(g, shape=x.shape, axis=axis, n=n):
        if axis is None:
            return np.broadcast_to(g / n, shape)
        return np.broadcast_to(np.expand_dims(g / n, axis), shape)

    return Node(np.mean(x.value, axis=axis), ((x, vjp),))


def reshape(x, shape):
    if isinstance(x, Node):
        return Node(
            x.value.reshape(shape),
            ((x, lambda g, s=x.shape: np.asarray(g).reshape(s)),),
        )
    return np.reshape(x, shape)


def transpose(x):
    if isinstance(x, Node):
        return Node(x.value.T, ((x, lambda g: np.asarray(g).T),))
    return np.transpose(x)


def backward(out: Node) -> dict[int, Array]:
    """Reverse-mode sweep from a scalar Node; returns grads keyed by id(node)."""
    if out.value.ndim != 0:
        raise UnsupportedOperationError("backward requires a scalar output")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(out): np.ones(())}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return grads


# -- parameter vectors --------------------------------------------------

Layout = tuple[tuple[str, tuple[int, ...]], ...]


@lru_cache(maxsize=256)
def _layout_offsets(layout: Layout) -> tuple[tuple[str, tuple[int, ...], int, int], ...]:
    entries = []
    offset = 0
    for name, shape in layout:
        n = int(np.prod(shape, dtype=int))
        entries.append((name, shape, offset, offset + n))
        offset += n
    return tuple(entries)


@dataclass(frozen=True)
class ParameterVector:
    """Flat float64 parameter store with a named (name, shape) layout."""

    values: Array
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).ravel()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        object.__setattr__(self, "layout", layout)
        entries = _layout_offsets(layout)
        total = entries[-1][3] if entries else 0
        if total != self.values.size:
            raise ConfigurationError(
                f"layout holds {total} elements but values has {self.values.size}"
            )
        object.__setattr__(self, "_dict_cache", None)
        object.__setattr__(self, "_layers_cache", None)

    @property
    def size(self) -> int:
        return self.values.size

    def as_dict(self) -> dict[str, Array]:
        cached = self._dict_cache
        if cached is None:
            cached = {
                name: self.values[start:end].reshape(shape)
                for name, shape, start, end in _layout_offsets(self.layout)
            }
            object.__setattr__(self, "_dict_cache", cached)
        return cached

    @classmethod
    def from_dict(cls, layout: Layout, mapping: Mapping[str, Array]) -> "ParameterVector":
        parts = [np.asarray(mapping[name], dtype=np.float64).ravel() for name, _ in layout]
        return cls(np.concatenate(parts) if parts else np.zeros(0), layout)

    @classmethod
    def zeros(cls, layout: Layout) -> "ParameterVector":
        total = sum(int(np.prod(s, dtype=int)) for _, s in layout)
        return cls(np.zeros(total), layout)

    def with_values(self, values: Array) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        return self.with_values(self.values - other.values)

    def __mul__(self, c: float) -> "ParameterVector":
        return self.with_values(self.values * float(c))

    __rmul__ = __mul__


# -- MLP spec and forward pass ------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_sizes: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    weight_normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError("all layer sizes must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_sizes, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_layout(self) -> Layout:
        layout: list[tuple[str, tuple[int, ...]]] = []
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            if self.weight_normalized:
                layout.append((f"l{i}.v", (fan_out, fan_in)))
                layout.append((f"l{i}.g", (fan_out,)))
            else:
                layout.append((f"l{i}.W", (fan_out, fan_in)))
            layout.append((f"l{i}.b", (fan_out,)))
        return tuple(layout)

    def param_count(self) -> int:
        return sum(int(np.prod(s, dtype=int)) for _, s in self.param_layout())

    def init_params(self, rng: np.random.Generator) -> ParameterVector:
        # Glorot-uniform weights, zero biases; weight-normalized layers set
        # g to the row norm so the effective initial weights equal the draw.
        init: dict[str, Array] = {}
        for i, (fan_in, fan_out) in enumerate(self.layer_dims()):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            if self.weight_normalized:
                init[f"l{i}.v"] = w
                init[f"l{i}.g"] = np.linalg.norm(w, axis=1)
            else:
                init[f"l{i}.W"] = w
            init[f"l{i}.b"] = np.zeros(fan_out)
        return ParameterVector.from_dict(self.param_layout(), init)


def _numeric_layers(spec: MlpSpec, params: ParameterVector) -> list[tuple[Array, Array]]:
    # effective (W, b) per layer, memoized on the immutable vector
    cached = params._layers_cache
    if cached is not None and cached[0] is spec:
        return cached[1]
    d = params.as_dict()
    layers: list[tuple[Array, Array]] = []
    for i in range(len(spec.layer_dims())):
        if spec.weight_normalized:
            v = d[f"l{i}.v"]
            w = v * (d[f"l{i}.g"] / np.sqrt(np.sum(np.square(v), axis=1)))[:, None]
        else:
            w = d[f"l{i}.W"]
        layers.append((w, d[f"l{i}.b"]))
    object.__setattr__(params, "_layers_cache", (spec, layers))
    return layers


def mlp_forward(spec: MlpSpec, params, x):
    """Run the MLP; works on plain arrays and on autodiff Nodes alike.

    `params` is a ParameterVector or a mapping from layout names to
    arrays/Nodes. `x` may be a single input vector or a (batch, dim)
    matrix.
    """
    if isinstance(params, ParameterVector):
        if not isinstance(x, Node):
            xv = np.asarray(x, dtype=np.float64)
            if xv.shape[-1] != spec.input_dim:
                raise ConfigurationError(
                    f"input has dim {xv.shape[-1]}, spec expects {spec.input_dim}"
                )
            layers = _numeric_layers(spec, params)
            h = xv
            last = len(layers) - 1
            for i, (w, b) in enumerate(layers):
                h = (w @ h if h.ndim == 1 else h @ w.T) + b
                if i < last:
                    h = np.tanh(h) if spec.activation == "tanh" else np.maximum(h, 0.0)
            return h
        params = params.as_dict()
    xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    if xv.shape[-1] != spec.input_dim:
        raise ConfigurationError(
            f"input has dim {xv.shape[-1]}, spec expects {spec.input_dim}"
        )
    act = tanh if spec.activation == "tanh" else relu
    h = x if isinstance(x, Node) else xv
    layers = spec.layer_dims()
    for i, (fan_in, fan_out) in enumerate(layers):
        if spec.weight_normalized:
            v = params[f"l{i}.v"]
            gscale = params[f"l{i}.g"]
            row_norm = sqrt(reduce_sum(square(v), axis=1))
            w = v * reshape(gscale / row_norm, (fan_out, 1))
        else:
            w = params[f"l{i}.W"]
        b = params[f"l{i}.b"]
        if (h.ndim if isinstance(h, Node) else np.ndim(h)) == 1:
            h = w @ h + b
        else:
            h = h @ transpose(w) + b
        if i < len(layers) - 1:
            h = act(h)
    return h


# -- gradient and curvature operators ------------------------------------


def grad(objective: Callable[[Mapping[str, Node]], Node], params: ParameterVector) -> ParameterVector:
    """Exact reverse-mode gradient of a scalar objective built from the
    engine's primitives, in the layout of `params`."""
    leaves = {name: Node(arr) for name, arr in params.as_dict().items()}
    out = objective(leaves)
    if not isinstance(out, Node):
        raise UnsupportedOperationError("objective must return an engine Node")
    grads = backward(out)
    parts = []
    for name, shape in params.layout:
        g = grads.get(id(leaves[name]))
        if g is None:
            g = np.zeros(shape)
        parts.append(np.asarray(g, dtype=np.float64).ravel())
    return ParameterVector(np.concatenate(parts) if parts else np.zeros(0), params.layout)


def default_fd_eps(params: ParameterVector) -> float:
    return 1e-5 * (1.0 + float(np.max(np.abs(params.values), initial=0.0)))


def hvp_fd(
    grad_fn: Callable[[ParameterVector], ParameterVector],
    params: ParameterVector,
    v: ParameterVector,
    eps: float | None = None,
) -> ParameterVector:
    """Central-difference Hessian-vector product of a gradient function."""
    if eps is None:
        eps = default_fd_eps(params)
    if eps <= 0.0:
        raise ConfigurationError("eps must be positive")
    plus = grad_fn(params.with_values(params.values + eps * v.values))
    minus = grad_fn(params.with_values(params.values - eps * v.values))
    out = (plus.values - minus.values) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise NumericError("finite-difference Hessian-vector product is not finite")
    return params.with_values(out)
