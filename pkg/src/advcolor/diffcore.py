"""Minimal reverse-mode differentiation substrate.

Two layers, both over float64 numpy arrays:

* :class:`DifferentiableFn` -- a forward map bundled with its
  vector-Jacobian product.  Stages chain into fixed pipelines with
  :func:`compose` and scalar losses differentiate end to end with
  :func:`grad`.
* :class:`Node` -- a tiny expression tape used to implement the VJP of
  stages whose backward pass would be unpleasant to derive by hand
  (the color-difference formula).  Ops record closures on a graph;
  :func:`backward` accumulates cotangents in reverse topological order.

Derivative conventions at non-smooth points: piecewise ops follow the
branch selected by the forward pass, ``sqrt`` uses a derivative clamped
near zero, and ``atan2`` yields zero cotangents at the origin.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .exceptions import ContractError, NonFiniteError, ShapeError

# Derivative clamps (see module docstring).
SQRT_CLAMP = 1e-12
ATAN2_CLAMP = 1e-24


def check_finite(arr, context: str = "value") -> None:
    """Raise :class:`NonFiniteError` if ``arr`` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite {context}")


# ---------------------------------------------------------------------------
# Stage contract
# ---------------------------------------------------------------------------

class DifferentiableFn:
    """A forward map plus its vector-Jacobian product.

    ``vjp(x, cotangent)`` must return ``cotangent^T . J(x)`` where ``J``
    is the Jacobian of ``forward`` at ``x``, with the same shape as ``x``.
    """

    name = "fn"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"


class Lambda(DifferentiableFn):
    """Wrap a (forward, vjp) pair of plain functions as a stage."""

    def __init__(self, forward_fn: Callable, vjp_fn: Callable, name: str = "lambda"):
        self._forward = forward_fn
        self._vjp = vjp_fn
        self.name = name

    def forward(self, x):
        return self._forward(x)

    def vjp(self, x, cotangent):
        return self._vjp(x, cotangent)


class Composed(DifferentiableFn):
    """Left-to-right composition of stages; cotangents chain right to left."""

    def __init__(self, stages):
        flat = []
        for s in stages:
            if isinstance(s, Composed):
                flat.extend(s.stages)
            else:
                flat.append(s)
        self.stages = tuple(flat)
        self.name = " >> ".join(s.name for s in self.stages)

    def forward(self, x):
        for i, f in enumerate(self.stages):
            try:
                x = f.forward(x)
            except ShapeError as e:
                raise ShapeError(
                    f"composition broke at stage {i} ({f.name}): {e}"
                ) from e
        return x

    def vjp(self, x, cotangent):
        inputs = [x]
        for f in self.stages[:-1]:
            inputs.append(f.forward(inputs[-1]))
        ct = cotangent
        for f, xin in zip(reversed(self.stages), reversed(inputs)):
            ct = f.vjp(xin, ct)
        return ct


def compose(fns) -> DifferentiableFn:
    """Chain stages into one pipeline; at least one stage required."""
    fns = list(fns)
    if not fns:
        raise ContractError("compose requires at least one stage")
    return Composed(fns)


def grad(fn: DifferentiableFn, x: np.ndarray) -> np.ndarray:
    """Gradient of a scalar-valued stage at ``x``."""
    y = np.asarray(fn.forward(x))
    if y.size != 1:
        raise ContractError(
            f"grad needs a scalar-valued function, got output shape {y.shape}"
        )
    check_finite(y, f"loss value from {fn.name}")
    return fn.vjp(x, np.ones_like(y))


def elementwise(name: str, f: Callable, df: Callable) -> DifferentiableFn:
    """Build a stage from an elementwise map and its pointwise derivative."""
    return Lambda(
        lambda x: f(np.asarray(x, dtype=np.float64)),
        lambda x, ct: df(np.asarray(x, dtype=np.float64)) * ct,
        name,
    )


# ---------------------------------------------------------------------------
# Expression tape
# ---------------------------------------------------------------------------

class Node:
    """A value in the expression tape.

    ``parents`` holds ``(parent, edge_vjp)`` pairs; ``edge_vjp`` maps this
    node's cotangent to the parent's contribution.  Nodes are immutable
    after construction, so graphs are safe to share across threads.
    """

    __slots__ = ("value", "parents")

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents

    # Operator sugar.  The non-Node operand of a binary op is treated as a
    # constant (python float or same-shape ndarray); Node-Node ops require
    # identical shapes.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return powc(self, p)


def leaf(value) -> Node:
    """Tape input; gradients with respect to leaves come out of backward."""
    return Node(np.asarray(value, dtype=np.float64))


def _val(x):
    return x.value if isinstance(x, Node) else x


def _check_shapes(a, b):
    if isinstance(a, Node) and isinstance(b, Node):
        va, vb = np.asarray(a.value), np.asarray(b.value)
        if va.shape != vb.shape:
            raise ShapeError(f"tape op on mismatched shapes {va.shape} vs {vb.shape}")


def _binary(a, b, value, da, db):
    _check_shapes(a, b)
    parents = []
    if isinstance(a, Node):
        parents.append((a, da))
    if isinstance(b, Node):
        parents.append((b, db))
    return Node(value, tuple(parents))


def add(a, b):
    _check_shapes(a, b)
    va, vb = _val(a), _val(b)
    return _binary(a, b, va + vb, lambda g: g, lambda g: g)


def sub(a, b):
    _check_shapes(a, b)
    va, vb = _val(a), _val(b)
    return _binary(a, b, va - vb, lambda g: g, lambda g: -g)


def mul(a, b):
    _check_shapes(a, b)
    va, vb = _val(a), _val(b)
    return _binary(a, b, va * vb, lambda g: g * vb, lambda g: g * va)


def div(a, b):
    _check_shapes(a, b)
    va, vb = _val(a), _val(b)
    out = va / vb
    return _binary(a, b, out, lambda g: g / vb, lambda g: -g * out / vb)


def powc(a, p):
    """``a ** p`` for a constant exponent."""
    va = _val(a)
    out = va ** p
    return Node(out, ((a, lambda g: g * p * va ** (p - 1)),)) if isinstance(a, Node) else out


def sqrtn(a):
    """Square root with derivative clamped near zero."""
    va = _val(a)
    out = np.sqrt(va)
    if not isinstance(a, Node):
        return out
    denom = 2.0 * np.sqrt(np.maximum(va, SQRT_CLAMP))
    return Node(out, ((a, lambda g: g / denom),))


def sinn(a):
    va = _val(a)
    if not isinstance(a, Node):
        return np.sin(va)
    return Node(np.sin(va), ((a, lambda g: g * np.cos(va)),))


def cosn(a):
    va = _val(a)
    if not isinstance(a, Node):
        return np.cos(va)
    return Node(np.cos(va), ((a, lambda g: g * -np.sin(va)),))


def expn(a):
    va = _val(a)
    out = np.exp(va)
    if not isinstance(a, Node):
        return out
    return Node(out, ((a, lambda g: g * out),))


def atan2n(y, x):
    """Two-argument arctangent; zero cotangents at the origin."""
    _check_shapes(y, x)
    vy, vx = _val(y), _val(x)
    out = np.arctan2(vy, vx)
    denom = np.maximum(vx * vx + vy * vy, ATAN2_CLAMP)
    return _binary(y, x, out, lambda g: g * vx / denom, lambda g: -g * vy / denom)


def where(mask, a, b):
    """Select per element; cotangent flows only through the taken branch.

    ``mask`` is a plain boolean array (or scalar) computed from forward
    values -- it is not differentiated through.
    """
    va, vb = _val(a), _val(b)
    out = np.where(mask, va, vb)
    _check_shapes(a, b)
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g: np.where(mask, g, 0.0)))
    if isinstance(b, Node):
        parents.append((b, lambda g: np.where(mask, 0.0, g)))
    return Node(out, tuple(parents))


def nsum(a, axis=None):
    """Sum reduction; the cotangent broadcasts back over the reduced axes."""
    va = _val(a)
    out = np.sum(va, axis=axis)
    if not isinstance(a, Node):
        return out
    if axis is None:
        return Node(out, ((a, lambda g: np.full_like(va, g)),))

    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % va.ndim for ax in axes)

    def back(g):
        g_exp = np.expand_dims(g, axes)
        return np.broadcast_to(g_exp, va.shape)

    return Node(out, ((a, back),))


def backward(root: Node, seed) -> dict:
    """Reverse accumulation from ``root``; returns ``{id(node): cotangent}``.

    ``seed`` must have the root's shape.  Leaves that the root does not
    depend on are simply absent from the result.
    """
    seed = np.asarray(seed, dtype=np.float64)
    root_val = np.asarray(root.value)
    if seed.shape != root_val.shape:
        raise ShapeError(
            f"backward seed shape {seed.shape} != root shape {root_val.shape}"
        )

    # Iterative post-order traversal (graphs can be long chains).
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads = {id(root): seed}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, edge_vjp in node.parents:
            contrib = edge_vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contrib if acc is None else acc + contrib
    return grads


def tape_gradients(root: Node, leaves, seed=None):
    """Gradients of ``root`` with respect to each leaf (zeros if unused)."""
    if seed is None:
        seed = np.ones_like(np.asarray(root.value))
    grads = backward(root, seed)
    return [
        grads.get(id(lf), np.zeros_like(np.asarray(lf.value))) for lf in leaves
    ]


# ---------------------------------------------------------------------------
# Primitive registry (drives the shared finite-difference property suite)
# ---------------------------------------------------------------------------

class Primitive:
    """A registered stage plus a sampler producing smooth interior inputs."""

    def __init__(self, fn: DifferentiableFn, sampler: Callable):
        self.fn = fn
        self.sampler = sampler


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, fn: DifferentiableFn, sampler: Callable) -> None:
    if name in PRIMITIVES:
        raise ContractError(f"primitive {name!r} already registered")
    PRIMITIVES[name] = Primitive(fn, sampler)


def _register_basics():
    register_primitive(
        "identity",
        elementwise("identity", lambda x: x, lambda x: np.ones_like(x)),
        lambda rng: rng.uniform(-2.0, 2.0, size=(17,)),
    )
    register_primitive(
        "scale2",
        elementwise("scale2", lambda x: 2.0 * x, lambda x: np.full_like(x, 2.0)),
        lambda rng: rng.uniform(-2.0, 2.0, size=(17,)),
    )
    register_primitive(
        "square",
        elementwise("square", lambda x: x * x, lambda x: 2.0 * x),
        lambda rng: rng.uniform(0.5, 2.0, size=(17,)),
    )
    register_primitive(
        "sqrt",
        elementwise(
            "sqrt",
            np.sqrt,
            lambda x: 0.5 / np.sqrt(np.maximum(x, SQRT_CLAMP)),
        ),
        lambda rng: rng.uniform(0.25, 4.0, size=(17,)),
    )
    register_primitive(
        "sin",
        elementwise("sin", np.sin, np.cos),
        lambda rng: rng.uniform(-3.0, 3.0, size=(17,)),
    )
    register_primitive(
        "cos",
        elementwise("cos", np.cos, lambda x: -np.sin(x)),
        lambda rng: rng.uniform(-3.0, 3.0, size=(17,)),
    )
    register_primitive(
        "exp",
        elementwise("exp", np.exp, np.exp),
        lambda rng: rng.uniform(-1.5, 1.5, size=(17,)),
    )


_register_basics()
