"""A small reverse-mode autodiff engine over numpy arrays.

Each ``Tensor`` records the op that produced it (``op``), its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the graph in reverse topological order, summing gradients at fan-in points.
Straight-through nodes (``ste_quantize``, ``ste_sign``) pass the incoming
gradient unchanged (up to their clamp masks).
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .cyclic import CyclicSpec, cyclic_apply, cyclic_derivative
from .fxp import round_half_away
from .netgraph.calibrate import overflow_penalty
from .packing import DEFAULT_TEMPERATURE, carry_fold_batch, soft_selector_grad


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None,
                 op: str = "leaf", requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value * b.value, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                  "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def sum_all(a: Tensor) -> Tensor:
    return Tensor(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    return Tensor(a.value.mean(), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def mean_axis0(a: Tensor) -> Tensor:
    n = a.shape[0]
    return Tensor(a.value.mean(axis=0), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
                  "mean0")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.value.copy())


def ste_levels(x: Tensor, step: float, qmin: float, qmax: float) -> Tensor:
    """Integer levels ``clamp(round(x / step))``; gradient ``1/step`` inside the clamp range."""
    q = np.clip(round_half_away(x.value / step), qmin, qmax)
    inside = (x.value >= qmin * step) & (x.value <= qmax * step)
    return Tensor(q, (x,), lambda g: (g * inside / step,), "ste_levels")


def ste_quantize(x: Tensor, step: float, qmin: float, qmax: float) -> Tensor:
    """Uniform quantizer (dequantized output) with a clamped straight-through gradient."""
    q = np.clip(round_half_away(x.value / step), qmin, qmax)
    inside = (x.value >= qmin * step) & (x.value <= qmax * step)
    return Tensor(q * step, (x,), lambda g: (g * inside,), "ste_quantize")


def ste_sign(w: Tensor, scale: float = 1.0, clip: float = np.inf) -> Tensor:
    """Binary levels ``sign(w)`` in {-1, +1} (0 maps to +1).

    The gradient is that of ``w / scale`` (straight through the sign), zeroed
    where ``|w / scale| > clip``.
    """
    q = np.where(w.value >= 0, 1.0, -1.0)

    def back(g):
        if np.isinf(clip):
            return (g / scale,)
        return (g * (np.abs(w.value) <= clip * scale) / scale,)

    return Tensor(q, (w,), back, "ste_sign")


def cyclic(z: Tensor, spec: CyclicSpec) -> Tensor:
    d = cyclic_derivative(z.value, spec)
    return Tensor(cyclic_apply(z.value, spec), (z,), lambda g: (g * d,), "cyclic")


def overflow_hinge(z: Tensor, bits: int) -> Tensor:
    """Mean of ``max(|z| - 2**(bits-1), 0)``; zero subgradient at the hinge."""
    value, grad = overflow_penalty(z.value, bits)
    return Tensor(value, (z,), lambda g: (g * grad,), "overflow_hinge")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    x = logits.value
    shift = x - x.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    n = x.shape[0]
    value = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return Tensor(value, (logits,), back, "cross_entropy")


def carry_counts(x_q: Tensor, w_q: Tensor, bits: int,
                 temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Per-sample, per-neuron carry totals of ``x_q @ w_q`` in a ``bits`` register.

    ``x_q`` (B x K) holds integer-valued activations and ``w_q`` (K x N)
    weights in {-1, 0, 1}.  Forward: exact totals from the folded
    unsigned sums.  Backward: the tanh surrogate of the sign selector with
    straight-through floor/mod, i.e. ``d carries / d p = (1 - 2**b s'(p)) /
    (2**b - 1)`` for every product ``p = w * x``.
    """
    x, w = x_q.value, w_q.value
    period = float(1 << bits)
    pos = (w > 0).astype(np.float64)
    negm = (w < 0).astype(np.float64)
    zero = 1.0 - pos - negm
    xi = np.rint(x)
    z = xi @ w
    n_neg = (xi > 0) @ negm + (xi < 0) @ pos
    u = (z + period * n_neg).astype(np.int64)
    total, _ = carry_fold_batch(u, bits)

    def d(p):
        return (1.0 - period * soft_selector_grad(p, temperature)) / (period - 1.0)

    def back(g):
        dp, dm, d0 = d(x), d(-x), d(np.zeros(1))[0]
        gx = dp * (g @ pos.T) - dm * (g @ negm.T)
        gw = pos * ((x * dp).T @ g) + negm * ((x * dm).T @ g) + zero * d0 * (x.T @ g)
        return gx, gw

    return Tensor(total.astype(np.float64), (x_q, w_q), back, "carry_counts")


def batch_variance_mean(n: Tensor) -> Tensor:
    """Mean over columns of the population variance over rows."""
    v = n.value
    B = v.shape[0]
    centered = v - v.mean(axis=0, keepdims=True)
    value = (centered ** 2).mean(axis=0).mean()
    cols = v.shape[1] if v.ndim > 1 else 1
    return Tensor(value, (n,), lambda g: (g * 2.0 * centered / (B * cols),), "carry_variance")


def relaxed_carry_total(x: np.ndarray, w: np.ndarray, bits: int,
                        temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Smooth surrogate whose gradient :func:`carry_counts` returns (for checks)."""
    period = float(1 << bits)
    p = x[:, :, None] * w[None, :, :]
    s = 0.5 * (np.tanh((p + 0.5) / temperature) + 1.0)
    return (p + (1.0 - s) * period).sum(axis=1) / (period - 1.0)
