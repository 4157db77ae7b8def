"""A small reverse-mode autodiff engine over numpy arrays.

Just enough for a decoder-only transformer and for checking attention gradients.
Each op builds a new :class:`Tensor` holding its parents and a closure that pushes
the output gradient back to them. :meth:`Tensor.backward` linearises the graph into
a :class:`Tape` (topological order) and replays it in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # grads are never mutated in place, so sharing an array between nodes is safe
        g = np.asarray(g, dtype=self.data.dtype)
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> "Tape":
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = Tape.from_root(self)
        tape.run(self, np.asarray(grad, dtype=self.data.dtype))
        return tape

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str = "custom",
) -> Tensor:
    """Wrap a forward result whose backward is given explicitly.

    ``backward(grad_out)`` returns one gradient (or ``None``) per parent.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g):
            grads = backward(g)
            for p, gp in zip(parents, grads):
                if gp is not None and p.requires_grad:
                    p._accumulate(gp)

        out._backward = _bw
    out.op = op
    return out


@dataclass
class Tape:
    """Recorded ops in topological order (inputs strictly before their consumers)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def run(self, root: Tensor, grad: np.ndarray) -> None:
        root._accumulate(grad)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are dead once pushed to the parents
                node.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}") from exc
    return custom_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def mul(a, b) -> Tensor:
    """Elementwise product (broadcasting), or scaling when one side is a number."""
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply {a.shape} and {b.shape}") from exc
    return custom_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return custom_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return custom_op(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),), "sum"
    )


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules; 2-D ``b`` is treated as shared weights."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"cannot matmul {a.shape} and {b.shape}") from exc

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return custom_op(out, (a, b), _bw, "matmul")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return custom_op(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return custom_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return custom_op(table.data[ids], (table,), _bw, "embedding")


def layer_norm(x, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        out = out + beta.data
        parents.append(beta)

    def _bw(g):
        gx = g * gamma.data if gamma is not None else g
        n = x.shape[-1]
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return custom_op(out, parents, _bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    d2 = d * d
    u = c * (d + k * d2 * d)
    t = np.tanh(u)
    out = 0.5 * d * (1.0 + t)

    def _bw(g):
        du = c * (1.0 + 3.0 * k * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du),)

    return custom_op(out.astype(d.dtype, copy=False), (x,), _bw, "gelu")


def _interval_mask(lo, hi, m: int) -> np.ndarray:
    j = np.arange(m)
    lo = np.asarray(lo)[..., None]
    hi = np.asarray(hi)[..., None]
    return (j >= lo) & (j <= hi)


def masked_softmax_rows(scores, lo=None, hi=None, *, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax of each row restricted to its allowed keys.

    Allowed keys are given either as inclusive intervals ``[lo, hi]`` (arrays
    broadcasting against the row axes) or as a boolean ``allowed`` array. Rows with
    no allowed key come out all-zero. Disallowed entries are exactly zero.
    """
    s = as_tensor(scores)
    x = s.data
    if allowed is None:
        if lo is None or hi is None:
            raise ShapeError("give either (lo, hi) intervals or an allowed mask")
        allowed = _interval_mask(lo, hi, x.shape[-1])
    allowed = np.broadcast_to(allowed, x.shape)
    if not np.isfinite(x).all() and not np.isfinite(np.where(allowed, x, 0)).all():
        raise NumericError("non-finite score inside the allowed set")
    masked = np.where(allowed, x, -np.inf)
    mx = masked.max(axis=-1, keepdims=True)
    mx[~np.isfinite(mx)] = 0
    masked -= mx
    e = np.exp(masked, out=masked)
    z = e.sum(axis=-1, keepdims=True)
    z[z == 0] = 1
    p = e / z

    def _bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return custom_op(p, (s,), _bw, "masked_softmax")


def cross_entropy_loss(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    z = as_tensor(logits)
    targets = np.asarray(targets)
    if z.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {z.shape} do not match targets {targets.shape}")
    x = z.data.reshape(-1, z.shape[-1])
    t = targets.reshape(-1)
    mx = x.max(axis=1, keepdims=True)
    shifted = x - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(t.size), t].mean()
    if not np.isfinite(loss):
        raise NumericError("cross-entropy loss is not finite")

    def _bw(g):
        p = np.exp(logp)
        p[np.arange(t.size), t] -= 1
        return ((p * (g / t.size)).reshape(z.shape),)

    return custom_op(np.asarray(loss, dtype=x.dtype), (z,), _bw, "cross_entropy")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. Parameters without grads are skipped."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_coords: int | None = 256,
    seed: int = 0,
    denom_floor: float = 1e-4,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must map ``x`` to a scalar Tensor. At most ``max_coords`` coordinates
    (never fewer than 64, or all of them) are checked, drawn with ``seed``.
    The error per coordinate is ``|a - n| / max(|a|, |n|, denom_floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = x.grad.copy()
    size = x.data.size
    if max_coords is None or size <= max(64, max_coords):
        coords = np.arange(size)
    else:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(size, size=max(64, max_coords), replace=False))
    flat = x.data.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        fp = float(f(x).data)
        flat[c] = orig - eps
        fm = float(f(x).data)
        flat[c] = orig
        num = (fp - fm) / (2 * eps)
        a = float(analytic.reshape(-1)[c])
        err = abs(a - num) / max(abs(a), abs(num), denom_floor)
        worst = max(worst, err)
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
