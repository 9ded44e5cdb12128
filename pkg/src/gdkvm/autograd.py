"""A small tape-based reverse-mode differentiator over NumPy arrays.

Every primitive is a :class:`Function` with a ``forward`` that stashes what
it needs in ``ctx`` and a ``backward`` that maps the output gradient to one
gradient per input. The tape records applications in execution order, so
backpropagation is a single reversed sweep (no topological sort needed).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels
from .tensor_core import _im2col, phi_grad, phi_kernel
from .tensor_core import sigmoid as _sigmoid


class Node:
    __slots__ = ("value", "tape", "index", "name", "requires")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, name: str | None = None,
                 requires: bool = True):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name
        self.requires = requires  # False for constants and anything computed only from them

    @property
    def shape(self):
        return self.value.shape

    def _wrap(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.constant(np.asarray(other, dtype=self.value.dtype))

    def __add__(self, other):
        return add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __neg__(self):
        return mul(self, self._wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name})"


class Function:
    """Base class; subclasses define ``forward(ctx, *values, **kw)`` and ``backward(ctx, g)``."""

    @staticmethod
    def forward(ctx: dict, *values, **kw):
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, g):
        raise NotImplementedError


class Tape:
    """Records primitive applications and owns the parameter registry.

    ``full_norm_grad`` switches the key normalisation from straight-through on
    the norm (the training default) to its exact derivative.
    """

    def __init__(self, full_norm_grad: bool = False):
        self.full_norm_grad = full_norm_grad
        self.nodes: list[Node] = []
        self.records: list[tuple] = []  # (fn, input indices, kwargs, ctx, output index)
        self.params: dict[str, Node] = {}
        self.observed: dict[str, list[Node]] = {}

    def _new(self, value, name=None, requires=True) -> Node:
        node = Node(value, self, len(self.nodes), name, requires)
        self.nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray) -> Node:
        node = self._new(value, name)
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return self._new(np.asarray(value), requires=False)

    def observe(self, key: str, node: Node) -> None:
        """Register an intermediate whose gradient should be reported by ``backward``."""
        self.observed.setdefault(key, []).append(node)

    def apply(self, fn: type[Function], *inputs: Node, **kw) -> Node:
        needs = tuple(x.requires for x in inputs)
        ctx: dict = {"needs": needs}
        out = fn.forward(ctx, *[x.value for x in inputs], **kw)
        node = self._new(out, requires=any(needs))
        self.records.append((fn, tuple(x.index for x in inputs), kw, ctx, node.index))
        return node

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``root`` w.r.t. every registered parameter.

        Gradients of observed intermediates are returned under their observe
        key as lists, in registration order.
        """
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.index] = np.ones_like(root.value)
        for fn, ins, _kw, ctx, out in reversed(self.records):
            g = grads[out]
            if g is None or not self.nodes[out].requires:
                continue
            in_grads = fn.backward(ctx, g)
            for i, gi in zip(ins, in_grads):
                if gi is None or not self.nodes[i].requires:
                    continue
                if grads[i] is None:
                    grads[i] = gi
                else:
                    grads[i] = grads[i] + gi
        result: dict = {}
        for name, node in self.params.items():
            g = grads[node.index]
            result[name] = np.zeros_like(node.value) if g is None else g
        for key, nodes in self.observed.items():
            result[key] = [np.zeros_like(n.value) if grads[n.index] is None else grads[n.index]
                           for n in nodes]
        return result

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded op from the leaf values; returns all node values."""
        values = [n.value for n in self.nodes]
        for fn, ins, kw, _ctx, out in self.records:
            values[out] = fn.forward({}, *[values[i] for i in ins], **kw)
        return values


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = a.shape, b.shape
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        if b.ndim == 1:
            ga = g[..., None] * b
            gb = np.tensordot(g, a, axes=(list(range(g.ndim)), list(range(a.ndim - 1))))
            return ga, gb
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx["shape"], ctx["axis"], ctx["keepdims"] = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx["shape"], ctx["axis"], ctx["keepdims"]
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        out = np.asarray(a.mean(axis=axis, keepdims=keepdims))
        ctx["shape"], ctx["axis"], ctx["keepdims"] = a.shape, axis, keepdims
        ctx["count"] = a.size // max(out.size, 1) if axis is not None else a.size
        return out

    @staticmethod
    def backward(ctx, g):
        (gs,) = Sum.backward(ctx, g)
        return (gs / ctx["count"],)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["shape"] = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes):
        ctx["axes"] = axes
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, np.argsort(ctx["axes"])),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=-1):
        ctx["sizes"] = [a.shape[axis] for a in arrays]
        ctx["axis"] = axis
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        splits = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(g, splits, axis=ctx["axis"]))


class Select(Function):
    """``a[:, i]``: one slice along axis 1, e.g. a frame of an ``(N, T, ...)`` stack."""

    @staticmethod
    def forward(ctx, a, index=0):
        ctx["shape"], ctx["index"] = a.shape, index
        return a[:, index]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        out[:, ctx["index"]] = g
        return (out,)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        out = _sigmoid(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        s = ctx["out"]
        return (g * s * (1 - s),)


class Tanh(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.tanh(a)
        ctx["out"] = out
        return out

    @staticmethod
    def backward(ctx, g):
        t = ctx["out"]
        return (g * (1 - t * t),)


class Phi(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["a"] = a
        return phi_kernel(a)

    @staticmethod
    def backward(ctx, g):
        return (g * phi_grad(ctx["a"]),)


class Expand(Function):
    """``(N, C) -> (N, H, W, C)`` spatial broadcast."""

    @staticmethod
    def forward(ctx, a, h, w):
        return np.broadcast_to(a[:, None, None, :], (a.shape[0], h, w, a.shape[1])).copy()

    @staticmethod
    def backward(ctx, g):
        return (g.sum(axis=(1, 2)),)


class NormalizeRows(Function):
    """Unit L2 norm along the last axis.

    With ``straight_through`` the norm is treated as a constant in the
    backward pass, i.e. the gradient is ``g / ||x||``.
    """

    @staticmethod
    def forward(ctx, a, straight_through=True, eps=1e-12):
        norm = np.sqrt((a * a).sum(axis=-1, keepdims=True) + eps)
        out = a / norm
        ctx["norm"], ctx["out"], ctx["st"] = norm, out, straight_through
        return out

    @staticmethod
    def backward(ctx, g):
        norm, y = ctx["norm"], ctx["out"]
        if ctx["st"]:
            return (g / norm,)
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)


# ---------------------------------------------------------------------------
# Spatial primitives
# ---------------------------------------------------------------------------

class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, b, stride=1):
        k = w.shape[0]
        if x.shape[3] == 1 and k > 1:
            return Conv2d._single_channel(ctx, x, w, b, stride)
        cols, (ho, wo) = _im2col(x, k, stride)
        out = cols @ w.reshape(-1, w.shape[3]) + b
        ctx.update(cols=cols, x_shape=x.shape, w=w, stride=stride, out_hw=(ho, wo))
        return out.reshape(x.shape[0], ho, wo, w.shape[3])

    @staticmethod
    def _single_channel(ctx, x, w, b, stride):
        # one input channel: a sum of k*k shifted scaled copies beats an im2col matmul
        n, h, wd, _ = x.shape
        k, cout = w.shape[0], w.shape[3]
        pad = (k - 1) // 2
        ho, wo = -(-h // stride), -(-wd // stride)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        out = np.empty((n, ho, wo, cout), dtype=np.result_type(x, w))
        out[...] = b
        for dy in range(k):
            for dx in range(k):
                out += xp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] * w[dy, dx, 0]
        ctx.update(xp=xp, x_shape=x.shape, w=w, stride=stride, out_hw=(ho, wo))
        return out

    @staticmethod
    def _single_channel_backward(ctx, g):
        xp, w, s = ctx["xp"], ctx["w"], ctx["stride"]
        n, h, wd, _ = ctx["x_shape"]
        k, cout = w.shape[0], w.shape[3]
        ho, wo = ctx["out_hw"]
        pad = (k - 1) // 2
        gw = np.empty_like(w)
        g2 = g.reshape(-1, cout)
        for dy in range(k):
            for dx in range(k):
                tap = xp[:, dy:dy + s * ho:s, dx:dx + s * wo:s].reshape(1, -1)
                gw[dy, dx, 0] = (tap @ g2)[0]
        gb = g2.sum(axis=0)
        if not ctx["needs"][0]:
            return None, gw, gb
        gp = np.zeros((n, h + 2 * pad + s, wd + 2 * pad + s, 1), dtype=g.dtype)
        gx1 = g @ w.reshape(k, k, cout).reshape(k * k, cout).T  # (n, ho, wo, k*k)
        for dy in range(k):
            for dx in range(k):
                gp[:, dy:dy + s * ho:s, dx:dx + s * wo:s, 0] += gx1[..., dy * k + dx]
        return gp[:, pad:pad + h, pad:pad + wd], gw, gb

    @staticmethod
    def backward(ctx, g):
        if "xp" in ctx:
            return Conv2d._single_channel_backward(ctx, g)
        w, s = ctx["w"], ctx["stride"]
        n, h, wd, c = ctx["x_shape"]
        cout = w.shape[3]
        g2 = g.reshape(-1, cout)
        gw = (ctx["cols"].T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        if not ctx["needs"][0]:
            return None, gw, gb
        k = w.shape[0]
        if s > 1:
            # scatter the column gradients back onto the padded input
            pad = (k - 1) // 2
            ho, wo = ctx["out_hw"]
            gcols = (g2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, k, k, c)
            gp = np.zeros((n, h + 2 * pad + s, wd + 2 * pad + s, c), dtype=g.dtype)
            for dy in range(k):
                for dx in range(k):
                    gp[:, dy:dy + s * ho:s, dx:dx + s * wo:s] += gcols[:, :, :, dy, dx]
            gx = gp[:, pad:pad + h, pad:pad + wd]
        else:
            # 'same' correlation with the spatially flipped, channel-transposed kernel
            w_flip = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
            cols, _ = _im2col(g, k, 1)
            gx = (cols @ w_flip.reshape(-1, c)).reshape(n, h, wd, c)
        return gx, gw, gb


class Upsample2(Function):
    """Nearest-neighbour 2x upsampling of ``(N, H, W, C)``."""

    @staticmethod
    def forward(ctx, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    @staticmethod
    def backward(ctx, g):
        return (g[:, ::2, ::2] + g[:, 1::2, ::2] + g[:, ::2, 1::2] + g[:, 1::2, 1::2],)


class AvgPool(Function):
    @staticmethod
    def forward(ctx, x, f):
        n, h, w, c = x.shape
        ctx["f"] = f
        return x.reshape(n, h // f, f, w // f, f, c).mean(axis=(2, 4))

    @staticmethod
    def backward(ctx, g):
        f = ctx["f"]
        return (g.repeat(f, axis=1).repeat(f, axis=2) / (f * f),)


# ---------------------------------------------------------------------------
# Memory scan and losses
# ---------------------------------------------------------------------------

class MemoryScan(Function):
    """Token-sequential write ``S <- S + (write v_p - erase (S k_p)) k_p^T``.

    ``S0`` is ``(N, Cv, Ck)``, ``K`` ``(N, P, Ck)``, ``V`` ``(N, P, Cv)``,
    ``erase`` and ``write`` are ``(N,)``. Runs on the compiled kernel when
    available.
    """

    @staticmethod
    def forward(ctx, S0, K, V, erase, write):
        S, hist = kernels.scan_forward(S0, K, V, erase, write)
        ctx.update(hist=hist, K=K, V=V, erase=erase, write=write)
        return S

    @staticmethod
    def backward(ctx, g):
        dS, dK, dV, de, dw = kernels.scan_backward(
            ctx["hist"], ctx["K"], ctx["V"], ctx["erase"], ctx["write"], g)
        return dS, dK, dV, de, dw


class BCEWithLogits(Function):
    """Mean binary cross-entropy over all elements, computed from logits."""

    @staticmethod
    def forward(ctx, z, y):
        ctx["z"], ctx["y"] = z, y
        loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(loss.mean())

    @staticmethod
    def backward(ctx, g):
        z, y = ctx["z"], ctx["y"]
        return (g * (_sigmoid(z) - y) / z.size, None)


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    return a.tape.apply(Add, a, b)


def sub(a: Node, b: Node) -> Node:
    return a.tape.apply(Sub, a, b)


def mul(a: Node, b: Node) -> Node:
    return a.tape.apply(Mul, a, b)


def div(a: Node, b: Node) -> Node:
    return a.tape.apply(Div, a, b)


def matmul(a: Node, b: Node) -> Node:
    return a.tape.apply(MatMul, a, b)


def sum(a: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    return a.tape.apply(Sum, a, axis=axis, keepdims=keepdims)


def mean(a: Node, axis=None, keepdims=False) -> Node:
    return a.tape.apply(Mean, a, axis=axis, keepdims=keepdims)


def reshape(a: Node, shape) -> Node:
    return a.tape.apply(Reshape, a, shape=tuple(shape))


def transpose(a: Node, axes) -> Node:
    return a.tape.apply(Transpose, a, axes=tuple(axes))


def concat(nodes, axis=-1) -> Node:
    return nodes[0].tape.apply(Concat, *nodes, axis=axis)


def select(a: Node, index: int) -> Node:
    return a.tape.apply(Select, a, index=index)


def sigmoid(a: Node) -> Node:
    return a.tape.apply(Sigmoid, a)


def tanh(a: Node) -> Node:
    return a.tape.apply(Tanh, a)


def phi(a: Node) -> Node:
    return a.tape.apply(Phi, a)


def gap(a: Node) -> Node:
    return mean(a, axis=(1, 2))


def expand(a: Node, h: int, w: int) -> Node:
    return a.tape.apply(Expand, a, h=h, w=w)


def normalize_rows(a: Node) -> Node:
    return a.tape.apply(NormalizeRows, a, straight_through=not a.tape.full_norm_grad)


def conv2d(x: Node, w: Node, b: Node, stride: int = 1) -> Node:
    return x.tape.apply(Conv2d, x, w, b, stride=stride)


def upsample2(x: Node) -> Node:
    return x.tape.apply(Upsample2, x)


def avgpool(x: Node, f: int) -> Node:
    return x.tape.apply(AvgPool, x, f=f)


def memory_scan(S: Node, K: Node, V: Node, erase: Node, write: Node) -> Node:
    return S.tape.apply(MemoryScan, S, K, V, erase, write)


def bce_with_logits(z: Node, y: Node) -> Node:
    return z.tape.apply(BCEWithLogits, z, y)


# ---------------------------------------------------------------------------
# Optimisation helpers
# ---------------------------------------------------------------------------

def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(np.asarray(g, dtype=np.float64) ** 2) for g in grads.values()])))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale every gradient by ``max_norm / norm`` when the joint L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}


class AdamW:
    """Decoupled weight decay Adam with bias correction."""

    def __init__(self, lr=1e-4, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.step_count += 1
        out = {}
        for name, p in params.items():
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            out[name], self.m[name], self.v[name] = adamw_step(
                p, grads[name], m, v, self.lr, self.weight_decay, self.betas, self.step_count, self.eps)
        return out


def adamw_step(p, g, m, v, lr, wd, betas, step, eps=1e-8):
    """One AdamW update; returns ``(new_param, new_m, new_v)``."""
    if step < 1:
        raise ValueError("step counts from 1")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    p = p * (1 - lr * wd) - lr * mhat / (np.sqrt(vhat) + eps)
    return p.astype(g.dtype, copy=False), m, v


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[dict[str, np.ndarray]], float], params: dict[str, np.ndarray],
                      h: float = 1e-5, names=None) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f(params)`` for every element of every parameter."""
    out = {}
    for name in (names or params):
        p = params[name]
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(params)
            flat[i] = old - h
            fm = f(params)
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximised over the array."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0
