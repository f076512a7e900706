"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operators the PICNN pipeline needs are provided. Every op checks its
input shapes, refuses to produce non-finite values, and registers a backward
closure that maps the output gradient to one gradient per parent.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an op receives incompatible input shapes."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""

    def __init__(self, op: str, name: str | None = None):
        self.op = op
        self.name = name
        where = f" in tensor {name!r}" if name else ""
        super().__init__(f"{op}: non-finite value produced{where}")


class Tensor:
    """A node in the computation graph.

    ``data`` is treated as immutable once the node exists. ``grad`` has the
    same shape as ``data`` and is only populated for nodes that require grad.
    """

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable | None = None,
        op: str = "leaf",
        name: str | None = None,
        dtype=None,
    ):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad and not self.parents else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor carrying its own Adam moment buffers."""

    __slots__ = ("m", "v")

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def make_node(op: str, value: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        bad = next((p.name for p in parents if p.name), None)
        raise NonFiniteError(op, bad)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=requires, parents=parents if requires else (),
                 backward_fn=backward_fn if requires else None, op=op, dtype=value.dtype)
    return out


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a bias matching the trailing dims of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape):
        raise ShapeError("add", a.shape, b.shape)
    lead = tuple(range(a.ndim - b.ndim))

    def backward_fn(g):
        return g, (g.sum(axis=lead) if lead else g)

    return make_node("add", a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def backward_fn(g):
        return g * b.data, g * a.data

    return make_node("mul", a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)

    def backward_fn(g):
        return (g * c,)

    return make_node("scale", a.data * c, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward_fn(g):
        return (g * mask,)

    return make_node("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * out * (1 - out),)

    return make_node("sigmoid", out, (a,), backward_fn)


def log(a: Tensor, clamp: float = 1e-12) -> Tensor:
    """Natural log with the input clamped from below; clamped entries get zero grad."""
    a = as_tensor(a)
    x = a.data
    safe = np.maximum(x, x.dtype.type(clamp))
    live = x >= clamp

    def backward_fn(g):
        return (np.where(live, g / safe, 0).astype(g.dtype),)

    return make_node("log", np.log(safe), (a,), backward_fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_node("softmax", out, (a,), backward_fn)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries, returned as a 0-d tensor."""
    a = as_tensor(a)

    def backward_fn(g):
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return make_node("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward_fn)


def hadamard_broadcast(h: Tensor, z: Tensor) -> Tensor:
    """Multiply feature maps (B, N, H, W) by per-channel gates (B, N)."""
    h, z = as_tensor(h), as_tensor(z)
    if h.ndim != 4 or z.shape != h.shape[:2]:
        raise ShapeError("hadamard-broadcast", h.shape, z.shape, detail="expected (B,N,H,W) and (B,N)")
    zb = z.data[:, :, None, None]

    def backward_fn(g):
        return g * zb, (g * h.data).sum(axis=(2, 3))

    return make_node("hadamard-broadcast", h.data * zb, (h, z), backward_fn)


def straight_through(p: Tensor, hard: np.ndarray, op: str = "straight-through") -> Tensor:
    """Forward ``hard`` (= p + detached offset) while passing gradients to ``p`` unchanged."""
    p = as_tensor(p)
    hard = np.asarray(hard, dtype=p.data.dtype)
    if hard.shape != p.shape:
        raise ShapeError(op, p.shape, hard.shape)

    def backward_fn(g):
        return (g,)

    return make_node(op, hard, (p,), backward_fn)


# ------------------------------------------------------------------ linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return make_node("matmul", a.data @ b.data, (a, b), backward_fn)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C*kh*kw) patches for a same-padded stride-1 conv."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (B, C, H, W, kh, kw)
    B, C, H, W = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, H, W, C * kh * kw)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    B, C, H, W = shape
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(B, H, W, C, kh, kw)
    out = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + H, j:j + W] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, ph:ph + H, pw:pw + W]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """NCHW convolution, stride 1, zero same-padding, odd kernel size."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    F, C, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel size must be odd")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (F,):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias must be (F,)")
    B, _, H, W = x.shape
    cols = _im2col(x.data, kh, kw)
    wmat = w.data.reshape(F, -1)
    out = cols @ wmat.T  # (B, H, W, F)
    if b is not None:
        out = out + b.data
    value = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward_fn(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = (gt.T @ cols.reshape(-1, C * kh * kw)).reshape(w.shape)
        gx = _col2im(gt @ wmat, x.shape, kh, kw) if x.requires_grad else None
        grads = (gx, gw)
        if b is not None:
            grads += (gt.sum(axis=0),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_node("conv2d", value, parents, backward_fn)


# ----------------------------------------------------------------- pooling

def global_mean_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global-mean-pool", x.shape, detail="expected rank 4")
    hw = x.shape[2] * x.shape[3]

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).astype(x.data.dtype),)

    return make_node("global-mean-pool", x.data.mean(axis=(2, 3)), (x,), backward_fn)


def mean_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` mean pooling with stride ``size``."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError("mean-pool", x.shape, detail=f"spatial dims must divide by {size}")
    B, C, H, W = x.shape
    value = x.data.reshape(B, C, H // size, size, W // size, size).mean(axis=(3, 5))

    def backward_fn(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        return (up.astype(x.data.dtype),)

    return make_node("mean-pool", value, (x,), backward_fn)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` of every requires-grad node reachable from ``loss``.

    Leaf gradients accumulate across calls; zero them explicitly between steps.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node.parents:
            node.grad = np.zeros_like(node.data)
    if loss.parents:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad += 1
    for node in reversed(order):
        if not node.parents:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad += g.reshape(p.shape)


def parameters_finite(params: Iterable[Tensor]) -> str | None:
    """Return the name of the first parameter (or its gradient) that is non-finite."""
    for p in params:
        if not np.all(np.isfinite(p.data)):
            return p.name or "<unnamed>"
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return f"grad({p.name or '<unnamed>'})"
    return None


# ----------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction. Moments live on each :class:`Parameter`."""

    def __init__(self, params: Sequence[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            g = p.grad
            p.m *= b1
            p.m += (1 - b1) * g
            p.v *= b2
            p.v += (1 - b2) * g * g
            if self.lr == 0:
                continue
            m_hat = p.m / c1
            v_hat = p.v / c2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
