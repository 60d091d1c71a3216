"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine records a computation graph as ops are applied and replays it in
reverse topological order on ``backward``.  Gradients accumulate (+=) into
every tensor that requires grad, including intermediates, so class-activation
weights can be read off interior nodes of a retained graph.  Everything is
double precision and single-threaded per graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "GradReport",
    "create",
    "no_grad",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "neg",
    "add",
    "sub",
    "hadamard",
    "div",
    "matmul",
    "conv2d",
    "maxpool2d",
    "reduce_sum",
    "reduce_mean",
    "global_avg_pool",
    "softmax",
    "reshape",
    "select",
    "backward",
    "zero_grad",
    "grad_check",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _Node:
    """Graph record: op name, parent tensors, and the local backward rule."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """A dense float64 array, optionally carrying gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars lift to constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def create(shape, values, requires_grad=False) -> Tensor:
    """Build a tensor of the given shape from row-major values."""
    shape = tuple(int(d) for d in shape)
    if any(d <= 0 for d in shape):
        raise ValueError(f"create: dimensions must be positive, got {shape}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    n = int(np.prod(shape))
    if flat.size != n:
        raise ValueError(f"create: {flat.size} values for shape {shape} ({n} expected)")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data, op, parents, backward_fn) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out.node = _Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _result(np.maximum(x.data, 0.0), "relu", (x,), bwd)


def sigmoid(x) -> Tensor:
    x = _lift(x)
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _result(s, "sigmoid", (x,), bwd)


def exp(x) -> Tensor:
    x = _lift(x)
    e = np.exp(x.data)

    def bwd(g):
        return (g * e,)

    return _result(e, "exp", (x,), bwd)


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0):
        idx = tuple(int(i) for i in np.argwhere(x.data <= 0)[0])
        raise ValueError(f"log: non-positive element at index {idx}")
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _result(np.log(xd), "log", (x,), bwd)


def neg(x) -> Tensor:
    x = _lift(x)

    def bwd(g):
        return (-g,)

    return _result(-x.data, "neg", (x,), bwd)


def add(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    data = x.data + y.data

    def bwd(g):
        return (_unbroadcast(g, x.data.shape), _unbroadcast(g, y.data.shape))

    return _result(data, "add", (x, y), bwd)


def sub(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    data = x.data - y.data

    def bwd(g):
        return (_unbroadcast(g, x.data.shape), _unbroadcast(g, y.data.shape))

    return _result(data, "sub", (x, y), bwd)


def hadamard(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    data = x.data * y.data

    def bwd(g):
        return (
            _unbroadcast(g * y.data, x.data.shape),
            _unbroadcast(g * x.data, y.data.shape),
        )

    return _result(data, "hadamard", (x, y), bwd)


def div(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    if np.any(y.data == 0):
        idx = tuple(int(i) for i in np.argwhere(y.data == 0)[0])
        raise ZeroDivisionError(f"div: zero divisor element at index {idx}")
    data = x.data / y.data
    yd = y.data

    def bwd(g):
        return (
            _unbroadcast(g / yd, x.data.shape),
            _unbroadcast(-g * data / yd, y.data.shape),
        )

    return _result(data, "div", (x, y), bwd)


# ---------------------------------------------------------------------------
# linear algebra and structural ops


def matmul(x, y) -> Tensor:
    x, y = _lift(x), _lift(y)
    if x.data.ndim != 2 or y.data.ndim != 2:
        raise ValueError(f"matmul: expects 2-D operands, got {x.shape} and {y.shape}")
    if x.data.shape[1] != y.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({x.shape} @ {y.shape})")
    xd, yd = x.data, y.data

    def bwd(g):
        return (g @ yd.T, xd.T @ g)

    return _result(xd @ yd, "matmul", (x, y), bwd)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    shape = tuple(int(d) for d in shape)
    old = x.data.shape

    def bwd(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), "reshape", (x,), bwd)


def select(x, index) -> Tensor:
    """Pick one element of a vector; gradient is one-hot at the index."""
    x = _lift(x)
    if x.data.ndim != 1:
        raise ValueError(f"select: expects a vector, got shape {x.shape}")
    index = int(index)
    if not 0 <= index < x.data.shape[0]:
        raise IndexError(f"select: index {index} out of range for length {x.data.shape[0]}")
    n = x.data.shape[0]

    def bwd(g):
        out = np.zeros(n)
        out[index] = g
        return (out,)

    return _result(x.data[index], "select", (x,), bwd)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    for a in axes:
        if not 0 <= a < ndim:
            raise ValueError(f"reduce: axis {a} invalid for {ndim}-d tensor")
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce: repeated axis in {axes}")
    return axes


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axes=None, keepdims=False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axes, x.data.ndim)
    shape = x.data.shape

    def bwd(g):
        return (_expand_reduced(g, shape, axes, keepdims),)

    return _result(x.data.sum(axis=axes, keepdims=keepdims), "sum", (x,), bwd)


def reduce_mean(x, axes=None, keepdims=False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axes, x.data.ndim)
    shape = x.data.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1

    def bwd(g):
        return (_expand_reduced(g, shape, axes, keepdims) / count,)

    return _result(x.data.mean(axis=axes, keepdims=keepdims), "mean", (x,), bwd)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes of a (C, W, H) tensor, yielding (C,)."""
    x = _lift(x)
    if x.data.ndim != 3:
        raise ValueError(f"global_avg_pool: expects (C, W, H), got shape {x.shape}")
    return reduce_mean(x, axes=(1, 2))


def softmax(x, axis=0) -> Tensor:
    """Shift-stabilized softmax along one axis."""
    x = _lift(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input")
    axis = _norm_axes(axis, x.data.ndim)[0]
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, reduce_sum(e, axes=(axis,), keepdims=True))


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp, kw, kh, stride, wo, ho):
    """Patch matrix (C*kw*kh, wo*ho) with contracted axes leading."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kw, kh), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, wo * ho)


def conv2d(x, k, stride=1, pad=0) -> Tensor:
    """Cross-correlate (Cin, W, H) input with a (Cout, Cin, kw, kh) kernel."""
    x, k = _lift(x), _lift(k)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ValueError(f"conv2d: expects (Cin,W,H) and (Cout,Cin,kw,kh), got {x.shape}, {k.shape}")
    cin, w, h = x.data.shape
    cout, kcin, kw, kh = k.data.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    stride, pad = int(stride), int(pad)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    wp, hp = w + 2 * pad, h + 2 * pad
    if kw > wp or kh > hp:
        raise ValueError(f"conv2d: kernel {kw}x{kh} exceeds padded input {wp}x{hp}")
    wo = (wp - kw) // stride + 1
    ho = (hp - kh) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    col = _im2col(xp, kw, kh, stride, wo, ho)
    out = (k.data.reshape(cout, -1) @ col).reshape(cout, wo, ho)

    kd = k.data

    def bwd(g):
        gk = gx = None
        if k.requires_grad:
            gk = (g.reshape(cout, -1) @ col.T).reshape(cout, cin, kw, kh)
        if x.requires_grad:
            if stride == 1 and pad <= kw - 1 and pad <= kh - 1:
                # full correlation of the padded output grad with the flipped kernel
                gq = np.pad(g, ((0, 0), (kw - 1 - pad,) * 2, (kh - 1 - pad,) * 2))
                colg = _im2col(gq, kw, kh, 1, w, h)
                kflip = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gx = (kflip @ colg).reshape(cin, w, h)
            else:
                gxp = np.zeros((cin, wp, hp))
                for di in range(kw):
                    for dj in range(kh):
                        # kernel tap (di, dj) scattered on the stride grid
                        contrib = np.tensordot(kd[:, :, di, dj], g, axes=([0], [0]))
                        gxp[:, di : di + stride * wo : stride, dj : dj + stride * ho : stride] += contrib
                gx = gxp[:, pad : pad + w, pad : pad + h] if pad else gxp
        return (gx, gk)

    return _result(out, "conv2d", (x, k), bwd)


def maxpool2d(x, size) -> Tensor:
    """Non-overlapping window maxima over the spatial axes of (C, W, H)."""
    x = _lift(x)
    if x.data.ndim != 3:
        raise ValueError(f"maxpool2d: expects (C, W, H), got shape {x.shape}")
    size = int(size)
    if size < 1:
        raise ValueError(f"maxpool2d: size must be >= 1, got {size}")
    c, w, h = x.data.shape
    if w % size or h % size:
        raise ValueError(f"maxpool2d: spatial dims {w}x{h} not divisible by {size}")
    wo, ho = w // size, h // size
    win = x.data.reshape(c, wo, size, ho, size)  # pure view, no copy
    out = win.max(axis=(2, 4))

    def bwd(g):
        # two-stage argmax is lexicographic-min over (di, dj): the first
        # maximum in a row-major scan of each window (tie rule)
        inner = win.argmax(axis=4)  # (c, wo, size, ho): first dj per di
        rows = win.max(axis=4)
        di = rows.argmax(axis=2)  # (c, wo, ho): first di among row maxima
        dj = np.take_along_axis(inner, di[:, :, None, :], axis=2)[:, :, 0, :]
        gwin = np.zeros((c, wo, size, ho, size))
        cc = np.arange(c)[:, None, None]
        ww = np.arange(wo)[None, :, None]
        hh = np.arange(ho)[None, None, :]
        gwin[cc, ww, di, hh, dj] = g
        return (gwin.reshape(c, w, h),)

    return _result(out, "maxpool2d", (x,), bwd)


# ---------------------------------------------------------------------------
# reverse sweep


def _toposort(root: Tensor, stop_ids):
    """Iterative post-order over the recorded graph, pruned to grad-requiring nodes."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None and id(t) not in stop_ids:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Tensor, stop_at=()) -> None:
    """Reverse sweep from a scalar root; grads accumulate into requires_grad tensors.

    Tensors in ``stop_at`` receive their gradient but the sweep does not
    descend past them (used when only an interior gradient is wanted).
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    stop_ids = {id(t) for t in stop_at}
    order = _toposort(root, stop_ids)
    flow = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = flow.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t.node is None or id(t) in stop_ids:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            prev = flow.get(id(p))
            flow[id(p)] = pg if prev is None else prev + pg


def zero_grad(*roots) -> None:
    """Clear grads on every tensor reachable (as an ancestor) from the roots."""
    stack = list(roots)
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        t.grad = None
        if t.node is not None:
            stack.extend(t.node.parents)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    """Per-input comparison of backward() against central finite differences."""

    max_rel_error: list
    worst_index: list
    passed: bool


def grad_check(builder, inputs, eps=1e-5, tol=1e-4) -> GradReport:
    """Compare analytic gradients of ``builder(*inputs)`` to finite differences.

    ``builder`` must deterministically map the input tensors to a scalar
    tensor.  Every element of every input is perturbed by +/- eps; relative
    error uses max(|analytic|, |numeric|, 1) as the scale.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    out = builder(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check: builder output must be scalar, got shape {out.shape}")
    for t in inputs:
        t.grad = None
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value_at() -> float:
        with no_grad():
            return float(builder(*inputs).data.reshape(()))

    max_errs, worst = [], []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        err_best, idx_best = 0.0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value_at()
            flat[i] = orig - eps
            f_minus = value_at()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(abs(ai), abs(numeric), 1.0)
            if rel > err_best:
                err_best, idx_best = rel, i
        max_errs.append(err_best)
        worst.append(tuple(int(v) for v in np.unravel_index(idx_best, t.data.shape)))
    passed = all(e < tol for e in max_errs)
    return GradReport(max_rel_error=max_errs, worst_index=worst, passed=passed)
