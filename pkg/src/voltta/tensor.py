"""Dense float64 tensors with reverse-mode automatic differentiation.

The operator vocabulary is fixed to what the segmentation network and its
losses need: 3D convolution, a handful of elementwise ops, channel softmax,
pooling/upsampling/linear plumbing, and full reductions. There is no general
broadcasting; the only broadcast is per-channel gamma/beta in
``scalar_affine``. Everything runs in float64 so finite-difference gradient
checks are reliable.

Gradient conventions: ReLU's subgradient at exactly 0 is 0, max-pooling ties
route the gradient to the first maximum in window scan order, and
convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_ids = itertools.count()


class Tensor:
    """Value node of the computation graph.

    Leaf tensors hold data (parameters or inputs); op tensors additionally
    hold their parents and a backward closure. Tensors are treated as
    immutable once created; only the training driver replaces parameter
    ``data`` between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "id", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_ids)
        self.op = op
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"


def _result(data, parents, op, backward):
    """Build an op tensor, tracking the graph only when a parent needs it."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, op=op, parents=parents if req else ())
    if req:
        out._backward = backward
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def relu(x):
    y = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * _relu_grad_mask(x.data),)

    return _result(y, (x,), "relu", backward)


def _relu_grad_mask(data):
    # module-level so the gradcheck fault-injection fixture can patch it
    return data > 0.0


def add(a, b):
    _check_same_shape(a, b, "add")

    def backward(g):
        return (g, g)

    return _result(a.data + b.data, (a, b), "add", backward)


def mul(a, b):
    _check_same_shape(a, b, "mul")

    def backward(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), "mul", backward)


def scalar_affine(x, gamma, beta):
    """Per-channel (or constant) affine ``gamma * x + beta``.

    ``gamma``/``beta`` are either python floats (constants, no gradient) or
    1-D tensors of length ``x.shape[0]`` broadcast over the trailing axes.
    """
    parents = [x]
    if isinstance(gamma, Tensor):
        if gamma.data.ndim != 1 or x.data.ndim < 1 or gamma.data.shape[0] != x.data.shape[0]:
            raise ShapeError(
                f"scalar_affine: gamma shape {gamma.data.shape} does not broadcast "
                f"per-channel over {x.data.shape}")
        gdat = gamma.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
        parents.append(gamma)
    else:
        gdat = float(gamma)
    if isinstance(beta, Tensor):
        if beta.data.ndim != 1 or beta.data.shape[0] != x.data.shape[0]:
            raise ShapeError(
                f"scalar_affine: beta shape {beta.data.shape} does not broadcast "
                f"per-channel over {x.data.shape}")
        bdat = beta.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
        parents.append(beta)
    else:
        bdat = float(beta)

    y = gdat * x.data + bdat
    trailing = tuple(range(1, x.data.ndim))

    def backward(g):
        grads = [g * gdat if x.requires_grad else None]
        if isinstance(gamma, Tensor):
            grads.append((g * x.data).sum(axis=trailing) if gamma.requires_grad else None)
        if isinstance(beta, Tensor):
            grads.append(g.sum(axis=trailing) if beta.requires_grad else None)
        return tuple(grads)

    return _result(y, tuple(parents), "scalar_affine", backward)


def softmax_channels(logits):
    """Numerically stable softmax over the channel (first) axis."""
    if logits.data.shape[0] < 2:
        raise ShapeError("softmax_channels: need at least 2 channels")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=0, keepdims=True)
        return (p * (g - dot),)

    return _result(p, (logits,), "softmax_channels", backward)


# ---------------------------------------------------------------------------
# convolution


def conv3d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of a ``[C_in, D, H, W]`` tensor with a
    ``[C_out, C_in, k, k, k]`` kernel plus per-channel bias."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv3d: input must be 4-D [C,D,H,W], got {x.data.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be 5-D, got {kernel.data.shape}")
    co, ci, k1, k2, k3 = kernel.data.shape
    if not (k1 == k2 == k3):
        raise ShapeError(f"conv3d: kernel must be cubic, got {kernel.data.shape}")
    k = k1
    if k % 2 != 1:
        raise ShapeError(f"conv3d: kernel extent must be odd, got {k}")
    if ci != x.data.shape[0]:
        raise ShapeError(
            f"conv3d: kernel expects {ci} input channels, input has {x.data.shape[0]}")
    if bias.data.shape != (co,):
        raise ShapeError(f"conv3d: bias shape {bias.data.shape} != ({co},)")
    if stride not in (1, 2):
        raise ShapeError(f"conv3d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv3d: padding must be >= 0, got {padding}")
    spatial = x.data.shape[1:]
    out_spatial = []
    for ax, extent in enumerate(spatial):
        span = extent + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise ShapeError(
                f"conv3d: axis {ax + 1} extent {extent} with padding {padding}, "
                f"kernel {k}, stride {stride} gives no integral output size")
        out_spatial.append(span // stride + 1)
    d2, h2, w2 = out_spatial
    nvox = d2 * h2 * w2

    # channels-last im2col keeps the gather cache-friendly
    xl = np.ascontiguousarray(x.data.transpose(1, 2, 3, 0))
    if padding:
        xl = np.pad(xl, ((padding, padding),) * 3 + ((0, 0),))
    win = sliding_window_view(xl, (k, k, k), axis=(0, 1, 2))
    if stride != 1:
        win = win[::stride, ::stride, ::stride]
    # (d,h,w, i,j,l, c) -> rows indexed by voxel, cols by (i,j,l,c)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 6, 3)).reshape(nvox, k ** 3 * ci)
    wmat = kernel.data.transpose(2, 3, 4, 1, 0).reshape(k ** 3 * ci, co)
    y = cols @ wmat + bias.data
    y = np.ascontiguousarray(y.reshape(d2, h2, w2, co).transpose(3, 0, 1, 2))

    cols_saved = cols if kernel.requires_grad else None

    def backward(g):
        gl = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(nvox, co)
        gx = gk = gb = None
        if bias.requires_grad:
            gb = gl.sum(axis=0)
        if kernel.requires_grad:
            gk = (cols_saved.T @ gl).reshape(k, k, k, ci, co).transpose(4, 3, 0, 1, 2)
        if x.requires_grad:
            gcols = (gl @ wmat.T).reshape(d2, h2, w2, k, k, k, ci)
            pd, ph, pw = (s + 2 * padding for s in spatial)
            gxp = np.zeros((pd, ph, pw, ci))
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[i:i + stride * d2:stride,
                            j:j + stride * h2:stride,
                            l:l + stride * w2:stride] += gcols[:, :, :, i, j, l]
            if padding:
                gxp = gxp[padding:-padding, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(gxp.transpose(3, 0, 1, 2))
        return (gx, gk, gb)

    return _result(y, (x, kernel, bias), "conv3d", backward)


# ---------------------------------------------------------------------------
# structural ops


def maxpool2(x):
    """2x2x2 max pooling; spatial extents must be even."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: input must be 4-D, got {x.data.shape}")
    c, d, h, w = x.data.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents {(d, h, w)} must be even")
    windows = (x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 3, 5, 2, 4, 6)
               .reshape(c, d // 2, h // 2, w // 2, 8))
    idx = windows.argmax(axis=-1)  # ties -> first maximum
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((c, d // 2, h // 2, w // 2, 8))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3, 6)
              .reshape(c, d, h, w))
        return (gx,)

    return _result(y, (x,), "maxpool2", backward)


def upsample2_nearest(x):
    """Nearest-neighbor 2x upsampling along every spatial axis."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2_nearest: input must be 4-D, got {x.data.shape}")
    c, d, h, w = x.data.shape
    y = np.broadcast_to(
        x.data[:, :, None, :, None, :, None],
        (c, d, 2, h, 2, w, 2)).reshape(c, 2 * d, 2 * h, 2 * w)

    def backward(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return _result(np.ascontiguousarray(y), (x,), "upsample2_nearest", backward)


def global_avg_pool(x):
    """Spatial mean per channel: ``[C,D,H,W] -> [C]``."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D, got {x.data.shape}")
    c = x.data.shape[0]
    n = x.data[0].size
    y = x.data.reshape(c, -1).mean(axis=1)

    def backward(g):
        return (np.broadcast_to((g / n).reshape(c, 1, 1, 1), x.data.shape).copy(),)

    return _result(y, (x,), "global_avg_pool", backward)


def linear(x, weight, bias):
    """``weight @ x + bias`` for a 1-D input vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"linear: input must be 1-D, got {x.data.shape}")
    o, f = weight.data.shape
    if f != x.data.shape[0]:
        raise ShapeError(f"linear: weight expects {f} features, input has {x.data.shape[0]}")
    if bias.data.shape != (o,):
        raise ShapeError(f"linear: bias shape {bias.data.shape} != ({o},)")
    y = weight.data @ x.data + bias.data

    def backward(g):
        gx = weight.data.T @ g if x.requires_grad else None
        gw = np.outer(g, x.data) if weight.requires_grad else None
        gb = g if bias.requires_grad else None
        return (gx, gw, gb)

    return _result(y, (x, weight, bias), "linear", backward)


def concat_channels(tensors):
    """Concatenate along the channel (first) axis."""
    tensors = tuple(tensors)
    trailing = tensors[0].data.shape[1:]
    for t in tensors[1:]:
        if t.data.shape[1:] != trailing:
            raise ShapeError(
                f"concat_channels: trailing shapes {t.data.shape[1:]} != {trailing}")
    sizes = [t.data.shape[0] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=0)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _result(y, tensors, "concat_channels", backward)


def reduce_sum(x):
    y = x.data.sum()

    def backward(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _result(y, (x,), "reduce_sum", backward)


def reduce_mean(x):
    n = x.data.size
    y = x.data.mean()

    def backward(g):
        return (np.broadcast_to(g / n, x.data.shape).copy(),)

    return _result(y, (x,), "reduce_mean", backward)


# ---------------------------------------------------------------------------
# graph + backward


@dataclass
class GraphNode:
    id: int
    op: str
    input_ids: tuple


@dataclass
class Graph:
    """Topologically ordered record of the ops reachable from an output."""

    nodes: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        order = _topo_order(output)
        nodes = [GraphNode(t.id, t.op, tuple(p.id for p in t.parents)) for t in order]
        return cls(nodes=nodes, outputs=[output.id])


def _topo_order(root):
    """Parents-before-consumers ordering, iteratively (no recursion limit)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.id in visited:
            continue
        visited.add(t.id)
        stack.append((t, True))
        for p in t.parents:
            if p.id not in visited:
                stack.append((p, False))
    return order


def backward(loss, params=None, seed=1.0):
    """Reverse-mode sweep from a scalar ``loss``.

    Accumulates into ``.grad`` of every reachable requires_grad leaf (so
    repeated calls sum, which the per-view weighting in the adaptation loop
    relies on) and returns ``{tensor_id: gradient}`` for this call. When
    ``params`` is given, every listed leaf appears in the result, with a
    zero gradient if the sweep never reached it.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    pending = {loss.id: np.asarray(float(seed))}
    reached = {}
    for t in reversed(order):
        g = pending.pop(t.id, None)
        if g is None:
            continue
        if t._backward is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
                reached[t.id] = g
            continue
        for parent, pg in zip(t.parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = pending.get(parent.id)
            pending[parent.id] = pg if acc is None else acc + pg
    if params is not None:
        out = {}
        for p in params:
            out[p.id] = reached.get(p.id, np.zeros_like(p.data))
        return out
    return reached


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments."""

    def __init__(self, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.first_moment = {}
        self.second_moment = {}

    def step(self, params):
        """One update over ``{name: Tensor}``; missing grads count as zero."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.first_moment.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.second_moment[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.first_moment[name] = m
            self.second_moment[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)
