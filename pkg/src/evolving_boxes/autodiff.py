"""Small reverse-mode autodiff engine over numpy arrays.

A :class:`Graph` is a tape: every operation appends a :class:`Node` holding
its forward value and a closure that maps the output gradient to input
gradients. Node ids are assigned in creation order, so the tape is always in
topological order and :meth:`Graph.backward` is a single reverse sweep.

Only the layer set the detector needs is implemented. All ops work on
whatever float dtype the graph was created with; training uses float32 and
the gradient checker re-runs the same code in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .errors import ContractError, InvalidBoxError, InvalidShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Parameter:
    """A named trainable tensor with an accumulating gradient buffer."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float32)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer (not trainable)."""

    channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        self.running_mean = np.zeros(self.channels, np.float32)
        self.running_var = np.ones(self.channels, np.float32)


class Node:
    __slots__ = ("graph", "id", "value", "parents", "backward_fn", "param",
                 "requires_grad", "grad")

    def __init__(self, graph, nid, value, parents, backward_fn, param=None,
                 requires_grad=False):
        self.graph = graph
        self.id = nid
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, shape={self.value.shape})"


class Graph:
    """Tape of operations. One graph per forward pass."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, value, parents=(), backward_fn=None, param=None,
              requires_grad=None) -> Node:
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, tuple(parents),
                    backward_fn if requires_grad else None, param, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, array) -> Node:
        return self._push(np.asarray(array, dtype=self.dtype), requires_grad=False)

    def input(self, array, requires_grad: bool = True) -> Node:
        """A leaf whose gradient accumulates into ``node.grad``."""
        node = self._push(np.array(array, dtype=self.dtype), requires_grad=requires_grad)
        if requires_grad:
            node.grad = np.zeros_like(node.value)
        return node

    def param(self, p: Parameter) -> Node:
        node = self._params.get(p.name)
        if node is None:
            node = self._push(np.asarray(p.value, dtype=self.dtype), param=p,
                              requires_grad=True)
            self._params[p.name] = node
        return node

    @property
    def parameters(self) -> dict[str, Parameter]:
        return {name: n.param for name, n in self._params.items()}

    def backward(self, loss: Node) -> None:
        """Reverse sweep from a scalar node; gradients accumulate on leaves."""
        if loss.graph is not self:
            raise ContractError("loss node belongs to a different graph")
        if loss.value.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if node.backward_fn is None:
                if node.param is not None:
                    p = node.param
                    if p.grad.shape != p.value.shape or p.grad.dtype != p.value.dtype:
                        p.grad = np.zeros_like(p.value)
                    p.grad += g.astype(p.grad.dtype, copy=False)
                elif node.grad is not None:
                    node.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg


def _as_node(graph: Graph, x) -> Node:
    return x if isinstance(x, Node) else graph.constant(x)


def _shape_error(what: str, a, b) -> InvalidShapeError:
    return InvalidShapeError(f"{what}: shapes {tuple(a)} and {tuple(b)} are incompatible")


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Node, w: Node, b: Node, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation of a CHW map with an OCkk kernel."""
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[1] != xv.shape[0]:
        raise _shape_error("conv2d input/weight", xv.shape, wv.shape)
    if bv.shape != (wv.shape[0],):
        raise _shape_error("conv2d weight/bias", wv.shape, bv.shape)
    c, h, wd = xv.shape
    o, _, kh, kw = wv.shape
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise _shape_error("conv2d kernel larger than padded input", xv.shape, wv.shape)
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad))) if pad else xv
    # im2col: rows ordered (c, i, j) to match the flattened kernel
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    wm = wv.reshape(o, -1)
    out = wm @ cols
    out += bv[:, None]

    def backward(g):
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(wv.shape)
        gcols = (wm.T @ g2).reshape(c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += gcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, g2.sum(axis=1)

    return x.graph._push(out.reshape(o, ho, wo), (x, w, b), backward)


def maxpool2(x: Node) -> Node:
    """2x2 stride-2 max pooling; ties go to the first cell in row-major order."""
    xv = x.value
    if xv.ndim != 3 or xv.shape[1] % 2 or xv.shape[2] % 2:
        raise InvalidShapeError(f"maxpool2 needs even spatial dims, got {xv.shape}")
    c, h, w = xv.shape
    cells = xv.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        c, h // 2, w // 2, 4)
    arg = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gc = np.zeros_like(cells)
        np.put_along_axis(gc, arg[..., None], g[..., None], axis=-1)
        return (gc.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return x.graph._push(out, (x,), backward)


def pad_to_even(x: Node) -> Node:
    """Zero-pad the bottom/right edge of a CHW map so both spatial dims are even."""
    c, h, w = x.value.shape
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x
    out = np.pad(x.value, ((0, 0), (0, ph), (0, pw)))
    return x.graph._push(out, (x,), lambda g: (g[:, :h, :w],))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph._push(np.where(mask, x.value, 0).astype(x.value.dtype), (x,),
                         lambda g: (g * mask,))


def linear(x: Node, w: Node, b: Node) -> Node:
    """``y = W x + b`` for a vector, or row-wise for an (R, N) batch."""
    xv, wv = x.value, w.value
    if xv.ndim not in (1, 2) or wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
        raise _shape_error("linear input/weight", xv.shape, wv.shape)
    if b.value.shape != (wv.shape[0],):
        raise _shape_error("linear weight/bias", wv.shape, b.value.shape)
    out = xv @ wv.T + b.value

    def backward(g):
        if xv.ndim == 1:
            return g @ wv, np.outer(g, xv), g
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return x.graph._push(out, (x, w, b), backward)


def batchnorm(x: Node, gamma: Node, beta: Node, state: BatchNormState,
              train: bool = True, update_stats: bool = True) -> Node:
    """Per-channel normalization of a CHW map over its spatial positions."""
    xv = x.value
    if xv.ndim != 3 or gamma.value.shape != (xv.shape[0],) or beta.value.shape != (xv.shape[0],):
        raise _shape_error("batchnorm input/gamma", xv.shape, gamma.value.shape)
    gv = gamma.value[:, None, None]
    if train:
        mean = xv.mean(axis=(1, 2), keepdims=True)
        var = xv.var(axis=(1, 2), keepdims=True)
        if update_stats:
            m = state.momentum
            state.running_mean = (m * state.running_mean + (1 - m) * mean.ravel()).astype(np.float32)
            state.running_var = (m * state.running_var + (1 - m) * var.ravel()).astype(np.float32)
    else:
        mean = state.running_mean.astype(xv.dtype)[:, None, None]
        var = state.running_var.astype(xv.dtype)[:, None, None]
    inv_std = 1.0 / np.sqrt(var + xv.dtype.type(state.eps))
    xhat = (xv - mean) * inv_std
    out = gv * xhat + beta.value[:, None, None]
    n = xv.shape[1] * xv.shape[2]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        gxhat = g * gv
        if train:
            gx = inv_std / n * (n * gxhat - gxhat.sum(axis=(1, 2), keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=(1, 2), keepdims=True))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return x.graph._push(out.astype(xv.dtype, copy=False), (x, gamma, beta), backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    scale_ = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale_ - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m.astype(dtype)


def resample_bilinear(x: Node, out_h: int, out_w: int) -> Node:
    """Bilinear resize with the half-pixel (align_corners=False) convention."""
    if out_h < 1 or out_w < 1:
        raise InvalidShapeError(f"resample target must be positive, got {(out_h, out_w)}")
    c, h, w = x.value.shape
    if (h, w) == (out_h, out_w):
        return x.graph._push(x.value.copy(), (x,), lambda g: (g,))
    ah = _interp_matrix(h, out_h, x.value.dtype)
    aw = _interp_matrix(w, out_w, x.value.dtype)
    out = ah @ x.value @ aw.T
    return x.graph._push(out, (x,), lambda g: (ah.T @ g @ aw,))


def concat_channels(xs: Sequence[Node]) -> Node:
    if not xs:
        raise InvalidShapeError("concat_channels needs at least one input")
    spatial = xs[0].value.shape[1:]
    for n in xs[1:]:
        if n.value.shape[1:] != spatial:
            raise _shape_error("concat_channels spatial", xs[0].value.shape, n.value.shape)
    bounds = np.cumsum([0] + [n.value.shape[0] for n in xs])
    out = np.concatenate([n.value for n in xs], axis=0)
    return xs[0].graph._push(
        out, tuple(xs), lambda g: [g[a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def concat_features(xs: Sequence[Node]) -> Node:
    """Concatenate along the last axis (fc feature vectors, batched or not)."""
    bounds = np.cumsum([0] + [n.value.shape[-1] for n in xs])
    out = np.concatenate([n.value for n in xs], axis=-1)
    return xs[0].graph._push(
        out, tuple(xs), lambda g: [g[..., a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def roi_bins(boxes: np.ndarray, stride: float, feat_h: int, feat_w: int,
             out_h: int, out_w: int):
    """Integer cell ranges ``[start, end)`` of every ROI bin.

    The box is mapped to feature cells by dividing by ``stride`` with the
    start floored and the end ceiled, clamped to at least one cell inside the
    map, then split into equal fractional bins. Returns ``(hs, he, ws, we)``
    with shapes (R, out_h) and (R, out_w).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        raise InvalidBoxError("roi_maxpool needs boxes with positive width and height")

    def axis_bins(center, size, extent, nbins):
        start = np.floor((center - size / 2) / stride).astype(np.int64)
        end = np.ceil((center + size / 2) / stride).astype(np.int64)
        start = np.clip(start, 0, extent - 1)
        end = np.clip(end, start + 1, extent)
        length = (end - start)[:, None]
        k = np.arange(nbins)[None, :]
        # exact integer arithmetic for start + k*length/nbins
        bs = start[:, None] + (k * length) // nbins
        be = start[:, None] - ((-(k + 1) * length) // nbins)
        return bs, be

    hs, he = axis_bins(boxes[:, 1], boxes[:, 3], feat_h, out_h)
    ws, we = axis_bins(boxes[:, 0], boxes[:, 2], feat_w, out_w)
    return hs, he, ws, we


class RoiIndex:
    """Precomputed gather indices for pooling a fixed box set from an H x W map.

    ``windows[k]`` holds, for the k-th cell of every bin window in row-major
    order, the flat cell index or ``H*W`` (a sentinel) when the bin is smaller
    than the largest window.
    """

    def __init__(self, boxes: np.ndarray, stride: float, feat_h: int, feat_w: int,
                 out_h: int = 14, out_w: int = 14):
        self.shape = (feat_h, feat_w, out_h, out_w)
        hs, he, ws, we = roi_bins(boxes, stride, feat_h, feat_w, out_h, out_w)
        self.count = hs.shape[0]
        sentinel = feat_h * feat_w
        self.windows = []
        if self.count == 0:
            return
        for dy in range(int((he - hs).max())):
            row = hs + dy
            row_ok = row < he
            for dx in range(int((we - ws).max())):
                col = ws + dx
                ok = row_ok[:, :, None] & (col < we)[:, None, :]
                flat = row[:, :, None] * feat_w + col[:, None, :]
                self.windows.append(np.where(ok, flat, sentinel).astype(np.intp))


def roi_maxpool(feature: Node, boxes, stride: float | None = None,
                out_h: int = 14, out_w: int = 14) -> Node:
    """Max-pool each box's region of a CHW map into an out_h x out_w grid.

    ``boxes`` are (R, 4) center-form pixel boxes (or a prepared
    :class:`RoiIndex`); the result is (R, C, out_h, out_w). Gradients go to
    the first maximal cell of each bin in row-major order.
    """
    fv = feature.value
    c, h, w = fv.shape
    if isinstance(boxes, RoiIndex):
        index = boxes
        out_h, out_w = index.shape[2:]
    else:
        index = RoiIndex(boxes, stride, h, w, out_h, out_w)
    if index.shape[:2] != (h, w):
        raise InvalidShapeError(f"ROI index built for {index.shape}, map is {(h, w)}")
    r = index.count
    if r == 0:
        out = np.zeros((0, c, out_h, out_w), fv.dtype)
        return feature.graph._push(out, (feature,), lambda g: (np.zeros_like(fv),))
    cells = np.empty((h * w + 1, c), dtype=fv.dtype)
    cells[:-1] = fv.reshape(c, h * w).T
    cells[-1] = -np.inf
    best = np.take(cells, index.windows[0], axis=0)
    for flat in index.windows[1:]:
        np.maximum(best, np.take(cells, flat, axis=0), out=best)
    best[best == -np.inf] = 0
    out = np.ascontiguousarray(best.transpose(0, 3, 1, 2))

    def backward(g):
        rows = np.nonzero(g.reshape(r, -1).any(axis=1))[0]
        gt = np.ascontiguousarray(g[rows].transpose(0, 2, 3, 1))  # r', oh, ow, C
        target = best[rows]
        pending = np.ones(gt.shape, dtype=bool)
        contribs = np.zeros((len(index.windows),) + gt.shape, dtype=gt.dtype)
        targets = []
        for k, flat in enumerate(index.windows):
            f = flat[rows]
            hit = np.take(cells, f, axis=0) == target
            hit &= pending
            pending ^= hit
            np.copyto(contribs[k], gt, where=hit)
            targets.append(f.ravel())
            if not pending.any():
                break
        contribs = contribs[:len(targets)].reshape(-1, c)
        cols = np.concatenate(targets)
        scatter = sparse.csr_matrix(
            (np.ones(cols.size, dtype=fv.dtype), (cols, np.arange(cols.size))),
            shape=(h * w + 1, cols.size))
        gcells = scatter @ contribs
        return (np.ascontiguousarray(gcells[:-1].T).reshape(c, h, w).astype(fv.dtype),)

    return feature.graph._push(out, (feature,), backward)


def logistic(x: Node) -> Node:
    xv = x.value
    e = np.exp(-np.abs(xv))
    s = np.where(xv >= 0, 1 / (1 + e), e / (1 + e)).astype(xv.dtype)
    return x.graph._push(s, (x,), lambda g: (g * s * (1 - s),))


# ---------------------------------------------------------------------------
# plumbing used by the heads and the loss


def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return x.graph._push(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def gather_rows(x: Node, index) -> Node:
    idx = np.asarray(index, dtype=np.int64)
    xv = x.value

    def backward(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return x.graph._push(xv[idx], (x,), backward)


def column_slice(x: Node, start: int, stop: int) -> Node:
    """``x[:, start:stop]`` of a 2-D node."""
    xv = x.value

    def backward(g):
        gx = np.zeros_like(xv)
        gx[:, start:stop] = g
        return (gx,)

    return x.graph._push(xv[:, start:stop], (x,), backward)


def add(a, b) -> Node:
    graph = a.graph if isinstance(a, Node) else b.graph
    a, b = _as_node(graph, a), _as_node(graph, b)
    if a.value.shape != b.value.shape:
        raise _shape_error("add", a.value.shape, b.value.shape)
    return graph._push(a.value + b.value, (a, b), lambda g: (g, g))


def scale(x: Node, factor) -> Node:
    """Multiply by a constant scalar or a constant array of the same shape."""
    f = np.asarray(factor, dtype=x.value.dtype)
    return x.graph._push(x.value * f, (x,), lambda g: (g * f,))


def subtract_constant(x: Node, target) -> Node:
    t = np.asarray(target, dtype=x.value.dtype)
    return x.graph._push(x.value - t, (x,), lambda g: (g,))


def total(x: Node) -> Node:
    """Sum of all elements as a 1-element tensor."""
    shape = x.value.shape
    return x.graph._push(np.asarray([x.value.sum()], dtype=x.value.dtype), (x,),
                         lambda g: (np.full(shape, g[0], dtype=g.dtype),))


def smooth_l1(x: Node) -> Node:
    """Elementwise ``0.5 x^2`` for ``|x| < 1`` else ``|x| - 0.5``."""
    xv = x.value
    quad = np.abs(xv) < 1
    out = np.where(quad, 0.5 * xv * xv, np.abs(xv) - 0.5).astype(xv.dtype)
    return x.graph._push(out, (x,), lambda g: (g * np.where(quad, xv, np.sign(xv)),))


def binary_log_loss(logits: Node, positive) -> Node:
    """``-log s`` for positives and ``-log(1-s)`` for negatives, ``s = logistic(z)``.

    Evaluated as a softplus of the logit so it stays finite where ``s`` rounds
    to 0 or 1.
    """
    z = logits.value
    sign = np.where(np.asarray(positive, dtype=bool), -1.0, 1.0).astype(z.dtype)
    u = sign * z
    out = (np.maximum(u, 0) + np.log1p(np.exp(-np.abs(u)))).astype(z.dtype)
    e = np.exp(-np.abs(u))
    sig_u = np.where(u >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)
    return logits.graph._push(out, (logits,), lambda g: (g * sign * sig_u,))
