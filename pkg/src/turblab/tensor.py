"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything is float64 numpy under the hood. A `Graph` is an append-only
tape: executing an op while a graph is active records one node holding a
closure that maps the output gradient to input gradients. `backward`
walks the tape once in reverse; a graph can be consumed only once and
there is no higher-order differentiation.

Ops are deliberately limited to what the forecaster architecture needs:
conv2d / conv_transpose2d (with depth-wise and dilated cases), group
normalization, leaky-relu / gelu, softmax, matmul, multi-head
self-attention, layer-scale residuals, and a handful of shape and
reduction helpers.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE_GRAPHS: list["Graph"] = []

# When enabled, every op asserts its output is finite. Costs a pass over
# each result, so tests turn it on and training leaves it off.
_DEBUG_FINITE = False


def set_debug_finite(enabled: bool) -> None:
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class _Node:
    __slots__ = ("parents", "vjp", "leaf")

    def __init__(self, parents, vjp, leaf=None):
        self.parents = parents
        self.vjp = vjp
        self.leaf = leaf


class Tensor:
    """Dense floating array (binary64 by default; binary32 passes
    through untouched), optionally tracked on the active graph."""

    __slots__ = ("data", "requires_grad", "node", "graph", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Optional[int] = None
        self.graph: Optional["Graph"] = None
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.node is not None})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Append-only computation tape; a context manager activates it."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self):
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_GRAPHS.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate gradients for every tracked node reachable from `loss`.

        Returns the node-id -> gradient map; leaf tensors additionally get
        their `.grad` attribute filled. The graph counts as consumed, a
        second call raises.
        """
        if loss.graph is not self or loss.node is None:
            raise GraphError("loss is not a node of this graph")
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward")
        self._consumed = True

        grads = self.gradients
        grads[loss.node] = np.ones_like(loss.data)
        # vjps may hand back arrays aliasing other gradients (identity
        # paths), so only arrays allocated here are mutated in place
        owned: set[int] = set()
        for nid in range(len(self.nodes) - 1, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pid is None or pg is None:
                    continue
                seen = grads.get(pid)
                if seen is None:
                    grads[pid] = pg
                elif pid in owned:
                    seen += pg
                else:
                    grads[pid] = seen + pg
                    owned.add(pid)
        for node in self.nodes:
            if node.leaf is not None and node.leaf.node in grads:
                node.leaf.grad = grads[node.leaf.node]
        return grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Convenience wrapper: run backward on the graph `loss` belongs to."""
    if loss.graph is None:
        raise GraphError("loss was computed outside any active graph")
    return loss.graph.backward(loss)


def _active_graph() -> Optional[Graph]:
    return _ACTIVE_GRAPHS[-1] if _ACTIVE_GRAPHS else None


def _register_leaf(graph: Graph, t: Tensor) -> None:
    if t.graph is not None and t.graph is not graph:
        raise GraphError("tensor already belongs to a different graph")
    if t.node is None and t.requires_grad:
        t.graph = graph
        t.node = len(graph.nodes)
        graph.nodes.append(_Node((), None, leaf=t))


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp_builder) -> Tensor:
    """Wrap `out_data`; if a graph is active and any input is tracked,
    append a node whose vjp comes from `vjp_builder(needs)`."""
    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is None:
        return out
    for t in inputs:
        _register_leaf(graph, t)
    if all(t.node is None for t in inputs):
        return out
    for t in inputs:
        if t.graph is not None and t.graph is not graph:
            raise GraphError("op mixes tensors from different graphs")
    needs = [t.node is not None for t in inputs]
    parents = tuple(t.node for t in inputs)
    out.graph = graph
    out.node = len(graph.nodes)
    graph.nodes.append(_Node(parents, vjp_builder(needs)))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def build(needs):
        def vjp(g):
            return (
                _unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(g, b.data.shape) if needs[1] else None,
            )

        return vjp

    return _record(out, (a, b), build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def build(needs):
        def vjp(g):
            return (
                _unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(-g, b.data.shape) if needs[1] else None,
            )

        return vjp

    return _record(out, (a, b), build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def build(needs):
        def vjp(g):
            return (
                _unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None,
            )

        return vjp

    return _record(out, (a, b), build)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = a.data * c

    def build(needs):
        return lambda g: (g * c,)

    return _record(out, (a,), build)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname} shapes {a.data.shape} vs {b.data.shape}") from None


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def build(needs):
        return lambda g: (g.reshape(old),)

    return _record(out, (a,), build)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def build(needs):
        return lambda g: (g.transpose(inv),)

    return _record(out, (a,), build)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def build(needs):
        def vjp(g):
            pieces = []
            for i, need in enumerate(needs):
                if not need:
                    pieces.append(None)
                    continue
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(bounds[i], bounds[i + 1])
                pieces.append(np.ascontiguousarray(g[tuple(sl)]))
            return tuple(pieces)

        return vjp

    return _record(out, tensors, build)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    out = np.asarray(a.data.sum())

    def build(needs):
        return lambda g: (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), build)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    count = a.data.size
    out = np.asarray(a.data.mean())

    def build(needs):
        return lambda g: (np.broadcast_to(g / count, shape).copy(),)

    return _record(out, (a,), build)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    out = a.data.sum(axis=axis)

    def build(needs):
        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return vjp

    return _record(out, (a,), build)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product, numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims {ad.shape} vs {bd.shape}")
    out = ad @ bd

    def build(needs):
        def vjp(g):
            ga = gb = None
            if needs[0]:
                ga = _unbroadcast_batched(g @ bd.swapaxes(-1, -2), ad.shape)
            if needs[1]:
                gb = _unbroadcast_batched(ad.swapaxes(-1, -2) @ g, bd.shape)
            return ga, gb

        return vjp

    return _record(out, (a, b), build)


def _unbroadcast_batched(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over batch axes that were broadcast in matmul."""
    shape = tuple(shape)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(g.ndim - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# activations and normalization


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    one = xd.dtype.type(1.0)
    factor = np.where(xd >= 0, one, xd.dtype.type(slope))
    out = xd * factor

    def build(needs):
        return lambda g: (g * factor,)

    return _record(out, (x,), build)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    xsq = xd * xd
    t = xsq * xd
    t *= 0.044715
    t += xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = 1.0 + t
    out *= xd
    out *= 0.5

    def build(needs):
        def vjp(g):
            dx = 1.0 - t * t
            dx *= 1.0 + 3 * 0.044715 * xsq
            dx *= _GELU_C * xd
            dx += 1.0 + t
            dx *= 0.5
            dx *= g
            return (dx,)

        return vjp

    return _record(out, (x,), build)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def build(needs):
        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            gx = g - dot
            gx *= out
            return (gx,)

        return vjp

    return _record(out, (x,), build)


def _normalize_groups(xd, num_groups, eps):
    """Shared group_norm forward core: normalized groups, 1/std, group size."""
    B, C, H, W = xd.shape
    xg = xd.reshape(B, num_groups, C // num_groups, H, W)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    xhat_g = xg - mu
    m = xhat_g[0, 0].size
    var = np.einsum("bgchw,bgchw->bg", xhat_g, xhat_g) / m
    inv = (1.0 / np.sqrt(var + eps))[:, :, None, None, None]
    xhat_g *= inv
    return xhat_g, inv, m


def _normalize_groups_vjp(g, gs, xhat_g, inv, m, num_groups):
    """Input gradient of the normalize-plus-affine map, reusing cached stats."""
    B = xhat_g.shape[0]
    C = gs.shape[1]
    ghat = (g * gs).reshape(B, num_groups, C // num_groups, *xhat_g.shape[3:])
    mean_ghat = ghat.mean(axis=(2, 3, 4), keepdims=True)
    mean_gx = (np.einsum("bgchw,bgchw->bg", ghat, xhat_g)
               / m)[:, :, None, None, None]
    gx = ghat
    gx -= mean_ghat
    gx -= xhat_g * mean_gx
    gx *= inv
    return gx


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize per (batch, group) over the group's channels and space.

    Parameters
    ----------
    x : Tensor of shape [B, C, H, W]
    num_groups : groups the C axis; C must be divisible
    gamma, beta : per-channel affine, shape [C]
    eps : added inside the square root
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    B, C, H, W = x.data.shape
    if C % num_groups != 0:
        raise ShapeError(f"channels {C} not divisible by groups {num_groups}")
    xhat_g, inv, m = _normalize_groups(x.data, num_groups, eps)
    xhat = xhat_g.reshape(B, C, H, W)
    gs = gamma.data.reshape(1, C, 1, 1)
    out = xhat * gs + beta.data.reshape(1, C, 1, 1)

    def build(needs):
        def vjp(g):
            gx = ggamma = gbeta = None
            if needs[2]:
                gbeta = g.sum(axis=(0, 2, 3))
            if needs[1]:
                ggamma = np.einsum("bchw,bchw->c", g, xhat)
            if needs[0]:
                gx = _normalize_groups_vjp(g, gs, xhat_g, inv, m,
                                           num_groups).reshape(B, C, H, W)
            return gx, ggamma, gbeta

        return vjp

    return _record(out, (x, gamma, beta), build)


def group_norm_act(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
                   slope: float = 0.01, eps: float = 1e-5) -> Tensor:
    """group_norm followed by leaky_relu, recorded as one node.

    Numerically identical to leaky_relu(group_norm(...), slope); fusing
    saves a graph record and one full-size temporary on the hot path.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    B, C, H, W = x.data.shape
    if C % num_groups != 0:
        raise ShapeError(f"channels {C} not divisible by groups {num_groups}")
    xhat_g, inv, m = _normalize_groups(x.data, num_groups, eps)
    xhat = xhat_g.reshape(B, C, H, W)
    gs = gamma.data.reshape(1, C, 1, 1)
    out = xhat * gs
    out += beta.data.reshape(1, C, 1, 1)
    factor = np.where(out >= 0, out.dtype.type(1.0), out.dtype.type(slope))
    out *= factor

    def build(needs):
        def vjp(g):
            gpre = g * factor
            gx = ggamma = gbeta = None
            if needs[2]:
                gbeta = gpre.sum(axis=(0, 2, 3))
            if needs[1]:
                ggamma = np.einsum("bchw,bchw->c", gpre, xhat)
            if needs[0]:
                gx = _normalize_groups_vjp(gpre, gs, xhat_g, inv, m,
                                           num_groups).reshape(B, C, H, W)
            return gx, ggamma, gbeta

        return vjp

    return _record(out, (x, gamma, beta), build)


def layer_scale_residual(x: Tensor, fx: Tensor, lam: Tensor,
                         axis: Optional[int] = None) -> Tensor:
    """x + lam * fx with lam a per-channel vector.

    The channel axis defaults to 1 for [B,C,H,W] inputs and to the last
    axis for [B,N,d] token layouts.
    """
    x, fx, lam = _as_tensor(x), _as_tensor(fx), _as_tensor(lam)
    if x.data.shape != fx.data.shape:
        raise ShapeError(f"residual shapes {x.data.shape} vs {fx.data.shape}")
    if axis is None:
        axis = 1 if x.data.ndim == 4 else x.data.ndim - 1
    C = x.data.shape[axis]
    if lam.data.shape != (C,):
        raise ShapeError(f"lambda shape {lam.data.shape}, expected ({C},)")
    lshape = [1] * x.data.ndim
    lshape[axis] = C
    lb = lam.data.reshape(lshape)
    out = x.data + lb * fx.data
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def build(needs):
        def vjp(g):
            gx = g if needs[0] else None
            gfx = g * lb if needs[1] else None
            glam = (g * fx.data).sum(axis=reduce_axes) if needs[2] else None
            return gx, gfx, glam

        return vjp

    return _record(out, (x, fx, lam), build)


# ---------------------------------------------------------------------------
# convolutions


def _conv_geometry(size, k, stride, padding, dilation):
    span = dilation * (k - 1) + 1
    out = (size + 2 * padding - span) // stride + 1
    if out <= 0:
        raise ShapeError(f"conv output dim {out} from size {size}, kernel {k}, "
                         f"stride {stride}, padding {padding}")
    return out


def _im2col(xp, kh, kw, stride, dilation, Ho, Wo):
    # xp: padded input [B, C, Hp, Wp] -> cols [B, C, kh, kw, Ho, Wo]
    # Batch-major so the GEMM side reshapes to [B, C*kh*kw, Ho*Wo] for free
    # and every tap copy is a plain row-wise memcpy.
    B, C = xp.shape[0], xp.shape[1]
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xp.dtype)
    for u in range(kh):
        hi = u * dilation
        for v in range(kw):
            wi = v * dilation
            cols[:, :, u, v] = xp[:, :, hi:hi + (Ho - 1) * stride + 1:stride,
                                  wi:wi + (Wo - 1) * stride + 1:stride]
    return cols


def _col2im(cols, B, C, H, W, kh, kw, stride, padding, dilation, Ho, Wo):
    # cols [B, C, kh, kw, Ho, Wo] -> scatter-add back to [B, C, H, W]
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    for u in range(kh):
        hi = u * dilation
        for v in range(kw):
            wi = v * dilation
            xp[:, :, hi:hi + (Ho - 1) * stride + 1:stride,
               wi:wi + (Wo - 1) * stride + 1:stride] += cols[:, :, u, v]
    if padding:
        return np.ascontiguousarray(xp[:, :, padding:padding + H, padding:padding + W])
    return xp


def _pad2d(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1, dilation: int = 1) -> Tensor:
    """2D cross-correlation (no kernel flip).

    Parameters
    ----------
    x : Tensor [B, Cin, H, W]
    w : Tensor [Cout, Cin/groups, kh, kw]
    b : optional Tensor [Cout]
    stride, padding, dilation : ints, symmetric in both spatial dims
    groups : channel groups; groups == Cin is the depth-wise case

    Returns [B, Cout, H', W'] with H' = floor((H + 2p - d*(kh-1) - 1)/stride) + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    B, Cin, H, W = x.data.shape
    Cout, Cin_g, kh, kw = w.data.shape
    if Cin % groups != 0:
        raise ShapeError(f"input channels {Cin} not divisible by groups {groups}")
    if Cin_g != Cin // groups:
        raise ShapeError(f"weight expects {Cin_g} channels per group, input has "
                         f"{Cin // groups} (Cin={Cin}, groups={groups})")
    if Cout % groups != 0:
        raise ShapeError(f"output channels {Cout} not divisible by groups {groups}")
    if b is not None and b.data.shape != (Cout,):
        raise ShapeError(f"bias shape {b.data.shape}, expected ({Cout},)")
    Ho = _conv_geometry(H, kh, stride, padding, dilation)
    Wo = _conv_geometry(W, kw, stride, padding, dilation)

    xp = _pad2d(x.data, padding)
    depthwise = groups == Cin and Cout == Cin and Cin_g == 1
    pointwise = (groups == 1 and kh == 1 and kw == 1 and stride == 1
                 and padding == 0)
    P = Ho * Wo

    if depthwise:
        out = np.zeros((B, Cin, Ho, Wo), dtype=xp.dtype)
        tmp = np.empty_like(out)
        wd = w.data
        for u in range(kh):
            hi = u * dilation
            for v in range(kw):
                wi = v * dilation
                sl = xp[:, :, hi:hi + (Ho - 1) * stride + 1:stride,
                        wi:wi + (Wo - 1) * stride + 1:stride]
                np.multiply(sl, wd[None, :, 0, u, v, None, None], out=tmp)
                out += tmp
        cols = None
    elif pointwise:
        # 1x1 stride-1: the input already is the column matrix.
        cols = xp.reshape(B, Cin, P)
        out = np.matmul(w.data.reshape(Cout, Cin), cols).reshape(B, Cout, Ho, Wo)
    elif groups == 1:
        cols = _im2col(xp, kh, kw, stride, dilation, Ho, Wo).reshape(
            B, Cin * kh * kw, P)
        out = np.matmul(w.data.reshape(Cout, Cin * kh * kw), cols).reshape(
            B, Cout, Ho, Wo)
    else:
        cols = _im2col(xp, kh, kw, stride, dilation, Ho, Wo).reshape(
            B, groups, Cin_g * kh * kw, P)
        wg = w.data.reshape(1, groups, Cout // groups, Cin_g * kh * kw)
        out = np.matmul(wg, cols).reshape(B, Cout, Ho, Wo)
    if b is not None:
        out += b.data[None, :, None, None]

    inputs = (x, w) if b is None else (x, w, b)

    def build(needs):
        def vjp(g):
            g = np.ascontiguousarray(g)
            gx = gw = gb = None
            if b is not None and needs[2]:
                gb = g.sum(axis=(0, 2, 3))
            if depthwise:
                wd = w.data
                tmp = np.empty_like(g)
                if needs[1]:
                    gw = np.zeros_like(wd)
                if needs[0]:
                    gxp = np.zeros_like(xp)
                for u in range(kh):
                    hi = u * dilation
                    for v in range(kw):
                        wi = v * dilation
                        hsl = slice(hi, hi + (Ho - 1) * stride + 1, stride)
                        wsl = slice(wi, wi + (Wo - 1) * stride + 1, stride)
                        if needs[1]:
                            gw[:, 0, u, v] = np.einsum("bchw,bchw->c", g,
                                                       xp[:, :, hsl, wsl])
                        if needs[0]:
                            np.multiply(g, wd[None, :, 0, u, v, None, None],
                                        out=tmp)
                            gxp[:, :, hsl, wsl] += tmp
                if needs[0]:
                    gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
                    gx = np.ascontiguousarray(gx)
            elif groups == 1:
                gmat = g.reshape(B, Cout, P)
                if needs[1]:
                    gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
                    gw = gw.reshape(w.data.shape)
                if needs[0]:
                    if pointwise:
                        gx = np.matmul(w.data.reshape(Cout, Cin).T,
                                       gmat).reshape(B, Cin, H, W)
                    elif (stride == 1 and dilation == 1 and Cout < Cin
                          and kh == kw and kh - 1 - padding >= 0):
                        # full correlation with flipped kernels materializes
                        # Cout*kh*kw columns instead of Cin*kh*kw and needs
                        # no scatter-add, so it wins whenever Cout < Cin
                        wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                        wf = np.ascontiguousarray(wf).reshape(Cin, Cout * kh * kw)
                        gp = _pad2d(g, kh - 1 - padding)
                        gc = _im2col(gp, kh, kw, 1, 1, H, W).reshape(
                            B, Cout * kh * kw, H * W)
                        gx = np.matmul(wf, gc).reshape(B, Cin, H, W)
                    else:
                        gcols = np.matmul(w.data.reshape(Cout, Cin * kh * kw).T,
                                          gmat)
                        gcols = gcols.reshape(B, Cin, kh, kw, Ho, Wo)
                        gx = _col2im(gcols, B, Cin, H, W, kh, kw, stride,
                                     padding, dilation, Ho, Wo)
            else:
                gmat = g.reshape(B, groups, Cout // groups, P)
                if needs[1]:
                    gw = np.einsum("bgop,bgmp->gom", gmat, cols, optimize=True)
                    gw = gw.reshape(w.data.shape)
                if needs[0]:
                    wg = w.data.reshape(1, groups, Cout // groups, Cin_g * kh * kw)
                    gcols = np.matmul(wg.transpose(0, 1, 3, 2), gmat)
                    gcols = gcols.reshape(B, Cin, kh, kw, Ho, Wo)
                    gx = _col2im(gcols, B, Cin, H, W, kh, kw, stride, padding, dilation, Ho, Wo)
            if b is None:
                return gx, gw
            return gx, gw, gb

        return vjp

    return _record(out, inputs, build)


def conv_transpose2d(y: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0,
                     output_padding: Optional[int] = None) -> Tensor:
    """Adjoint of conv2d with the same weight.

    `w` keeps the conv2d layout [Cout, Cin, kh, kw]; the transpose maps a
    [B, Cout, H', W'] input back to [B, Cin, H, W] with

        H = (H' - 1) * stride - 2 * padding + kh + output_padding.

    `output_padding` defaults to stride - 1, which makes a stride-s
    transpose exactly s-uple the spatial dims for odd kernels with
    padding (k-1)/2. Passing it explicitly selects any other valid
    pre-image geometry, e.g. to pair with a conv whose input size was not
    a multiple of the stride. The inner-product identity
    <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> holds whenever the
    geometries match.
    """
    y, w = _as_tensor(y), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    B, C_in, Hi, Wi = y.data.shape
    Cout, Cin, kh, kw = w.data.shape
    if C_in != Cout:
        raise ShapeError(f"input has {C_in} channels, weight expects {Cout}")
    if output_padding is None:
        output_padding = stride - 1
    if not 0 <= output_padding < stride and not (stride == 1 and output_padding == 0):
        raise ShapeError(f"output_padding {output_padding} must lie in [0, stride)")
    H = (Hi - 1) * stride - 2 * padding + kh + output_padding
    W = (Wi - 1) * stride - 2 * padding + kw + output_padding
    if H <= 0 or W <= 0:
        raise ShapeError(f"transpose output dims {H}x{W} not positive")
    if b is not None and b.data.shape != (Cin,):
        raise ShapeError(f"bias shape {b.data.shape}, expected ({Cin},)")

    y3 = y.data.reshape(B, Cout, Hi * Wi)
    cols = np.matmul(w.data.reshape(Cout, Cin * kh * kw).T, y3)
    cols = cols.reshape(B, Cin, kh, kw, Hi, Wi)
    out = _col2im(cols, B, Cin, H, W, kh, kw, stride, padding, 1, Hi, Wi)
    if b is not None:
        out += b.data[None, :, None, None]

    inputs = (y, w) if b is None else (y, w, b)

    def build(needs):
        def vjp(g):
            g = np.ascontiguousarray(g)
            gy = gw = gb = None
            if b is not None and needs[2]:
                gb = g.sum(axis=(0, 2, 3))
            gp = _pad2d(g, padding)
            gcols = None
            if needs[0] or needs[1]:
                gcols = _im2col(gp, kh, kw, stride, 1, Hi, Wi).reshape(
                    B, Cin * kh * kw, Hi * Wi)
            if needs[0]:
                gy = np.matmul(w.data.reshape(Cout, Cin * kh * kw),
                               gcols).reshape(B, Cout, Hi, Wi)
            if needs[1]:
                gw = np.matmul(y3, gcols.transpose(0, 2, 1)).sum(axis=0)
                gw = gw.reshape(w.data.shape)
            if b is None:
                return gy, gw
            return gy, gw, gb

        return vjp

    return _record(out, inputs, build)


# ---------------------------------------------------------------------------
# attention


def multi_head_self_attention(z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                              wo: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product self-attention over tokens.

    Parameters
    ----------
    z : Tensor [B, N, d]
    wq, wk, wv : per-head projections stacked as [N_h, d, d_k]
    wo : per-head output maps stacked as [N_h, d_k, d]
    n_heads : must equal the leading dim of the projection stacks; d_k = d/N_h

    Per head k: alpha_ij = softmax_j(q_i . k_j / sqrt(d_k)); the output is
    the sum over heads of (alpha @ V) mapped through that head's wo.
    """
    z = _as_tensor(z)
    B, N, d = z.data.shape
    if d % n_heads != 0:
        raise ShapeError(f"embed dim {d} not divisible by {n_heads} heads")
    d_k = d // n_heads
    for name, t in (("wq", wq), ("wk", wk), ("wv", wv)):
        if _as_tensor(t).data.shape != (n_heads, d, d_k):
            raise ShapeError(f"{name} shape {_as_tensor(t).data.shape}, "
                             f"expected {(n_heads, d, d_k)}")
    if _as_tensor(wo).data.shape != (n_heads, d_k, d):
        raise ShapeError(f"wo shape {_as_tensor(wo).data.shape}, "
                         f"expected {(n_heads, d_k, d)}")

    zb = reshape(z, (B, 1, N, d))
    q = matmul(zb, reshape(wq, (1, n_heads, d, d_k)))
    k = matmul(zb, reshape(wk, (1, n_heads, d, d_k)))
    v = matmul(zb, reshape(wv, (1, n_heads, d, d_k)))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))
    alpha = softmax(scores, axis=-1)
    mixed = matmul(alpha, v)
    per_head = matmul(mixed, reshape(wo, (1, n_heads, d_k, d)))
    return sum_axis(per_head, axis=1)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               eps: float = 1e-5, max_coords: int = 64,
               rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic gradients of a scalar-valued closure to central
    finite differences.

    Parameters
    ----------
    op_closure : called with one Tensor per entry of `inputs`, must return
        a scalar Tensor
    inputs : float arrays; every one is treated as differentiable
    eps : finite-difference step, must lie in (0, 1e-2]
    max_coords : coordinates sampled per input (all coordinates when the
        input is at most that large)

    Returns the maximum relative error over all sampled coordinates,
    using max(|analytic|, |numeric|, 1e-8) as the denominator.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps {eps} outside (0, 1e-2]")
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]

    with Graph() as g:
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = op_closure(*ts)
        g.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    def eval_loss():
        out = op_closure(*(Tensor(a) for a in arrays))
        return float(out.data)

    worst = 0.0
    for idx, a in enumerate(arrays):
        flat = a.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords,
                                                                 replace=False)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            up = eval_loss()
            flat[c] = keep - eps
            down = eval_loss()
            flat[c] = keep
            numeric = (up - down) / (2 * eps)
            exact = float(analytic[idx].reshape(-1)[c])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst
