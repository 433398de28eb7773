"""Dense tensors with tape-based reverse-mode automatic differentiation.

Eager NumPy execution; when a :class:`Tape` is active on the current thread,
every differentiable op appends a node with the closures needed for the
backward pass. Tensors are immutable after creation and safe to share across
threads; a tape itself is confined to the thread that opened it.

Float32 is the working precision; pass ``dtype=np.float64`` (or cast
parameters) when running gradient checks.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from mango.backend import ScatterPlan

DEFAULT_DTYPE = np.float32

_STATE = threading.local()

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Assert that every op output is finite (slow; for debugging only)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """A dense array plus autodiff bookkeeping.

    ``node`` is the handle of the op that produced this tensor on the tape it
    was recorded on (None for constants and for tensors created outside any
    tape). ``requires_grad`` marks leaf parameters; their ``grad`` is filled
    by :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            # plain python data defaults to the working precision
            if arr.dtype == np.float64 or arr.dtype.kind in "iu":
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __neg__(self):
        return neg(self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis=axis, mode="sum", keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis=axis, mode="mean", keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis=axis, mode="max", keepdims=keepdims)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


class _Node:
    __slots__ = ("parents", "backward_fn", "leaf", "out_size")

    def __init__(self, parents, backward_fn, leaf, out_size):
        self.parents = parents
        self.backward_fn = backward_fn
        self.leaf = leaf
        self.out_size = out_size


class Tape:
    """Ordered record of ops; appending eagerly keeps it topologically sorted."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_STATE, "tapes", None)
        if stack is None:
            stack = _STATE.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.tapes.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def activation_scalars(self) -> int:
        """Total scalars produced by recorded ops; a memory-use proxy."""
        return sum(n.out_size for n in self._nodes)

    def _track(self, t: Tensor) -> int:
        """Node id of ``t`` on this tape; registers leaves, -1 for constants."""
        if t._tape is self and t.node is not None:
            return t.node
        if t.requires_grad:
            nid = len(self._nodes)
            self._nodes.append(_Node((), None, t, 0))
            t.node = nid
            t._tape = self
            return nid
        return -1

    def _record(self, out: Tensor, parents: tuple, backward_fn) -> None:
        out.node = len(self._nodes)
        out._tape = self
        self._nodes.append(_Node(parents, backward_fn, None, out.data.size))

    def backward(self, loss: Tensor, free: bool = True) -> None:
        """Accumulate d(loss)/d(leaf) into each leaf's ``grad``.

        Walks the record in reverse, visiting each node exactly once. The
        node list is released afterwards unless ``free=False``.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node is None:
            raise ValueError("loss was not recorded on this tape")
        nodes = self._nodes
        grads: list = [None] * len(nodes)
        grads[loss.node] = np.ones_like(loss.data)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            grads[i] = None
            if g is None:
                continue
            node = nodes[i]
            if node.leaf is not None:
                leaf = node.leaf
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
                continue
            for pid, pg in zip(node.parents, node.backward_fn(g)):
                if pid < 0 or pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        if free:
            self._nodes = []


def active_tape() -> Tape | None:
    stack = getattr(_STATE, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Run reverse mode through the tape that recorded ``loss``."""
    if loss._tape is None:
        raise ValueError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def _finish(out_data: np.ndarray, parents: Sequence[Tensor], make_backward) -> Tensor:
    """Wrap an op result, recording it when a tape is active and any parent
    is tracked. ``make_backward(ids)`` builds the backward closure lazily so
    untracked forwards pay no closure cost."""
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    ids = tuple(tape._track(p) for p in parents)
    if all(i < 0 for i in ids):
        return out
    tape._record(out, ids, make_backward(ids))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def make(ids):
        def bw(g):
            return (
                _unbroadcast(g, ash) if ids[0] >= 0 else None,
                _unbroadcast(g, bsh) if ids[1] >= 0 else None,
            )
        return bw

    return _finish(out, (a, b), make)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def make(ids):
        def bw(g):
            return (
                _unbroadcast(g, ash) if ids[0] >= 0 else None,
                _unbroadcast(-g, bsh) if ids[1] >= 0 else None,
            )
        return bw

    return _finish(out, (a, b), make)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def make(ids):
        def bw(g):
            return (
                _unbroadcast(g * bd, ad.shape) if ids[0] >= 0 else None,
                _unbroadcast(g * ad, bd.shape) if ids[1] >= 0 else None,
            )
        return bw

    return _finish(out, (a, b), make)


def neg(a: Tensor) -> Tensor:
    return _finish(a.data * -1, (a,), lambda ids: lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def make(ids):
        def bw(g):
            ga = g @ bd.T if ids[0] >= 0 else None
            gb = ad.T @ g if ids[1] >= 0 else None
            return ga, gb
        return bw

    return _finish(out, (a, b), make)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data >= 0
    out = np.where(mask, x.data, x.data * x.data.dtype.type(slope))

    def make(ids):
        s = x.data.dtype.type(slope)

        def bw(g):
            return (np.where(mask, g, g * s),)
        return bw

    return _finish(out, (x,), make)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def make(ids):
        def bw(g):
            dxhat = g * gd
            gx = None
            if ids[0] >= 0:
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                gx = inv * (dxhat - m1 - xhat * m2)
            lead = tuple(range(g.ndim - 1))
            ggain = (g * xhat).sum(axis=lead) if ids[1] >= 0 else None
            gbias = g.sum(axis=lead) if ids[2] >= 0 else None
            return gx, ggain, gbias
        return bw

    return _finish(out, (x, gain, bias), make)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def make(ids):
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            pieces = []
            for k, nid in enumerate(ids):
                if nid < 0:
                    pieces.append(None)
                    continue
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[k], offsets[k + 1])
                pieces.append(np.ascontiguousarray(g[tuple(sl)]))
            return tuple(pieces)
        return bw

    return _finish(out, tuple(tensors), make)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _finish(
        x.data.reshape(shape), (x,),
        lambda ids: lambda g: (g.reshape(old),),
    )


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)

    def make(ids):
        def bw(g):
            return (np.ascontiguousarray(np.transpose(g, inverse)),)
        return bw

    return _finish(out, (x,), make)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    orig = x.data.shape
    return _finish(out, (x,), lambda ids: lambda g: (_unbroadcast(g, orig),))


def narrow(x: Tensor, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; each output element maps to one
    input element, so the backward is a plain scatter assignment."""
    out = x.data[key]
    if out.ndim == 0:
        out = out.reshape(())
    shape = x.data.shape

    def make(ids):
        def bw(g):
            gx = np.zeros(shape, dtype=g.dtype)
            gx[key] = g
            return (gx,)
        return bw

    return _finish(np.ascontiguousarray(out), (x,), make)


def reduce(x: Tensor, axis=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    """Reduction along ``axis`` (int, tuple, or None for all axes).

    ``max`` routes its gradient to the first maximal element along the axis.
    """
    xd = x.data
    if axis is not None and np.size(axis) == 0:
        raise ValueError("empty reduction axis")
    if mode == "sum":
        out = xd.sum(axis=axis, keepdims=keepdims)
    elif mode == "mean":
        out = xd.mean(axis=axis, keepdims=keepdims)
    elif mode == "max":
        if xd.size == 0:
            raise ValueError("max reduction of empty tensor")
        out = xd.max(axis=axis, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction mode {mode!r}")

    def make(ids):
        if mode in ("sum", "mean"):
            count = xd.size if axis is None else np.prod(
                [xd.shape[a] for a in np.atleast_1d(axis)])

            def bw(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                gx = np.broadcast_to(g, xd.shape)
                if mode == "mean":
                    gx = gx / xd.dtype.type(count)
                return (np.ascontiguousarray(gx),)
            return bw

        if axis is None:
            flat_idx = int(np.argmax(xd))

            def bw(g):
                gx = np.zeros_like(xd)
                gx.flat[flat_idx] = g
                return (gx,)
            return bw

        if isinstance(axis, (tuple, list)):
            raise ValueError("max reduction supports a single axis")
        arg = np.argmax(xd, axis=axis)  # first maximal index on ties

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            gx = np.zeros_like(xd)
            np.put_along_axis(gx, np.expand_dims(arg, axis), g, axis)
            return (gx,)
        return bw

    return _finish(out, (x,), make)


# ---------------------------------------------------------------------------
# graph ops: gather and segment reductions over a precomputed ScatterPlan


def gather_rows(x: Tensor, plan: ScatterPlan) -> Tensor:
    """Select rows along axis -2 by ``plan.index``; scatter-adds on backward."""
    out = np.ascontiguousarray(x.data[..., plan.index, :])

    def make(ids):
        def bw(g):
            return (plan.scatter_sum(g),)
        return bw

    return _finish(out, (x,), make)


def segment_sum(x: Tensor, plan: ScatterPlan) -> Tensor:
    out = plan.scatter_sum(x.data)

    def make(ids):
        def bw(g):
            return (np.ascontiguousarray(g[..., plan.index, :]),)
        return bw

    return _finish(out, (x,), make)


def segment_mean(x: Tensor, plan: ScatterPlan) -> Tensor:
    """Mean of rows per segment; empty segments yield zero rows."""
    out = plan.scatter_mean(x.data)

    def make(ids):
        def bw(g):
            scaled = g / plan._safe_counts.astype(g.dtype)[:, None]
            return (np.ascontiguousarray(scaled[..., plan.index, :]),)
        return bw

    return _finish(out, (x,), make)


def segment_max(x: Tensor, plan: ScatterPlan) -> Tensor:
    """Per-segment elementwise max; empty segments yield zero rows and the
    gradient routes to the first maximal row of each segment."""
    ordered = np.ascontiguousarray(x.data[..., plan.order, :])
    shape = x.data.shape[:-2] + (plan.num_segments, x.data.shape[-1])
    out = np.zeros(shape, dtype=x.dtype)
    argrows = np.zeros(shape, dtype=np.int64)
    for s in range(plan.num_segments):
        lo, hi = plan.splits[s], plan.splits[s + 1]
        if lo == hi:
            continue
        seg = ordered[..., lo:hi, :]
        arg = seg.argmax(axis=-2)
        out[..., s, :] = np.take_along_axis(seg, arg[..., None, :], axis=-2)[..., 0, :]
        argrows[..., s, :] = plan.order[lo + arg]

    def make(ids):
        def bw(g):
            gx = np.zeros_like(x.data)
            flat_g = g.reshape(-1, *g.shape[-2:])
            flat_gx = gx.reshape(-1, *gx.shape[-2:])
            flat_arg = argrows.reshape(-1, *argrows.shape[-2:])
            counts = plan.counts
            for b in range(flat_g.shape[0]):
                for s in range(plan.num_segments):
                    if counts[s]:
                        rows = flat_arg[b, s]
                        for k in range(rows.shape[0]):
                            flat_gx[b, rows[k], k] += flat_g[b, s, k]
            return (gx,)
        return bw

    return _finish(out, (x,), make)


# ---------------------------------------------------------------------------
# temporal convolution


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation over the last axis with zero 'same' padding.

    ``x`` is [C_in, T] or [N, C_in, T]; ``w`` is [C_out, C_in, K] with K odd.
    The length axis is preserved, which the decoder's residual connection
    relies on.
    """
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    n, c_in, t = xd.shape
    c_out, c_in_w, k = wd.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got {k}")
    if c_in_w != c_in:
        raise ValueError(f"conv1d channel mismatch: input {c_in}, weight {c_in_w}")
    pad = (k - 1) // 2
    xp = np.zeros((n, c_in, t + 2 * pad), dtype=xd.dtype)
    xp[:, :, pad:pad + t] = xd
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # [N,C_in,T,K]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(n * t, c_in * k)
    wmat = wd.reshape(c_out, c_in * k).T
    out = (cols @ wmat).reshape(n, t, c_out).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[:, None]
    if squeeze:
        out = out[0]

    def make(ids):
        def bw(g):
            gd = g[None] if squeeze else g
            gmat = np.ascontiguousarray(gd.transpose(0, 2, 1)).reshape(n * t, c_out)
            gw = None
            if ids[1] >= 0:
                gw = (cols.T @ gmat).reshape(c_in, k, c_out).transpose(2, 0, 1)
                gw = np.ascontiguousarray(gw)
            gx = None
            if ids[0] >= 0:
                gp = np.zeros((n, c_out, t + 2 * (k - 1)), dtype=gd.dtype)
                gp[:, :, k - 1:k - 1 + t] = gd
                gwin = np.lib.stride_tricks.sliding_window_view(gp, k, axis=2)
                gcols = np.ascontiguousarray(
                    gwin.transpose(0, 2, 1, 3)).reshape(n * (t + 2 * pad), c_out * k)
                wflip = wd[:, :, ::-1].transpose(1, 0, 2).reshape(c_in, c_out * k)
                gxp = (gcols @ wflip.T).reshape(n, t + 2 * pad, c_in).transpose(0, 2, 1)
                gx = np.ascontiguousarray(gxp[:, :, pad:pad + t])
                if squeeze:
                    gx = gx[0]
            gb = None
            if bias is not None and ids[2] >= 0:
                gb = gd.sum(axis=(0, 2))
            return (gx, gw, gb) if bias is not None else (gx, gw)
        return bw

    parents = (x, w) if bias is None else (x, w, bias)
    return _finish(out, parents, make)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic closure evaluating to a scalar loss from
    ``params``. The finite-difference probe perturbs parameters in place and
    evaluates ``f`` outside any tape. Relative error uses a small floor in
    the denominator so near-zero gradient pairs compare absolutely.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(ga.reshape(-1)[i])
            denom = max(abs(a), abs(fd), 1e-6)
            worst = max(worst, abs(a - fd) / denom)
    return worst
