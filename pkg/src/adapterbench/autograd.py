"""Dynamic-graph reverse-mode autodiff over dense float64 arrays.

Every value is a :class:`Tensor` of rank at most 3.  Rank-3 tensors are
treated as a batch of independent ``n x d`` sequences, so all row-wise
primitives act on the last axis and all time-wise primitives act on the
second-to-last axis.

Graph nodes keep references to their parents plus a closure that pushes the
upstream gradient back; :func:`backward` walks them in reverse topological
order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
MAX_RANK = 3
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all dispatch to the named primitives below
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=DTYPE))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create a result tensor; the closure is kept only if a parent needs grads."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bw(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), _bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a vector broadcast over every row of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match rows of {x.shape}")

    def _bw(g):
        _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _node(x.data + b.data, (x, b), _bw)


def tile_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat an ``m x d`` matrix into ``batch x m x d``."""
    if x.ndim != 2:
        raise ShapeError(f"tile_batch expects a matrix, got {x.shape}")
    out = np.broadcast_to(x.data, (batch,) + x.shape).copy()

    def _bw(g):
        _accumulate(x, g.sum(axis=0))

    return _node(out, (x,), _bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the mathematical name
    def _bw(g):
        _accumulate(x, np.full(x.shape, float(g), dtype=DTYPE))

    return _node(np.asarray(x.data.sum()), (x,), _bw)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def _bw(g):
        _accumulate(x, np.full(x.shape, float(g) / n, dtype=DTYPE))

    return _node(np.asarray(x.data.mean()), (x,), _bw)


def mean_rows(x: Tensor) -> Tensor:
    """Average over the time axis: ``n x d -> d`` or ``B x n x d -> B x d``."""
    if x.ndim < 2:
        raise ShapeError(f"mean_rows needs rank >= 2, got {x.shape}")
    n = x.shape[-2]

    def _bw(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, -2) / n, x.shape))

    return _node(x.data.mean(axis=-2), (x,), _bw)


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """``sum_l w[l] * xs[l]`` for equally shaped tensors and a weight vector."""
    if w.ndim != 1 or w.shape[0] != len(xs):
        raise ShapeError(f"weighted_sum: {len(xs)} tensors but weights of shape {w.shape}")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeError(f"weighted_sum: shapes {shape} and {x.shape} differ")
    out = np.zeros(shape, dtype=DTYPE)
    for wl, x in zip(w.data, xs):
        out += wl * x.data

    def _bw(g):
        if w.requires_grad:
            _accumulate(w, np.array([np.vdot(g, x.data) for x in xs]))
        for wl, x in zip(w.data, xs):
            _accumulate(x, g * wl)

    return _node(out, (w, *xs), _bw)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; a rank-3 left operand is a batch, the right may be shared.

    A vector left operand is treated as a single row.
    """
    if (a.ndim < 2 and b.ndim != 2) or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: batch mismatch {a.shape} vs {b.shape}")
    shared = b.ndim == 2 and a.ndim != 2
    if shared:
        # one large GEMM instead of a stack of small ones
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def _bw(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, a.shape[-1]).T @ g2)
            return
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(out, (a, b), _bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def _bw(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(x.data, -1, -2).copy(), (x,), _bw)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[B] x n x d -> (B*heads) x n x (d/heads)``; head-major within a batch item."""
    *lead, n, d = x.shape
    if d % heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {heads} heads")
    b = int(np.prod(lead)) if lead else 1
    dh = d // heads
    out = x.data.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(b * heads, n, dh)

    def _bw(g):
        _accumulate(x, g.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(x.shape))

    return _node(out, (x,), _bw)


def merge_heads(x: Tensor, heads: int, batched: bool) -> Tensor:
    """Inverse of :func:`split_heads`."""
    bh, n, dh = x.shape
    b = bh // heads
    out = x.data.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, heads * dh)
    if not batched:
        out = out[0]

    def _bw(g):
        g = g.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(bh, n, dh)
        _accumulate(x, g)

    return _node(out, (x,), _bw)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the time axis."""
    if a.ndim != b.ndim or a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    p = a.shape[-2]

    def _bw(g):
        _accumulate(a, g[..., :p, :])
        _accumulate(b, g[..., p:, :])

    return _node(np.concatenate([a.data, b.data], axis=-2), (a, b), _bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the time axis."""
    n = x.shape[-2]
    if not (0 <= start < stop <= n):
        raise IndexError(f"slice_rows: [{start}, {stop}) out of range for {n} rows")

    def _bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[..., start:stop, :] = g
        _accumulate(x, full)

    return _node(x.data[..., start:stop, :].copy(), (x,), _bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    d = x.shape[-1]
    if not (0 <= start < stop <= d):
        raise IndexError(f"slice_cols: [{start}, {stop}) out of range for width {d}")

    def _bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[..., start:stop] = g
        _accumulate(x, full)

    return _node(x.data[..., start:stop].copy(), (x,), _bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0

    def _bw(g):
        _accumulate(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), _bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _node(x.data * cdf, (x,), _bw)


def identity(x: Tensor) -> Tensor:
    return x


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def _bw(g):
        _accumulate(x, g * out)

    return _node(out, (x,), _bw)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, (x,), _bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def _bw(g):
        p = np.exp(out)
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return _node(out, (x,), _bw)


def layer_norm(x: Tensor, scale: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalisation to zero mean / unit variance, then ``scale * . + bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if scale.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {scale.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + bias.data

    def _bw(g):
        if scale.requires_grad:
            _accumulate(scale, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * scale.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)

    return _node(out, (x, scale, bias), _bw)


def conv1d_temporal(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Strided temporal convolution without bias.

    ``x`` is ``[B] x T x c_in`` and ``kernel`` is ``k x (c_in/groups) x c_out``.
    Output length is ``floor((T + 2*padding - k) / stride) + 1``.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    k, cg_in, c_out = kernel.shape
    c_in = x.shape[-1]
    if c_in % groups or c_out % groups or cg_in != c_in // groups:
        raise ShapeError(
            f"conv1d_temporal: kernel {kernel.shape} incompatible with input {x.shape} "
            f"and groups={groups}")
    t_in = x.shape[-2] + 2 * padding
    if t_in < k:
        raise ValueError(f"input too short: {x.shape[-2]} frames for kernel size {k}")
    n_out = (t_in - k) // stride + 1
    xp = x.data
    if padding:
        pad = [(0, 0)] * (xp.ndim - 2) + [(padding, padding), (0, 0)]
        xp = np.pad(xp, pad)
    cg_out = c_out // groups
    span = stride * (n_out - 1) + 1
    out = np.zeros(x.shape[:-2] + (n_out, c_out), dtype=DTYPE)
    for j in range(k):
        window = xp[..., j:j + span:stride, :]
        for gi in range(groups):
            ic = slice(gi * cg_in, (gi + 1) * cg_in)
            oc = slice(gi * cg_out, (gi + 1) * cg_out)
            out[..., oc] += window[..., ic] @ kernel.data[j, :, oc]

    def _bw(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE) if x.requires_grad else None
        gk = np.zeros(kernel.shape, dtype=DTYPE) if kernel.requires_grad else None
        for j in range(k):
            window = xp[..., j:j + span:stride, :]
            for gi in range(groups):
                ic = slice(gi * cg_in, (gi + 1) * cg_in)
                oc = slice(gi * cg_out, (gi + 1) * cg_out)
                go = g[..., oc]
                if gk is not None:
                    gk[j, :, oc] += (np.swapaxes(window[..., ic], -1, -2) @ go).reshape(
                        -1, cg_in, cg_out).sum(axis=0)
                if gxp is not None:
                    gxp[..., j:j + span:stride, ic] += go @ kernel.data[j, :, oc].T
        if gxp is not None:
            if padding:
                gxp = gxp[..., padding:-padding, :]
            _accumulate(x, gxp)
        if gk is not None:
            _accumulate(kernel, gk)

    return _node(out, (x, kernel), _bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    # interior buffers are per-pass; leaves keep accumulating across passes
    for t in order:
        if t._backward is not None:
            t.grad = None
    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


def no_grad_copy(x: Tensor) -> Tensor:
    """Detached copy: same values, no graph, no grad."""
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# finite-difference verification


def _as_list(x) -> list[Tensor]:
    if isinstance(x, Tensor):
        return [x]
    return list(x)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest coordinate-wise relative error between analytic and central-difference grads.

    ``f`` is called with the tensors of ``x`` as positional arguments and must
    return a scalar.  Tensors that do not require grad (frozen parameters
    included) are left out of the comparison.  The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = _as_list(x)
    checked = [t for t in xs if t.requires_grad]
    for t in checked:
        t.zero_grad()
    loss = f(*xs)
    for t in checked:
        t.zero_grad()
    backward(loss)
    worst = 0.0
    rng = np.random.default_rng(seed)
    for t in checked:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*xs).item()
            flat[i] = orig - step
            fm = f(*xs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for t in checked:
        t.zero_grad()
    return worst
