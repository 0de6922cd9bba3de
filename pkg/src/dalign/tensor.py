"""Dense tensors with reverse-mode automatic differentiation.

Every op is a plain function taking and returning :class:`Tensor`. Each op
records its parents and a closure mapping the output gradient to one
gradient per parent; :func:`backward` walks the graph in reverse
topological order and accumulates into ``.grad`` of leaf tensors.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "sigmoid",
    "relu",
    "exp",
    "log_sigmoid",
    "abs",
    "softmax",
    "layer_norm",
    "dropout",
    "conv2d",
    "resize_bilinear",
    "bilinear_sample",
    "deform_sample",
    "segment_max",
    "scatter_rows",
    "DIFFERENTIABLE_OPS",
]

# Names checked by the gradcheck coverage test; keep in sync with the ops below.
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "sigmoid",
    "relu",
    "exp",
    "log_sigmoid",
    "abs",
    "softmax",
    "layer_norm",
    "dropout",
    "conv2d",
    "resize_bilinear",
    "bilinear_sample",
    "deform_sample",
    "segment_max",
    "scatter_rows",
)

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = _contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, double: bool = False) -> Tensor:
    """Create a leaf tensor; ``double`` selects float64 storage."""
    return Tensor(data, requires_grad, np.float64 if double else np.float32)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _contiguous(a) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d results to shape (1,)
    a = np.asarray(a)
    return a if a.flags.c_contiguous else a.copy(order="C")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(data)
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor reachable from ``loss``.

    Gradients accumulate, so parameters can collect contributions from
    several losses before an optimizer step.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            if state.get(key) == 2:
                continue
            state[key] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if not parent.requires_grad:
                continue
            pstate = state.get(id(parent))
            if pstate == 1:
                raise RuntimeError("graph cycle detected during backward")
            if pstate is None:
                stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` over the last axis; ``weight`` is (D_out, D_in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(*lead, weight.shape[0]), parents, bw, "linear")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size / np.asarray(out).size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (the channel axis for ``[C, H, W]`` maps)."""
    if not tensors:
        raise ValueError("concat: empty input")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ValueError(f"concat: shape mismatch {t.shape} vs {ref} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def getitem(x: Tensor, key) -> Tensor:
    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)

    return _result(np.array(x.data[key]), (x,), bw, "getitem")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable ``log(sigmoid(x))``."""
    v = x.data
    y = np.minimum(v, 0) - np.log1p(np.exp(-np.abs(v)))
    return _result(y.astype(v.dtype), (x,), lambda g: (g * _sigmoid(-v),), "log_sigmoid")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    s = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over ``axis`` then apply an affine map.

    ``gain`` and ``shift`` must broadcast against ``x`` (e.g. ``(D,)`` for the
    last axis, ``(C, 1, 1)`` for the channel axis of a map).
    """
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, shift.shape)

    return _result(out.astype(x.dtype), (x, gain, shift), bw, "layer_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------------------
# spatial ops on [C, H, W] maps


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded "same" cross-correlation of a ``[C_in, H, W]`` map.

    With ``stride > 1`` the output is ``ceil(H / stride)`` by ``ceil(W / stride)``.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected [C,H,W] input and [O,C,k,k] kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    k = kh
    pad = k // 2
    _, h, w = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    if k == 1 and stride == 1:
        cols = x.data.reshape(c_in, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, ho * wo)
    kmat = kernel.data.reshape(c_out, -1)
    out = kmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = kmat.T @ g2
            if k == 1 and stride == 1:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(c_in, k, k, ho, wo)
                dxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
                for a in range(k):
                    for b in range(k):
                        dxp[:, a : a + stride * ho : stride, b : b + stride * wo : stride] += dcols[:, a, b]
                gx = dxp[:, pad : pad + h, pad : pad + w]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1)

    return _result(out.reshape(c_out, ho, wo), parents, bw, "conv2d")


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centers, source index clamped at the low border
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of a ``[C, H, W]`` map without corner alignment."""
    h2, w2 = size
    if h2 < 1 or w2 < 1:
        raise ValueError(f"resize_bilinear: invalid target size {size}")
    _, h, w = x.shape
    if (h2, w2) == (h, w):
        return x
    rh = _resize_matrix(h, h2, x.dtype)
    rw = _resize_matrix(w, w2, x.dtype)
    out = np.einsum("ph,chw,qw->cpq", rh, x.data, rw, optimize=True)

    def bw(g):
        return (np.einsum("ph,cpq,qw->chw", rh, g, rw, optimize=True),)

    return _result(out, (x,), bw, "resize_bilinear")


def _corner_terms(x: np.ndarray, y: np.ndarray, h: int, w: int):
    """Yield ``(flat_index, valid, weight, dweight_dx, dweight_dy)`` per corner."""
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            sx = 1.0 if dx else -1.0
            sy = 1.0 if dy else -1.0
            yield idx, valid, wx * wy * valid, sx * wy * valid, sy * wx * valid


def bilinear_sample(x: Tensor, points) -> Tensor:
    """Sample a ``[C, H, W]`` map at ``P`` continuous ``(x, y)`` points.

    Cell ``(row, col)`` sits at coordinate ``(col, row)``; corners outside the
    map contribute zero. Returns ``[C, P]``. ``points`` may be a Tensor, in
    which case gradients flow to the coordinates too.
    """
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=x.dtype))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"bilinear_sample: points must be (P, 2), got {pts.shape}")
    c, h, w = x.shape
    flat = x.data.reshape(c, h * w)
    px, py = pts.data[:, 0], pts.data[:, 1]
    terms = list(_corner_terms(px, py, h, w))
    out = np.zeros((c, pts.shape[0]), dtype=x.dtype)
    for idx, _, wt, _, _ in terms:
        out += flat[:, idx] * wt
    out = out.astype(x.dtype)

    def bw(g):
        gx = np.zeros_like(flat) if x.requires_grad else None
        gp = np.zeros_like(pts.data) if pts.requires_grad else None
        for idx, _, wt, dwx, dwy in terms:
            if gx is not None:
                for ch in range(c):
                    gx[ch] += np.bincount(idx, weights=g[ch] * wt, minlength=h * w)
            if gp is not None:
                vg = (flat[:, idx] * g).sum(axis=0)
                gp[:, 0] += vg * dwx
                gp[:, 1] += vg * dwy
        return (None if gx is None else gx.reshape(x.shape)), gp

    return _result(out, (x, pts), bw, "bilinear_sample")


def deform_sample(
    values: Sequence[Tensor],
    shapes: Sequence[tuple[int, int]],
    locations: Tensor,
    weights: Tensor,
) -> Tensor:
    """Fused multi-scale, multi-head weighted bilinear sampling.

    ``values[i]`` is ``[H_i * W_i, heads, d]`` (row-major positions) for scale
    ``i`` with spatial size ``shapes[i]``. ``locations`` is
    ``[Q, heads, S, J, 2]`` holding ``(x, y)`` in scale-``i`` cell coordinates
    and ``weights`` is ``[Q, heads, S, J]``. Returns ``[Q, heads, d]`` where
    each entry is ``sum_{i,j} weights * sample(values[i], locations)``; the
    sampling contract is that of :func:`bilinear_sample`.
    """
    n_scales = len(values)
    q, heads, s_loc, j_pts, two = locations.shape
    if s_loc != n_scales or two != 2 or weights.shape != (q, heads, s_loc, j_pts):
        raise ValueError(
            f"deform_sample: locations {locations.shape} / weights {weights.shape} "
            f"do not match {n_scales} scales"
        )
    d = values[0].shape[2]
    dtype = values[0].dtype
    head_ix = np.arange(heads)[None, :, None]
    out = np.zeros((q, heads, d), dtype=dtype)
    cache = []
    for i, (v, (h, w)) in enumerate(zip(values, shapes)):
        if v.shape != (h * w, heads, d):
            raise ValueError(f"deform_sample: value {i} has shape {v.shape}, expected {(h * w, heads, d)}")
        flat = v.data.reshape(h * w * heads, d)
        lx = locations.data[:, :, i, :, 0]
        ly = locations.data[:, :, i, :, 1]
        corners = []
        acc = np.zeros((q, heads, j_pts, d), dtype=dtype)
        for idx, _, wt, dwx, dwy in _corner_terms(lx, ly, h, w):
            fidx = idx * heads + head_ix
            vals = np.take(flat, fidx, axis=0)
            acc += vals * wt[..., None]
            corners.append((fidx, wt, dwx, dwy, vals))
        cache.append((acc, corners))
        out += np.einsum("qhj,qhjd->qhd", weights.data[:, :, i], acc)

    def bw(g):
        gvals = []
        gloc = np.zeros_like(locations.data) if locations.requires_grad else None
        gw = np.zeros_like(weights.data) if weights.requires_grad else None
        for i, (v, (h, w)) in enumerate(zip(values, shapes)):
            acc, corners = cache[i]
            if gw is not None:
                gw[:, :, i] = np.einsum("qhd,qhjd->qhj", g, acc)
            dsample = weights.data[:, :, i][..., None] * g[:, :, None, :]  # [Q, heads, J, d]
            if v.requires_grad:
                idx_all = np.concatenate([c[0].ravel() for c in corners])
                contrib = np.concatenate([(dsample * c[1][..., None]).reshape(-1, d) for c in corners])
                gv = np.empty((h * w * heads, d), dtype=dtype)
                for ch in range(d):
                    gv[:, ch] = np.bincount(idx_all, weights=contrib[:, ch], minlength=h * w * heads)
                gvals.append(gv.reshape(v.shape))
            else:
                gvals.append(None)
            if gloc is not None:
                for _, _, dwx, dwy, vals in corners:
                    vg = np.einsum("qhjd,qhjd->qhj", vals, dsample)
                    gloc[:, :, i, :, 0] += vg * dwx
                    gloc[:, :, i, :, 1] += vg * dwy
        return (*gvals, gloc, gw)

    return _result(out, (*values, locations, weights), bw, "deform_sample")


# ---------------------------------------------------------------------------
# pillar pooling


def segment_max(x: Tensor, starts: np.ndarray) -> Tensor:
    """Row-wise max over contiguous segments of ``x`` (``[P, D]``).

    ``starts`` holds the first row of each segment in increasing order; ties
    route the gradient to the first maximal row.
    """
    starts = np.asarray(starts, dtype=np.int64)
    n_rows, dim = x.shape
    out = np.maximum.reduceat(x.data, starts, axis=0)
    seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, n_rows)))
    hit = x.data == out[seg]
    rows = np.where(hit, np.arange(n_rows)[:, None], n_rows)
    winner = np.minimum.reduceat(rows, starts, axis=0)
    cols = np.broadcast_to(np.arange(dim), winner.shape)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[winner, cols] = g
        return (gx,)

    return _result(out, (x,), bw, "segment_max")


def scatter_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Place row ``k`` of ``x`` at row ``index[k]`` of a zero ``[n_rows, D]`` array.

    ``index`` entries must be unique.
    """
    index = np.asarray(index, dtype=np.int64)
    if len(np.unique(index)) != len(index):
        raise ValueError("scatter_rows: duplicate target rows")
    out = np.zeros((n_rows, x.shape[1]), dtype=x.dtype)
    out[index] = x.data
    return _result(out, (x,), lambda g: (g[index],), "scatter_rows")
