"""Dense float64 tensors with reverse-mode differentiation.

Small by design: just enough primitives to train and run every network in
this package. Values are plain numpy arrays; each operation records its
inputs and a backward rule on the output, and ``backward`` replays the
graph in reverse topological order. A central-difference gradient checker
(``grad_check``) is the oracle every backward rule is tested against.

Conventions:
  * everything is float64; NaN or Inf anywhere is a hard error
  * no silent broadcasting: elementwise ops require equal shapes, the only
    exceptions are python scalars and explicit ``tile``/``concat``
  * graphs are single-threaded; tensors that do not require gradients are
    immutable in practice and safe to share between threads
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor",
    "affine",
    "conv1d_glu",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "dilated_conv1d",
    "sigmoid",
    "exp",
    "sqrt",
    "absolute",
    "clamp",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "concat_tiled_row",
    "narrow",
    "tile",
    "cumsum",
    "sqdiff",
    "masked_fill",
    "normalize_columns",
    "backward",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _ensure_finite(arr: np.ndarray, what: str) -> None:
    # a NaN/Inf anywhere makes the sum non-finite; cheaper than isfinite().all()
    # and overflow-safe at the value scales this package works with
    if arr.size and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    ``grad`` exists exactly when ``requires_grad`` is set; ``backward``
    adds into it, so repeated backward passes accumulate until the caller
    resets with ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _ensure_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small conveniences; scalars allowed, arrays must match shapes exactly
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents, backward_fn, what: str) -> Tensor:
    """Wrap an op result, recording the backward rule when needed."""
    _ensure_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = record
    out.grad = np.zeros_like(data) if record else None
    out._parents = tuple(parents) if record else ()
    out._backward = backward_fn if record else None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data - s, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul")
    _same_shape(a, b, "mul")

    def bw(g, ad=a.data, bd=b.data):
        return g * bd, g * ad

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data / s, (a,), lambda g: (g / s,), "div")
    _same_shape(a, b, "div")

    def bw(g, ad=a.data, bd=b.data):
        return g / bd, -g * ad / (bd * bd)

    return _make(a.data / b.data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sqdiff(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise squared difference (a - b)**2."""
    _same_shape(a, b, "sqdiff")
    d = a.data - b.data

    def bw(g, d=d):
        return 2.0 * d * g, -2.0 * d * g

    return _make(d * d, (a, b), bw, "sqdiff")


# ---------------------------------------------------------------------------
# linear algebra


def _stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose per-column bits do not depend on column count.

    BLAS picks different kernels (gemv/syrk/edge microkernels) for
    different shapes, which changes the accumulation order along the inner
    dimension and so the last ulp. einsum's non-optimized path accumulates
    strictly in order, making chunked inference reproduce batch results
    bit-exactly; operands are canonicalized and single columns padded
    because einsum itself special-cases matrix-vector shapes. Gradients
    don't need any of this and use BLAS.
    """
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if b.shape[1] == 1:
        wide = np.einsum("mk,kn->mn", a, np.concatenate([b, b], axis=1), optimize=False)
        return np.ascontiguousarray(wide[:, :1])
    return np.einsum("mk,kn->mn", a, b, optimize=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def bw(g, ad=a.data, bd=b.data):
        return g @ bd.T, ad.T @ g

    return _make(_stable_matmul(a.data, b.data), (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bw(g, orig=a.data.shape):
        return (g.reshape(orig),)

    return _make(a.data.reshape(shape).copy(), (a,), bw, "reshape")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused weight @ x + bias with the bias column broadcast over time.

    Same result as matmul/tile/add composed; one graph node instead of
    three, which matters in the training loop.
    """
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("affine expects 2-D input and weight")
    if weight.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"affine: {weight.data.shape} @ {x.data.shape}")
    if bias.data.shape != (weight.data.shape[0], 1):
        raise ShapeError("affine: bias must be (out_channels, 1)")
    if _GRAD_ENABLED:
        out = weight.data @ x.data + bias.data
    else:
        out = _stable_matmul(weight.data, x.data) + bias.data

    def bw(g, wd=weight.data, xd=x.data):
        return wd.T @ g, g @ xd.T, g.sum(axis=1, keepdims=True)

    return _make(out, (x, weight, bias), bw, "affine")


def conv1d_glu(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int,
               residual: bool = False) -> Tensor:
    """Fused causal dilated convolution + gated linear unit (+ skip).

    ``kernel`` is (2*C, C_in, K): the first C output channels pass through,
    gated by the sigmoid of the second C. With ``residual`` the input is
    added to the gated output (shapes must match). One graph node replaces
    the conv/narrow/sigmoid/mul chain.
    """
    if x.data.ndim != 2 or kernel.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeError("conv1d_glu: x must be 2-D, kernel 3-D, bias 1-D")
    c2, c_in, ksize = kernel.data.shape
    if c2 % 2 != 0:
        raise ShapeError("conv1d_glu: kernel must emit an even channel count")
    c = c2 // 2
    if x.data.shape[0] != c_in:
        raise ShapeError(f"conv1d_glu: input channels {x.data.shape[0]} != kernel {c_in}")
    if bias.data.shape[0] != c2:
        raise ShapeError("conv1d_glu: bias length mismatch")
    if residual and c != c_in:
        raise ShapeError("conv1d_glu: residual needs matching channel counts")
    if dilation < 1:
        raise ShapeError("conv1d_glu: dilation must be >= 1")
    t = x.data.shape[1]
    pad = dilation * (ksize - 1)
    xp = np.zeros((c_in, t + pad), dtype=np.float64)
    xp[:, pad:] = x.data
    # im2col: row block j holds the input shifted j*dilation back
    stack = np.empty((ksize * c_in, t), dtype=np.float64)
    for j in range(ksize):
        lo = pad - j * dilation
        stack[j * c_in:(j + 1) * c_in] = xp[:, lo:lo + t]
    w_flat = np.ascontiguousarray(kernel.data.transpose(0, 2, 1).reshape(c2, ksize * c_in))
    if _GRAD_ENABLED:
        u = w_flat @ stack + bias.data[:, None]
    else:
        # inference path: fixed accumulation order keeps chunked and batch
        # evaluation bit-identical
        u = _stable_matmul(w_flat, stack) + bias.data[:, None]
    a = u[:c]
    b = u[c:]
    gate = np.where(b >= 0, 1.0 / (1.0 + np.exp(-np.abs(b))),
                    np.exp(-np.abs(b)) / (1.0 + np.exp(-np.abs(b))))
    out = a * gate
    if residual:
        out = out + x.data

    def bw(g, stack=stack, w_flat=w_flat, a=a, gate=gate, t=t, pad=pad,
           dilation=dilation, ksize=ksize, c_in=c_in, residual=residual):
        gu = np.concatenate([g * gate, g * a * gate * (1.0 - gate)], axis=0)
        gk = (gu @ stack.T).reshape(c2, ksize, c_in).transpose(0, 2, 1).copy()
        gxw = w_flat.T @ gu
        gxp = np.zeros((c_in, t + pad), dtype=np.float64)
        for j in range(ksize):
            lo = pad - j * dilation
            gxp[:, lo:lo + t] += gxw[j * c_in:(j + 1) * c_in]
        gx = gxp[:, pad:]
        if residual:
            gx = gx + g
        return gx, gk, gu.sum(axis=1)

    return _make(out, (x, kernel, bias), bw, "conv1d_glu")


def dilated_conv1d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """1-D dilated convolution over time, causal via zero left-padding.

    ``x`` is (C_in, T), ``kernel`` is (C_out, C_in, K), ``bias`` is (C_out,).
    Output column n sees input columns n, n-d, ..., n-(K-1)d, with columns
    before the sequence start treated as zeros. The kernel taps accumulate
    in a fixed order so chunked evaluation reproduces batch results
    bit-exactly.
    """
    if x.data.ndim != 2 or kernel.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeError("dilated_conv1d: x must be 2-D, kernel 3-D, bias 1-D")
    c_out, c_in, ksize = kernel.data.shape
    if x.data.shape[0] != c_in:
        raise ShapeError(f"dilated_conv1d: input channels {x.data.shape[0]} != kernel {c_in}")
    if bias.data.shape[0] != c_out:
        raise ShapeError("dilated_conv1d: bias length mismatch")
    if dilation < 1:
        raise ShapeError("dilated_conv1d: dilation must be >= 1")
    t = x.data.shape[1]
    pad = dilation * (ksize - 1)
    xp = np.zeros((c_in, t + pad), dtype=np.float64)
    xp[:, pad:] = x.data
    # tap j reads xp[:, pad - j*d : pad - j*d + t], i.e. input shifted j*d
    # back; taps accumulate in fixed order through the order-stable product
    out = np.broadcast_to(bias.data[:, None], (c_out, t)).copy()
    for j in range(ksize):
        lo = pad - j * dilation
        out += _stable_matmul(kernel.data[:, :, j], xp[:, lo:lo + t])

    def bw(g, xp=xp, kd=kernel.data, t=t, pad=pad, dilation=dilation, ksize=ksize):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for j in range(ksize):
            lo = pad - j * dilation
            gk[:, :, j] = g @ xp[:, lo:lo + t].T
            gxp[:, lo:lo + t] += kd[:, :, j].T @ g
        return gxp[:, pad:], gk, g.sum(axis=1)

    return _make(out, (x, kernel, bias), bw, "dilated_conv1d")


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    # stable split form avoids overflow in exp
    d = a.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g, y=y):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), bw, "sigmoid")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(g, y=y):
        return (g * y,)

    return _make(y, (a,), bw, "exp")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def bw(g, y=y):
        return (g / (2.0 * y),)

    return _make(y, (a,), bw, "sqrt")


def absolute(a: Tensor) -> Tensor:
    def bw(g, s=np.sign(a.data)):
        return (g * s,)

    return _make(np.abs(a.data), (a,), bw, "absolute")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError("clamp: lo > hi")

    def bw(g, m=((a.data >= lo) & (a.data <= hi)).astype(np.float64)):
        return (g * m,)

    return _make(np.clip(a.data, lo, hi), (a,), bw, "clamp")


def softmax(a: Tensor, axis: int) -> Tensor:
    d = a.data
    m = d.max(axis=axis, keepdims=True)
    e = np.exp(d - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, y=y, axis=axis):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape surgery


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, shape=a.data.shape, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y, dtype=np.float64), (a,), bw, "reduce_sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g, offsets=offsets, axis=axis):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(offsets) - 1):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(np.concatenate(datas, axis=axis), tensors, bw, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.data.shape}"
        )
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g, shape=a.data.shape, sl=sl):
        out = np.zeros(shape, dtype=np.float64)
        out[sl] = g
        return (out,)

    return _make(a.data[sl].copy(), (a,), bw, "narrow")


def tile(a: Tensor, axis: int, reps: int) -> Tensor:
    """Repeat a size-1 axis; the explicit stand-in for broadcasting."""
    if a.data.shape[axis] != 1:
        raise ShapeError(f"tile: axis {axis} of {a.data.shape} must have size 1")

    def bw(g, axis=axis):
        return (g.sum(axis=axis, keepdims=True),)

    return _make(np.repeat(a.data, reps, axis=axis), (a,), bw, "tile")


def concat_tiled_row(x: Tensor, table: Tensor, row: int) -> Tensor:
    """Append one row of ``table``, repeated over time, below ``x``.

    Fuses the narrow/transpose/tile/concat chain used for class
    conditioning into a single graph node.
    """
    if x.data.ndim != 2 or table.data.ndim != 2:
        raise ShapeError("concat_tiled_row expects 2-D tensors")
    if not 0 <= row < table.data.shape[0]:
        raise ShapeError(f"row {row} out of range for table {table.data.shape}")
    t = x.data.shape[1]
    block = np.repeat(table.data[row][:, None], t, axis=1)

    def bw(g, c=x.data.shape[0], shape=table.data.shape, row=row):
        gt = np.zeros(shape, dtype=np.float64)
        gt[row] = g[c:].sum(axis=1)
        return g[:c], gt

    return _make(np.concatenate([x.data, block], axis=0), (x, table), bw, "concat_tiled_row")


def cumsum(a: Tensor, axis: int) -> Tensor:
    def bw(g, axis=axis):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), bw, "cumsum")


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Where ``keep`` is False, replace entries with ``value`` (no gradient)."""
    if keep.shape != a.data.shape:
        raise ShapeError(f"masked_fill: mask {keep.shape} vs data {a.data.shape}")
    keep = keep.astype(bool)

    def bw(g, keep=keep):
        return (g * keep,)

    return _make(np.where(keep, a.data, value), (a,), bw, "masked_fill")


def normalize_columns(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each column of a nonnegative matrix to sum to 1.

    Columns whose sum falls below ``eps`` (everything underflowed) become
    uniform 1/N and carry no gradient; this keeps early training alive when
    an attention column lands far from every Gaussian center.
    """
    if a.data.ndim != 2:
        raise ShapeError("normalize_columns expects a 2-D tensor")
    n = a.data.shape[0]
    s = a.data.sum(axis=0, keepdims=True)
    dead = s < eps
    safe = np.where(dead, 1.0, s)
    y = np.where(dead, 1.0 / n, a.data / safe)

    def bw(g, y=y, safe=safe, dead=dead):
        gx = (g - (g * y).sum(axis=0, keepdims=True)) / safe
        return (np.where(dead, 0.0, gx),)

    return _make(y, (a,), bw, "normalize_columns")


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor):
    order = []
    seen = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor in the graph.

    ``loss`` must be scalar. Each call computes a fresh gradient of this
    loss and adds it to existing accumulators.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; no graph to differentiate")
    order = _toposort(loss)
    flow = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        _ensure_finite(g, "gradient")
        node.grad += g
        if node._backward is None:
            continue
        grads = node._backward(g)
        for parent, gp in zip(node._parents, grads):
            if gp is None or not parent.requires_grad:
                continue
            if gp.shape != parent.data.shape:
                raise ShapeError(
                    f"backward rule produced shape {gp.shape} for parent {parent.data.shape}"
                )
            acc = flow.get(id(parent))
            if acc is None:
                flow[id(parent)] = gp.astype(np.float64, copy=True)
            else:
                acc += gp


def grad_check(f, params, step: float = 1e-4) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed
    from ``params``; it must be deterministic (freeze any noise before
    building the closure). Returns the worst relative error
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`` over every
    entry of every parameter.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("grad_check: all params must require grad")
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError("grad_check: f returned non-finite value")
                numeric = (fp - fm) / (2.0 * step)
                err = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
                if err > worst:
                    worst = float(err)
    for p in params:
        p.zero_grad()
    return worst
