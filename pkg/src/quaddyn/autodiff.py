"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the innermost active :class:`Tape`.  Outside a
tape context nothing is recorded, which is how inference runs::

    with Tape() as tape:
        loss = mean(squared_difference(matmul(x, w), y))
    grads = tape.backward(loss)        # {w: ndarray}

There is no implicit broadcasting.  The only exception is a Python scalar
operand in ``add``/``sub``/``multiply``; per-feature vectors are combined
with :func:`add_bias` and friends, which say what they broadcast.
"""

from __future__ import annotations

import threading
import weakref
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are not conformable for an op."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """An n-d array of float64 plus a ``requires_grad`` flag.

    Ops never modify their operands.  Parameters are the one exception:
    optimizers replace ``data`` of leaf tensors between steps.
    """

    __slots__ = ("data", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would turn 0-d scalars into shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Append-only record of the ops applied to grad-requiring tensors.

    Nodes are appended as ops execute, so parents always precede children
    and reversing the list is a valid backward order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, vjp):
        # weak link back to the tape: no tensor <-> tape cycle, so a
        # finished iteration's graph is freed immediately
        out._node = (weakref.ref(self), len(self.nodes))
        self.nodes.append(_Node(out, parents, vjp))

    def backward(self, loss, params=None):
        """Gradients of scalar ``loss`` with respect to leaf tensors.

        Returns a dict keyed by tensor.  Every requires-grad leaf reached
        from ``loss`` appears; tensors listed in ``params`` that the loss does
        not depend on map to zeros.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be scalar")
        grads = {}
        leaves = {}
        if loss.requires_grad:
            if loss._node is None:
                leaves[id(loss)] = loss
            elif loss._node[0]() is not self:
                raise ValueError("backward: loss was not recorded on this tape")
            grads[id(loss)] = np.ones(loss.shape)
            for node in reversed(self.nodes[: loss._node[1] + 1] if loss._node else []):
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                parent_grads = node.vjp(g)
                for parent, pg in zip(node.parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if parent._node is None or parent._node[0]() is not self:
                        leaves[key] = parent
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        out = {t: grads[key] for key, t in leaves.items() if key in grads}
        if params is not None:
            for p in params:
                if p not in out:
                    out[p] = np.zeros(p.shape)
        return out


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _result(data, parents, vjp):
    tape = active_tape()
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out = Tensor(data, requires_grad=True)
                tape.record(out, parents, vjp)
                return out
    return Tensor(data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast_scalar(g, shape):
    if shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_same(op, a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast_scalar(g, sa), _unbroadcast_scalar(g, sb)),
    )


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = _as_tensor(a)
    _check_same("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast_scalar(g, sa), _unbroadcast_scalar(-g, sb)),
    )


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def multiply(a, b):
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return multiply(b, a)
    _check_same("multiply", a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast_scalar(g * bd, sa), _unbroadcast_scalar(g * ad, sb)),
    )


def squared_difference(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("squared_difference", a.shape, b.shape)
    d = a.data - b.data

    def vjp(g):
        ga = 2.0 * g * d
        return ga, -ga

    return _result(d * d, (a, b), vjp)


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x, negative_slope=LEAKY_SLOPE):
    xd = x.data
    slope = np.where(xd > 0, 1.0, negative_slope)
    return _result(xd * slope, (x,), lambda g: (g * slope,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """``a @ b`` with ``a`` of shape (..., k) and ``b`` of shape (k, n)."""
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), vjp)


def add_bias(x, b):
    """Add a per-feature vector ``b`` (n,) along the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


# ---------------------------------------------------------------- structure


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _result(y, (x,), lambda g: (g.reshape(old),))


def slice_(x, index):
    """Basic (slice/integer) indexing."""
    y = x.data[index]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _result(np.array(y, order="C"), (x,), vjp)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(
        np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp
    )


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None):
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return multiply(sum_(x, axis), 1.0 / n)


# ---------------------------------------------------------------- normalization


def channel_mean(x):
    """Per-feature mean over every axis but the last."""
    lead = tuple(range(x.ndim - 1))
    n = x.size // x.shape[-1]
    shape = x.shape
    return _result(
        x.data.mean(axis=lead),
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def channel_var(x, m):
    """Per-feature biased variance of ``x`` about the given mean ``m``."""
    if m.ndim != 1 or x.shape[-1] != m.shape[0]:
        raise ShapeError("channel_var", x.shape, m.shape)
    lead = tuple(range(x.ndim - 1))
    n = x.size // x.shape[-1]
    d = x.data - m.data

    def vjp(g):
        gx = (2.0 / n) * d * g
        return gx, -gx.sum(axis=lead)

    return _result((d * d).mean(axis=lead), (x, m), vjp)


def batch_norm(x, m, v, gamma, beta, eps=BN_EPS):
    """``(x - m) / sqrt(v + eps) * gamma + beta`` per feature (last axis)."""
    c = x.shape[-1]
    for t in (m, v, gamma, beta):
        if t.shape != (c,):
            raise ShapeError("batch_norm", x.shape, t.shape)
    lead = tuple(range(x.ndim - 1))
    r = 1.0 / np.sqrt(v.data + eps)
    xhat = (x.data - m.data) * r
    gam = gamma.data

    def vjp(g):
        gxhat = g * gam
        gx = gxhat * r
        gm = -gx.sum(axis=lead)
        gv = (gxhat * xhat).sum(axis=lead) * (-0.5) * r * r
        return gx, gm, gv, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gam + beta.data, (x, m, v, gamma, beta), vjp)


def batch_norm_1d(x, gamma, beta, running_mean, running_var, training,
                  momentum=0.1, eps=BN_EPS, stats=None):
    """Batch normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers
    (plain arrays) are updated in place.  Passing ``stats=(mean, var)``
    reuses previously computed batch statistics instead.  Returns
    ``(y, (mean, var))``.
    """
    if not training:
        m, v = Tensor(running_mean), Tensor(running_var)
        return batch_norm(x, m, v, gamma, beta, eps), (m, v)
    if stats is None:
        m = channel_mean(x)
        v = channel_var(x, m)
        n = x.size // x.shape[-1]
        unbiased = v.data * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * m.data
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        stats = (m, v)
    return batch_norm(x, stats[0], stats[1], gamma, beta, eps), stats


def normalize_rows(x, eps=1e-8):
    """Scale each vector along the last axis to unit length."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    guarded = norm <= eps
    denom = np.where(guarded, eps, norm)
    y = xd / denom

    def vjp(g):
        proj = (y * g).sum(axis=-1, keepdims=True)
        gx = np.where(guarded, g / eps, (g - y * proj) / denom)
        return (gx,)

    return _result(y, (x,), vjp)


# ---------------------------------------------------------------- convolution


def causal_dilated_conv1d(x, w, dilation=1):
    """Causal dilated convolution.

    ``x`` is (batch, time, in_ch), ``w`` is (kernel, in_ch, out_ch).  Output
    ``y[:, t]`` sums ``x[:, t - dilation * (kernel - 1 - k)] @ w[k]`` over
    taps ``k``, with zeros before the sequence start, so ``y[:, t]`` only
    sees inputs at times ``<= t``.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError("causal_dilated_conv1d", x.shape, w.shape)
    kernel = w.shape[0]
    length = x.shape[1]
    pad = dilation * (kernel - 1)
    if pad >= length:
        raise ShapeError(
            "causal_dilated_conv1d",
            x.shape,
            w.shape,
            detail=f"dilation*(kernel-1)={pad} must be < sequence length {length}",
        )
    xd, wd = x.data, w.data
    b, _, cin = xd.shape
    cout = wd.shape[2]
    xp = np.concatenate([np.zeros((b, pad, cin)), xd], axis=1)
    # im2col: all taps side by side, then one matrix product
    cols = np.concatenate(
        [xp[:, k * dilation: k * dilation + length] for k in range(kernel)], axis=2
    ).reshape(b * length, kernel * cin)
    w2 = wd.reshape(kernel * cin, cout)
    y = (cols @ w2).reshape(b, length, cout)

    def vjp(g):
        gx = gw = None
        g2 = g.reshape(b * length, cout)
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, length, kernel, cin)
            gxp = np.zeros_like(xp)
            for k in range(kernel):
                gxp[:, k * dilation: k * dilation + length] += gcols[:, :, k]
            gx = gxp[:, pad:]
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(wd.shape)
        return gx, gw

    return _result(y, (x, w), vjp)


# ---------------------------------------------------------------- quaternions


def _left_matrix(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, -z, y], -1),
            np.stack([y, z, w, -x], -1),
            np.stack([z, -y, x, w], -1),
        ],
        -2,
    )


def _right_matrix(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([w, -x, -y, -z], -1),
            np.stack([x, w, z, -y], -1),
            np.stack([y, -z, w, x], -1),
            np.stack([z, y, -x, w], -1),
        ],
        -2,
    )


def quat_mul(a, b):
    """Row-wise Hamilton product of (..., 4) quaternions stored (w, x, y, z)."""
    if a.shape != b.shape or a.shape[-1] != 4:
        raise ShapeError("quat_mul", a.shape, b.shape)
    la = _left_matrix(a.data)
    rb = _right_matrix(b.data)
    y = np.einsum("...ij,...j->...i", la, b.data)

    def vjp(g):
        ga = np.einsum("...ji,...j->...i", rb, g)
        gb = np.einsum("...ji,...j->...i", la, g)
        return ga, gb

    return _result(y, (a, b), vjp)


# ---------------------------------------------------------------- verification


def numerical_gradient(f, params, step=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each param."""
    out = {}
    for p in params:
        base = p.data.copy()
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for i in range(base.size):
            pert = base.copy().reshape(-1)
            pert[i] += step
            p.data = pert.reshape(base.shape)
            fp = float(f().data)
            pert[i] -= 2 * step
            p.data = pert.reshape(base.shape)
            fm = float(f().data)
            flat[i] = (fp - fm) / (2 * step)
        p.data = base
        out[p] = g
    return out


def relative_error(analytic, numeric, floor=1e-10):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def gradient_check(f, params, step=1e-5):
    """Max norm-wise relative error between tape and finite-difference grads."""
    with Tape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    numeric = numerical_gradient(f, params, step)
    return max(relative_error(analytic[p], numeric[p]) for p in params)


# ---------------------------------------------------------------- serialization

MANIFEST_HEADER = "# quaddyn-params v1 float64 little-endian"


def save_params(path, arrays):
    """Write named arrays to ``<path>.bin`` plus a ``<path>.manifest`` index.

    The blob is the row-major float64 values of each array concatenated in
    manifest order, little-endian.  Each manifest line is
    ``name<TAB>shape<TAB>byte_offset`` with shape as comma-separated extents
    (empty for scalars).
    """
    path = Path(path)
    lines = [MANIFEST_HEADER]
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"invalid parameter name {name!r}")
        arr = np.array(arr, dtype="<f8", order="C")
        lines.append(f"{name}\t{','.join(str(s) for s in arr.shape)}\t{offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    Path(str(path) + ".bin").write_bytes(b"".join(chunks))
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n")


def load_params(path):
    path = Path(path)
    blob = Path(str(path) + ".bin").read_bytes()
    lines = Path(str(path) + ".manifest").read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}.manifest: unrecognized header")
    out = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        name, shape_s, offset_s = line.split("\t")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
