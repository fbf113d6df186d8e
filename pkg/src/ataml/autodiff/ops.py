"""Differentiable primitives.

Each vector-Jacobian rule is expressed with the primitives in this module, so
gradients of gradients come for free when the backward pass is recorded.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ContractViolation, ShapeError, Tensor, as_tensor, record


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _reduce_like(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == shape else sum_to(g, shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def vjp(g, node, needs):
        x, y = node.inputs
        return (_reduce_like(g, x.shape) if needs[0] else None,
                _reduce_like(g, y.shape) if needs[1] else None)

    return record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def vjp(g, node, needs):
        x, y = node.inputs
        return (_reduce_like(g, x.shape) if needs[0] else None,
                _reduce_like(neg(g), y.shape) if needs[1] else None)

    return record("sub", a.data - b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g, node, needs: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def vjp(g, node, needs):
        x, y = node.inputs
        gx = _reduce_like(mul(g, y), x.shape) if needs[0] else None
        gy = _reduce_like(mul(g, x), y.shape) if needs[1] else None
        return gx, gy

    return record("mul", a.data * b.data, (a, b), vjp)


def scale(a: Tensor, k: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    k = float(k)
    return record("scale", a.data * k, (a,), lambda g, node, needs: (scale(g, k),), k=k)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")

    def vjp(g, node, needs):
        x, y = node.inputs
        gx = _reduce_like(div(g, y), x.shape) if needs[0] else None
        gy = None
        if needs[1]:
            gy = _reduce_like(neg(div(mul(g, x), mul(y, y))), y.shape)
        return gx, gy

    return record("div", a.data / b.data, (a, b), vjp)


def exp(a: Tensor) -> Tensor:
    def vjp(g, node, needs):
        return (mul(g, exp(node.inputs[0])),)

    return record("exp", np.exp(a.data), (a,), vjp)


def log(a: Tensor) -> Tensor:
    return record("log", np.log(a.data), (a,), lambda g, node, needs: (div(g, node.inputs[0]),))


def sqrt(a: Tensor) -> Tensor:
    def vjp(g, node, needs):
        return (div(scale(g, 0.5), sqrt(node.inputs[0])),)

    return record("sqrt", np.sqrt(a.data), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    def vjp(g, node, needs):
        t = tanh(node.inputs[0])
        return (mul(g, sub(1.0, mul(t, t))),)

    return record("tanh", np.tanh(a.data), (a,), vjp)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def vjp(g, node, needs):
        s = sigmoid(node.inputs[0])
        return (mul(g, mul(s, sub(1.0, s))),)

    return record("sigmoid", _np_sigmoid(a.data), (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)) evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return record("softplus", out, (a,), lambda g, node, needs: (mul(g, sigmoid(node.inputs[0])),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = float(slope)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)

    def vjp(g, node, needs):
        return (mul(g, Tensor(node.ctx["factor"])),)

    return record("leaky_relu", a.data * factor, (a,), vjp, factor=factor, slope=slope)


def dropout_apply(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed (already rescaled) dropout mask."""
    mask = np.asarray(mask, dtype=a.dtype)
    if np.broadcast_shapes(mask.shape, a.shape) != a.shape:
        raise ShapeError(f"dropout mask {mask.shape} does not fit {a.shape}")

    def vjp(g, node, needs):
        return (mul(g, Tensor(node.ctx["mask"])),)

    return record("dropout", a.data * mask, (a,), vjp, mask=mask)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
    return dropout_apply(a, mask)


# ---------------------------------------------------------------- reductions & shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    in_shape = a.shape

    def vjp(g, node, needs):
        if axis is None:
            g2 = reshape(g, (1,) * len(in_shape)) if not keepdims else g
        elif keepdims:
            g2 = g
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(in_shape) for ax in axes)
            shape = list(g.shape)
            for ax in sorted(axes):
                shape.insert(ax, 1)
            g2 = reshape(g, tuple(shape))
        return (broadcast_to(g2, in_shape),)

    return record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, axis=axis)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise ContractViolation("mean over an empty axis")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return record("broadcast_to", out, (a,), lambda g, node, needs: (sum_to(g, src),))


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot reduce {a.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = np.sum(a.data, axis=axes, keepdims=True)
    out = out.reshape(shape)
    src = a.shape
    return record("sum_to", out, (a,), lambda g, node, needs: (broadcast_to(g, src),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return record("reshape", out, (a,), lambda g, node, needs: (reshape(g, src),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return record(
        "swapaxes", np.swapaxes(a.data, i, j), (a,), lambda g, node, needs: (swapaxes(g, i, j),)
    )


def index(a: Tensor, key) -> Tensor:
    """Basic (slice / integer) indexing."""
    src = a.shape
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    else:
        out = out.copy()
    return record("index", out, (a,), lambda g, node, needs: (index_put(g, key, src),))


def index_put(g: Tensor, key, shape: tuple) -> Tensor:
    """Zeros of ``shape`` with ``g`` written at ``key`` (adjoint of index)."""
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g.data
    return record("index_put", out, (g,), lambda gg, node, needs: (index(gg, key),))


def take(a: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with constant integer indices (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ContractViolation(f"index out of range for axis of length {n}")
    out = np.take(a.data, idx, axis=axis)
    return record(
        "take", out, (a,), lambda g, node, needs: (scatter_add(g, idx, n, axis),), idx=idx
    )


def scatter_add(g: Tensor, idx: np.ndarray, n: int, axis: int = 0) -> Tensor:
    """Adjoint of :func:`take`: accumulate slices of ``g`` into ``n`` rows."""
    axis = axis % (g.ndim - idx.ndim + 1)
    moved = np.moveaxis(g.data, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
    flat = moved.reshape((idx.size,) + moved.shape[idx.ndim:])
    acc = np.zeros((n,) + flat.shape[1:], dtype=g.dtype)
    np.add.at(acc, idx.reshape(-1), flat)
    out = np.moveaxis(acc, 0, axis)
    return record("scatter_add", out, (g,), lambda gg, node, needs: (take(gg, idx, axis),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    ndim = out.ndim
    ax = axis % ndim

    def vjp(g, node, needs):
        grads = []
        for k, t in enumerate(node.inputs):
            if not needs[k]:
                grads.append(None)
                continue
            key = [slice(None)] * ndim
            key[ax] = slice(int(bounds[k]), int(bounds[k + 1]))
            grads.append(index(g, tuple(key)))
        return tuple(grads)

    return record("concat", out, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def vjp(g, node, needs):
        x, y = node.inputs
        gx = _reduce_like(matmul(g, swapaxes(y, -1, -2)), x.shape) if needs[0] else None
        gy = _reduce_like(matmul(swapaxes(x, -1, -2), g), y.shape) if needs[1] else None
        return gx, gy

    return record("matmul", np.matmul(a.data, b.data), (a, b), vjp)


def inner(a: Tensor, v: Tensor) -> Tensor:
    """Inner product of the last axis of ``a`` with vector ``v``."""
    if v.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise ShapeError(f"inner: {a.shape} . {v.shape}")
    return sum(mul(a, v), axis=-1)


def _causal_unfold_np(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    b, t, c = x.shape
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((b, pad, c), dtype=x.dtype), x], axis=1)
    cols = [xp[:, j * dilation : j * dilation + t, :] for j in range(k)]
    return np.concatenate(cols, axis=-1)


def causal_unfold(x: Tensor, k: int, dilation: int) -> Tensor:
    """(B, T, C) -> (B, T, k*C); tap j holds x[t - (k-1-j)*dilation], zeros before t=0."""
    out = _causal_unfold_np(x.data, k, dilation)
    return record(
        "causal_unfold", out, (x,), lambda g, node, needs: (causal_fold(g, k, dilation),)
    )


def causal_fold(u: Tensor, k: int, dilation: int) -> Tensor:
    """Adjoint of :func:`causal_unfold`."""
    b, t, kc = u.shape
    c = kc // k
    pad = (k - 1) * dilation
    acc = np.zeros((b, t + pad, c), dtype=u.dtype)
    for j in range(k):
        acc[:, j * dilation : j * dilation + t, :] += u.data[:, :, j * c : (j + 1) * c]
    out = acc[:, pad:, :]
    return record(
        "causal_fold", out, (u,), lambda g, node, needs: (causal_unfold(g, k, dilation),)
    )


def conv1d_causal(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Dilated causal convolution.

    x: (B, T, C_in); w: (k, C_in, C_out) where w[k-1] multiplies the current
    timestep and w[k-1-j] the input j*dilation steps back.  Output (B, T, C_out).
    """
    x = _lift(x)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d_causal expects x (B,T,C) and w (k,Cin,Cout), got {x.shape}, {w.shape}")
    k, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d_causal: input has {x.shape[-1]} channels, kernel expects {cin}")
    if dilation < 1:
        raise ContractViolation("dilation must be >= 1")
    cols = _causal_unfold_np(x.data, k, dilation)
    out = cols @ w.data.reshape(k * cin, cout)

    def vjp(g, node, needs):
        xx, ww = node.inputs
        w2 = reshape(ww, (k * cin, cout))
        gx = causal_fold(matmul(g, swapaxes(w2, 0, 1)), k, dilation) if needs[0] else None
        gw = None
        if needs[1]:
            u = causal_unfold(xx, k, dilation)
            gw = reshape(sum_to(matmul(swapaxes(u, -1, -2), g), (k * cin, cout)), ww.shape)
        return gx, gw

    return record("conv1d_causal", out, (x, w), vjp, dilation=dilation)


# ---------------------------------------------------------------- normalisers & losses


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    out = x - lse

    def vjp(g, node, needs):
        p = softmax(node.inputs[0], axis=axis)
        return (sub(g, mul(p, sum(g, axis=axis, keepdims=True))),)

    return record("log_softmax", out, (a,), vjp, axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g, node, needs):
        p = softmax(node.inputs[0], axis=axis)
        return (mul(p, sub(g, sum(mul(g, p), axis=axis, keepdims=True))),)

    return record("softmax", out, (a,), vjp, axis=axis)


def softmax_cross_entropy(logits: Tensor, onehot) -> Tensor:
    """Mean categorical cross-entropy over the batch, from logits."""
    y = _lift(onehot, logits)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    per_example = neg(sum(mul(y, log_softmax(logits, axis=-1)), axis=-1))
    return mean(per_example)


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over all entries, from logits."""
    y = _lift(targets, logits)
    if y.shape != logits.shape:
        raise ShapeError(f"labels {y.shape} do not match logits {logits.shape}")
    return mean(sub(softplus(logits), mul(y, logits)))


def global_norm(tensors: Sequence[Tensor]) -> Tensor:
    total = None
    for t in tensors:
        s = sum(mul(t, t))
        total = s if total is None else add(total, s)
    if total is None:
        return Tensor(0.0)
    return sqrt(total)


def clip_by_global_norm(tensors: Sequence[Tensor], max_norm: float) -> list[Tensor]:
    """Rescale so the joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    norm = global_norm(tensors)
    if float(norm.data) <= max_norm:
        return list(tensors)
    factor = div(max_norm, norm)
    return [mul(t, factor) for t in tensors]
