"""Dense tensors with reverse-mode automatic differentiation.

The backward pass is itself built from the same recorded operations, so a
second call to :func:`grad` over the result of a first one is valid
(gradients of gradients).  Every operation also reports an analytic FLOP
count to a global counter, and segments of the computation can be
checkpointed: their intermediate activations are dropped and recomputed
bit-identically on the backward pass.

Float64 is the default dtype; float32 is available through the array
constructors for speed at the cost of oracle-grade precision.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "grad",
    "no_grad",
    "stop_gradient",
    "checkpoint",
    "pack_tensors",
    "unpack_tensor",
    "flops",
    "flop_scope",
    "tape_stats",
    "matmul",
    "concat",
    "narrow",
    "pad_axis",
    "swapaxes",
    "broadcast_to",
    "gather_last",
    "embedding",
    "softmax",
    "log_softmax",
    "logsumexp",
    "cross_entropy",
    "softmax_cross_entropy",
    "rms_norm",
    "UnreachableParameterWarning",
]


class UnreachableParameterWarning(UserWarning):
    """A parameter passed to grad() is not reachable from the output."""


# ---------------------------------------------------------------------------
# global bookkeeping: FLOP counter and tape statistics


class FlopCounter:
    """Exact analytic FLOP counts, broken down by operation kind.

    Counts are platform independent: 2*m*n*p per matmul, one FLOP per
    element for elementwise work, n per reduction over n elements.
    """

    def __init__(self):
        self.breakdown = {}
        self.scoped = {}
        self._scope_stack = []

    @property
    def total(self):
        return sum(self.breakdown.values())

    def add(self, kind, n):
        if n:
            self.breakdown[kind] = self.breakdown.get(kind, 0) + n
            for label in self._scope_stack:
                self.scoped[label] = self.scoped.get(label, 0) + n

    def reset(self):
        self.breakdown.clear()
        self.scoped.clear()


flops = FlopCounter()


@contextmanager
def flop_scope(label):
    """Attribute FLOPs recorded inside the block to `label` as well."""
    flops._scope_stack.append(label)
    try:
        yield
    finally:
        flops._scope_stack.pop()


class TapeStats:
    """Counts recorded activations, to probe checkpointing behaviour.

    `retained` counts graph nodes kept alive for the backward pass;
    `segment_peak` is the largest number of ephemeral nodes created inside
    any single checkpointed segment (the recompute buffer).
    """

    def __init__(self):
        self.reset()

    def reset(self):
        self.retained = 0
        self.segment_current = 0
        self.segment_peak = 0


tape_stats = TapeStats()

_recording = True
_ephemeral_depth = 0


@contextmanager
def no_grad():
    """Disable graph recording (FLOPs are still counted)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def is_recording():
    return _recording


@contextmanager
def forced_recording():
    """Re-enable graph recording inside a no_grad region.

    Needed by code that takes internal gradients (test-time training steps)
    while the caller only wants the final values.
    """
    global _recording
    prev = _recording
    _recording = True
    try:
        yield
    finally:
        _recording = prev


@contextmanager
def _ephemeral():
    global _ephemeral_depth
    _ephemeral_depth += 1
    prev = tape_stats.segment_current
    tape_stats.segment_current = 0
    try:
        yield
    finally:
        tape_stats.segment_peak = max(tape_stats.segment_peak, tape_stats.segment_current)
        tape_stats.segment_current = prev
        _ephemeral_depth -= 1


# ---------------------------------------------------------------------------
# tensor and graph node


class Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "node")

    def __init__(self, data, node=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.node = node

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

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, tracked={self.node is not None})"

    # arithmetic -----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, dtype=np.float64):
    return Tensor(np.array(data, dtype=dtype))


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype))


def _record(op, out_data, parents, vjp):
    if _recording:
        if _ephemeral_depth:
            tape_stats.segment_current += 1
        else:
            tape_stats.retained += 1
        return Tensor(out_data, Node(op, parents, vjp))
    return Tensor(out_data)


def stop_gradient(t):
    """Block gradient flow: the result is a leaf sharing t's values."""
    return Tensor(t.data)


# ---------------------------------------------------------------------------
# shape utilities


def _unbroadcast(g, shape):
    """Reduce cotangent g to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = sum_(g, axis=axes, keepdims=False)
    if out.shape != tuple(shape):
        out = reshape(out, tuple(shape))
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary(op, a, b, fwd, vjp_a, vjp_b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        out = fwd(a.data, b.data)
        flops.add(op, out.size)

        def vjp(g):
            return (_unbroadcast(vjp_a(g, a, b), a.shape), _unbroadcast(vjp_b(g, a, b), b.shape))

        return _record(op, out, (a, b), vjp)
    if isinstance(a, Tensor):
        const = np.asarray(b)
        out = fwd(a.data, const)
        flops.add(op, out.size)

        def vjp(g):
            return (_unbroadcast(vjp_a(g, a, const), a.shape),)

        return _record(op, out, (a,), vjp)
    const = np.asarray(a)
    out = fwd(const, b.data)
    flops.add(op, out.size)

    def vjp(g):
        return (_unbroadcast(vjp_b(g, const, b), b.shape),)

    return _record(op, out, (b,), vjp)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, a, b: g, lambda g, a, b: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, a, b: g, lambda g, a, b: neg(g))


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, a, b: g * b, lambda g, a, b: g * a)


def div(a, b):
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, a, b: g / b,
        lambda g, a, b: neg(g * a) / (b * b) if isinstance(b, Tensor) else neg(g * a) / (b * b),
    )


def neg(a):
    if not isinstance(a, Tensor):
        return Tensor(-np.asarray(a))
    out = -a.data
    flops.add("neg", out.size)
    return _record("neg", out, (a,), lambda g: (neg(g),))


def exp(a):
    out_data = np.exp(a.data)
    flops.add("exp", out_data.size)
    holder = []

    def vjp(g):
        return (g * holder[0],)

    out = _record("exp", out_data, (a,), vjp)
    holder.append(out)
    return out


def log(a):
    out = np.log(a.data)
    flops.add("log", out.size)
    return _record("log", out, (a,), lambda g: (g / a,))


def sqrt(a):
    out_data = np.sqrt(a.data)
    flops.add("sqrt", out_data.size)
    holder = []

    def vjp(g):
        return (g / (2.0 * holder[0]),)

    out = _record("sqrt", out_data, (a,), vjp)
    holder.append(out)
    return out


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    flops.add("sigmoid", out_data.size)
    holder = []

    def vjp(g):
        s = holder[0]
        return (g * s * (1.0 - s),)

    out = _record("sigmoid", out_data, (a,), vjp)
    holder.append(out)
    return out


def silu(a):
    return a * sigmoid(a)


def power(a, p):
    p = float(p)
    out = a.data**p
    flops.add("power", out.size)

    def vjp(g):
        return (g * (p * power(a, p - 1.0)),) if p != 1.0 else (g,)

    return _record("power", out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    flops.add("sum", a.size)

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * a.ndim), a.shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % a.ndim for ax in axes)
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, a.shape),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def detached_max(a, axis=None, keepdims=False):
    """Max of the values as a constant array (standard softmax stabilizer)."""
    flops.add("max", a.size)
    return np.max(a.data, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    out = a.data.reshape(shape)
    old = a.shape
    return _record("reshape", out, (a,), lambda g: (reshape(g, old),))


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _record("broadcast", out, (a,), vjp)


def swapaxes(a, ax1, ax2):
    out = np.swapaxes(a.data, ax1, ax2)
    return _record("swapaxes", out, (a,), lambda g: (swapaxes(g, ax1, ax2),))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def vjp(g):
        outs, start = [], 0
        for s in sizes:
            outs.append(narrow(g, axis, start, s))
            start += s
        return tuple(outs)

    return _record("concat", out, tuple(tensors), vjp)


def narrow(a, axis, start, length):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    out = a.data[tuple(idx)]
    after = a.shape[axis] - start - length

    def vjp(g):
        return (pad_axis(g, axis, start, after),)

    return _record("narrow", out, (a,), vjp)


def pad_axis(a, axis, before, after):
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    length = a.shape[axis]

    def vjp(g):
        return (narrow(g, axis, before, length),)

    return _record("pad", out, (a,), vjp)


# ---------------------------------------------------------------------------
# matmul and indexing


def matmul(a, b):
    """Matrix product over the last two axes with leading-batch broadcasting.

    Both operands must have ndim >= 2 and agreeing inner extents.  Counts
    2*m*n*p FLOPs per constituent matrix product.  Single-row products are
    padded to two rows internally so that chunked computations stay
    bit-identical to whole-array ones (BLAS switches kernels at m=1).
    """
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if ad.shape[-2] == 1:
        out = np.matmul(np.concatenate([ad, ad], axis=-2), bd)[..., :1, :]
    else:
        out = np.matmul(ad, bd)
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    flops.add("matmul", 2 * m * n * k * batch)

    def vjp(g):
        ga = _unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.shape)
        gb = _unbroadcast(matmul(swapaxes(a, -1, -2), g), b.shape)
        return (ga, gb)

    return _record("matmul", out, (a, b), vjp)


def gather_last(a, idx):
    """out[..., j] = a[..., j, idx[..., j]] for integer idx of shape a.shape[:-1]."""
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    size = a.shape[-1]

    def vjp(g):
        return (scatter_last(g, idx, size),)

    return _record("gather", out, (a,), vjp)


def scatter_last(g, idx, size):
    """Inverse of gather_last: place g at positions idx along a new last axis."""
    idx = np.asarray(idx)
    out = np.zeros(g.shape + (size,), dtype=g.dtype)
    np.put_along_axis(out, idx[..., None], g.data[..., None], axis=-1)

    def vjp(cot):
        return (gather_last(cot, idx),)

    return _record("scatter", out, (g,), vjp)


def embedding(table, ids):
    """Row lookup table[ids]; the gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    out = table.data[ids]
    n_rows, dim = table.shape

    def vjp(g):
        return (embedding_scatter(g, ids, n_rows),)

    return _record("embedding", out, (table,), vjp)


def embedding_scatter(g, ids, n_rows):
    ids = np.asarray(ids)
    dim = g.shape[-1]
    out = np.zeros((n_rows, dim), dtype=g.dtype)
    np.add.at(out, ids.reshape(-1), g.data.reshape(-1, dim))

    def vjp(cot):
        return (embedding(cot, ids),)

    return _record("embedding_scatter", out, (g,), vjp)


# ---------------------------------------------------------------------------
# composites


def softmax(a, axis=-1):
    m = detached_max(a, axis=axis, keepdims=True)
    e = exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(a, axis=-1, keepdims=False):
    if axis not in (-1, a.ndim - 1):
        raise ValueError("logsumexp only supports the last axis")
    m = detached_max(a, axis=-1, keepdims=True)
    s = log(exp(a - m).sum(axis=-1, keepdims=True)) + m
    if not keepdims:
        s = reshape(s, s.shape[:-1])
    return s


def log_softmax(a, axis=-1):
    m = detached_max(a, axis=axis, keepdims=True)
    shifted = a - m
    return shifted - log(exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits, targets):
    """Per-position next-token loss: -log softmax(logits)[target].

    logits: (..., V) tensor; targets: integer array of shape logits.shape[:-1].
    Numerically stabilized by max subtraction; always >= 0 up to rounding.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target id out of range [0, {vocab})")
    lse = logsumexp(logits, axis=-1, keepdims=True)
    picked = gather_last(logits, targets)
    return reshape(lse, picked.shape) - picked


def softmax_cross_entropy(logits, target):
    """Scalar cross entropy of a rank-1 logit vector against one token id."""
    if logits.ndim != 1:
        raise ValueError(f"expected rank-1 logits, got shape {logits.shape}")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise ValueError(f"target {target} out of range [0, {logits.shape[0]})")
    loss = cross_entropy(reshape(logits, (1, -1)), np.array([target]))
    return reshape(loss, ())


def rms_norm(x, gain, eps=1e-6):
    """x rescaled to unit RMS over the last axis, with a per-dimension gain."""
    ms = mean(x * x, axis=-1, keepdims=True)
    return x / sqrt(ms + eps) * gain


# ---------------------------------------------------------------------------
# reverse-mode differentiation


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(output, wrt, create_graph=False, output_cotangent=None):
    """Reverse-mode gradients of `output` with respect to the tensors in `wrt`.

    `output` must be scalar unless an explicit cotangent is supplied.  With
    create_graph=True the returned gradients are themselves recorded, so a
    second grad() over them computes gradients of gradients.  Parameters not
    reachable from the output get zero gradients and a warning.
    """
    single = isinstance(wrt, Tensor)
    wrt_list = [wrt] if single else list(wrt)
    if output_cotangent is None:
        if output.shape != ():
            raise ValueError(f"grad() needs a scalar output, got shape {output.shape}")
        seed = Tensor(np.ones((), dtype=output.dtype))
    else:
        seed = output_cotangent

    order = _toposort(output)
    wrt_ids = {id(w) for w in wrt_list}
    needed = {}
    for t in order:  # parents appear before consumers
        flag = id(t) in wrt_ids
        if not flag and t.node is not None:
            flag = any(needed.get(id(p), False) for p in t.node.parents)
        needed[id(t)] = flag

    cot = {id(output): seed}
    ctx = flop_scope("backward") if create_graph else no_grad()
    with ctx:
        for t in reversed(order):
            g = cot.get(id(t))
            if g is None or t.node is None or not needed.get(id(t), False):
                continue
            for p, gp in zip(t.node.parents, t.node.vjp(g)):
                if gp is None or not needed.get(id(p), False):
                    continue
                prev = cot.get(id(p))
                cot[id(p)] = gp if prev is None else prev + gp

    results = []
    for w in wrt_list:
        gw = cot.get(id(w))
        if gw is None:
            warnings.warn(
                f"parameter of shape {w.shape} unreachable from output; returning zeros",
                UnreachableParameterWarning,
                stacklevel=2,
            )
            gw = Tensor(np.zeros(w.shape, dtype=w.dtype))
        results.append(gw)
    return results[0] if single else results


# ---------------------------------------------------------------------------
# checkpointing


def pack_tensors(tensors):
    """Flatten a list of tensors into one vector; returns (vector, metadata)."""
    meta = [t.shape for t in tensors]
    flat = [reshape(t, (t.size,)) for t in tensors]
    return concat(flat, axis=0), meta


def unpack_tensor(vec, meta):
    outs, start = [], 0
    for shape in meta:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        outs.append(reshape(narrow(vec, 0, start, n), shape))
        start += n
    return outs


def checkpoint(fn, inputs, retain=False):
    """Run fn(inputs) dropping its internal graph; recompute on backward.

    `fn` takes a list of tensors and returns a single tensor (callers pack
    multiple results with pack_tensors).  The forward value is computed
    normally but only `inputs` are retained; during the backward pass the
    segment is re-executed, which reproduces the dropped activations
    bit-identically in float64.  The recomputed segment supports gradients
    of gradients when the surrounding grad() uses create_graph=True.

    With retain=True the segment graph is kept and reused on backward
    instead of replayed; gradients are accumulated with the same segment
    boundaries either way, so the two modes are directly comparable.
    """
    inputs = list(inputs)
    if not _recording:
        return fn(inputs)
    if retain:
        leaves = [Tensor(t.data) for t in inputs]
        out_probe = fn(leaves)

        def retained_vjp(g):
            want_graph = _recording
            grads = grad(out_probe, leaves, create_graph=want_graph, output_cotangent=g)
            return tuple(grads)

        return _record("checkpoint", out_probe.data, tuple(inputs), retained_vjp)
    with _ephemeral():
        out_probe = fn([Tensor(t.data) for t in inputs])
    out_data = out_probe.data

    def vjp(g):
        global _recording
        want_graph = _recording
        leaves = [Tensor(t.data) for t in inputs]
        prev = _recording
        _recording = True  # the replay must record even under no_grad
        try:
            with _ephemeral():
                replay = fn(leaves)
                grads = grad(replay, leaves, create_graph=want_graph, output_cotangent=g)
        finally:
            _recording = prev
        return tuple(grads)

    return _record("checkpoint", out_data, tuple(inputs), vjp)
