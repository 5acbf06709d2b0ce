"""Reverse-mode automatic differentiation over dense float tensors.

Tensors wrap contiguous row-major numpy arrays (float32 by default; float64
is supported so gradients can be verified at high precision). Operations
executed while a Graph is active record nodes onto it in execution order;
``Graph.backward`` walks the tape in exact reverse insertion order and
accumulates gradients additively wherever a tensor fans out into several
consumers. Graphs are rebuilt per training step (define-by-run) and are
confined to the thread that created them.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "UnknownOpError",
    "NonScalarLossError",
    "NonFiniteError",
    "add",
    "sub",
    "scalar_mul",
    "const_mul",
    "matmul",
    "conv2d",
    "max_pool2",
    "batch_norm",
    "relu",
    "sigmoid",
    "reshape",
    "narrow",
    "concat",
    "mean",
    "sum_squares",
    "binary_cross_entropy",
    "upsample2x",
    "forward_op",
    "grad_check",
    "BCE_CLAMP",
]

_FLOAT_DTYPES = (np.float32, np.float64)

# Probabilities fed to a log are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] so
# every loss value stays finite.
BCE_CLAMP = 1e-6


class ShapeError(ValueError):
    """Operand shapes do not satisfy the op's shape rules."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class UnknownOpError(ValueError):
    """``forward_op`` was asked for an op-kind it does not know."""


class NonScalarLossError(ValueError):
    """backward() requires a scalar (single-element) loss tensor."""


class NonFiniteError(FloatingPointError):
    """A probed function value was NaN or infinite."""


class Tensor:
    """Dense float tensor, optionally tracked by the active Graph.

    ``data`` is a contiguous row-major numpy array. ``grad`` is populated by
    ``Graph.backward`` for tensors with ``requires_grad`` and always matches
    ``data``'s shape; each backward call overwrites it.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_graph")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        """A view of the same values with no graph history and no grad."""
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


_tls = threading.local()


def _active_graph():
    return getattr(_tls, "graph", None)


class _Node:
    __slots__ = ("op", "inputs", "grad_fns")

    def __init__(self, op, inputs, grad_fns):
        self.op = op
        self.inputs = inputs
        self.grad_fns = grad_fns


class Graph:
    """Tape of executed ops; use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes = []
        self._leaf_tensors = {}

    def __enter__(self):
        if _active_graph() is not None:
            raise RuntimeError("a Graph is already active on this thread")
        _tls.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.graph = None
        return False

    def _ensure_node(self, t):
        # Register a tensor as a leaf if this graph has not seen it yet.
        if t._graph is self and t.node_id is not None:
            return t.node_id
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), ()))
        t.node_id = node_id
        t._graph = self
        if t.requires_grad:
            self._leaf_tensors[node_id] = t
        return node_id

    def _record(self, op, out, tracked):
        ids = tuple(self._ensure_node(t) for t, _ in tracked)
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, ids, tuple(fn for _, fn in tracked)))
        out.node_id = node_id
        out._graph = self

    def backward(self, loss):
        """Gradients of a scalar loss w.r.t. every requires_grad leaf.

        Returns ``{node_id: gradient array}`` for the requires_grad leaves
        and stores the same arrays on ``tensor.grad`` (overwriting any value
        from a previous call). Nodes are visited in exact reverse insertion
        order; fan-out gradients accumulate additively. Deterministic: the
        same graph yields bit-identical gradients on every call.
        """
        if loss._graph is not self or loss.node_id is None:
            raise ValueError("loss tensor was not produced under this graph")
        if loss.size != 1:
            raise NonScalarLossError(f"loss must be scalar, got shape {tuple(loss.shape)}")

        grads = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
        for node_id in range(len(self.nodes) - 1, -1, -1):
            gy = grads.get(node_id)
            if gy is None:
                continue
            node = self.nodes[node_id]
            if node.op == "leaf":
                continue
            for in_id, grad_fn in zip(node.inputs, node.grad_fns):
                g = grad_fn(gy)
                if in_id in grads:
                    grads[in_id] = grads[in_id] + g
                else:
                    grads[in_id] = g
            # Intermediate gradients are not part of the result; free them.
            if node_id not in self._leaf_tensors:
                del grads[node_id]

        result = {}
        for node_id, t in self._leaf_tensors.items():
            g = grads.get(node_id)
            if g is None:
                continue
            t.grad = np.ascontiguousarray(np.broadcast_to(g, t.shape).astype(t.dtype, copy=True))
            result[node_id] = t.grad
        return result


def _tracked(t, graph):
    return t.requires_grad or (t._graph is graph and t.node_id is not None)


def _emit(op, out_data, inputs):
    """Wrap a forward result, recording the node when gradients may flow.

    ``inputs`` is a sequence of (tensor, grad_fn) pairs; grad_fn maps the
    output gradient to that input's gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.node_id = None
    out._graph = None
    graph = _active_graph()
    if graph is not None:
        tracked = [(t, fn) for t, fn in inputs if _tracked(t, graph)]
        if tracked:
            graph._record(op, out, tracked)
    return out


def _unbroadcast(grad, shape):
    # Collapse a broadcasted gradient back to the operand's shape.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return _emit(
        "add",
        out,
        [
            (a, lambda gy: _unbroadcast(gy, a.shape)),
            (b, lambda gy: _unbroadcast(gy, b.shape)),
        ],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return _emit(
        "sub",
        out,
        [
            (a, lambda gy: _unbroadcast(gy, a.shape)),
            (b, lambda gy: _unbroadcast(-gy, b.shape)),
        ],
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scalar-mul", a.data * c, [(a, lambda gy: gy * c)])


def const_mul(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant (non-differentiated) array."""
    c = np.asarray(c, dtype=a.dtype)
    _check_broadcast("const-mul", a, c)
    return _emit("const-mul", a.data * c, [(a, lambda gy: _unbroadcast(gy * c, a.shape))])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    return _emit(
        "matmul",
        out,
        [
            (a, lambda gy: gy @ b.data.T),
            (b, lambda gy: a.data.T @ gy),
        ],
    )


def _pad_channels_last(x, padding):
    n, c, h, w = x.shape
    xt = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    if padding:
        xt[:, padding:-padding, padding:-padding, :] = x.transpose(0, 2, 3, 1)
    else:
        xt[:] = x.transpose(0, 2, 3, 1)
    return xt


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, kernel (out_ch, in_ch, k, k).

    The forward pass assembles a channels-last column matrix (one block
    copy per kernel tap) and runs a single GEMM. Only the padded input is
    kept for backward; the backward GEMMs run per kernel tap so no k*k-fold
    column matrix outlives the call.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError("conv2d", x.shape, w.shape)

    xt = _pad_channels_last(x.data, padding)
    ho = (xt.shape[1] - k) // stride + 1
    wo = (xt.shape[2] - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    # Kernel reordered to match the (k, k, c) column layout.
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(k * k * c, co))
    out = cols.reshape(n * ho * wo, k * k * c) @ wmat
    del cols
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def grad_w(gy):
        gy_r = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, co)
        dw = np.empty((k, k, c, co), dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                tap = xt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :].reshape(-1, c)
                dw[i, j] = tap.T @ gy_r
        return np.ascontiguousarray(dw.transpose(3, 2, 0, 1))

    def grad_x(gy):
        gy_r = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, co)
        wt = wmat.reshape(k, k, c, co)
        dxt = np.zeros(xt.shape, dtype=gy.dtype)
        for i in range(k):
            for j in range(k):
                dtap = (gy_r @ wt[i, j].T).reshape(n, ho, wo, c)
                dxt[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dtap
        if padding:
            dxt = dxt[:, padding:-padding, padding:-padding, :]
        return np.ascontiguousarray(dxt.transpose(0, 3, 1, 2))

    return _emit("conv2d", out, [(x, grad_x), (w, grad_w)])


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route to the first element in row-major order."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("max-pool", x.shape)
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def grad_x(gy):
        db = np.zeros((n, c, ho, wo, 4), dtype=gy.dtype)
        np.put_along_axis(db, idx[..., None], gy[..., None], axis=-1)
        return db.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    return _emit("max-pool", out, [(x, grad_x)])


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Per-channel batch normalization for (N, F) or (N, C, H, W) input.

    Training mode normalizes with biased batch statistics and folds them
    into the running averages in place (``running = momentum * running +
    (1 - momentum) * batch``); eval mode uses the running averages as
    constants.
    """
    if x.data.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.data.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError("batch-norm", x.shape)
    nchan = x.shape[1]
    if gamma.size != nchan or beta.size != nchan:
        raise ShapeError("batch-norm", x.shape, gamma.shape, beta.shape)

    g = gamma.data.reshape(bshape)
    b = beta.data.reshape(bshape)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.reshape(-1).astype(running_mean.dtype)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.reshape(-1).astype(running_var.dtype)
    else:
        mu = running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.reshape(bshape).astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = g * xhat + b

    n_eff = x.data.size // nchan

    def grad_x(gy):
        dxhat = gy * g
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            return (inv / n_eff) * (n_eff * dxhat - s1 - xhat * s2)
        return dxhat * inv

    def grad_gamma(gy):
        return (gy * xhat).sum(axis=axes).reshape(gamma.shape)

    def grad_beta(gy):
        return gy.sum(axis=axes).reshape(beta.shape)

    return _emit("batch-norm", out, [(x, grad_x), (gamma, grad_gamma), (beta, grad_beta)])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, x.dtype.type(0)), [(x, lambda gy: gy * mask)])


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _emit("sigmoid", out, [(x, lambda gy: gy * out * (1.0 - out))])


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _emit("reshape", np.ascontiguousarray(out), [(x, lambda gy: gy.reshape(x.shape))])


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice x[start:stop] along axis 0."""
    n = x.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError("narrow", x.shape, (start, stop))

    def grad_x(gy):
        g = np.zeros(x.shape, dtype=gy.dtype)
        g[start:stop] = gy
        return g

    return _emit("narrow", np.ascontiguousarray(x.data[start:stop]), [(x, grad_x)])


def concat(tensors) -> Tensor:
    """Concatenate along axis 0."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", ())
    tails = {t.shape[1:] for t in tensors}
    if len(tails) != 1:
        raise ShapeError("concat", *[t.shape for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)
    inputs = []
    offset = 0
    for t in tensors:
        lo, hi = offset, offset + t.shape[0]
        inputs.append((t, lambda gy, lo=lo, hi=hi: gy[lo:hi]))
        offset = hi
    return _emit("concat", out, inputs)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _emit("mean", out, [(x, lambda gy: np.full(x.shape, gy / n, dtype=gy.dtype))])


def sum_squares(x: Tensor) -> Tensor:
    out = np.asarray((x.data * x.data).sum(), dtype=x.dtype)
    return _emit("sum-of-squares", out, [(x, lambda gy: gy * 2.0 * x.data)])


def binary_cross_entropy(p: Tensor, target, reduction: str = "mean") -> Tensor:
    """BCE of probabilities against constant targets, clamped for finiteness.

    Probabilities are clamped to [BCE_CLAMP, 1 - BCE_CLAMP] before any log;
    the gradient is zero where the clamp is active. ``target`` may be a
    scalar or an array broadcastable to p's shape; it receives no gradient.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    t = np.broadcast_to(np.asarray(target, dtype=p.dtype), p.shape)
    lo = p.dtype.type(BCE_CLAMP)
    hi = p.dtype.type(1.0 - BCE_CLAMP)
    pc = np.clip(p.data, lo, hi)
    elems = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    out = elems.sum() if reduction == "sum" else elems.mean()
    out = np.asarray(out, dtype=p.dtype)
    scale = 1.0 if reduction == "sum" else 1.0 / p.size
    inside = (p.data > lo) & (p.data < hi)

    def grad_p(gy):
        g = -(t / pc - (1.0 - t) / (1.0 - pc))
        return gy * scale * np.where(inside, g, p.dtype.type(0))

    return _emit("binary-cross-entropy", out, [(p, grad_p)])


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError("upsample-nearest-2x", x.shape)
    n, c, h, w = x.shape
    out = np.ascontiguousarray(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def grad_x(gy):
        return gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _emit("upsample-nearest-2x", out, [(x, grad_x)])


_OP_TABLE = {
    "add": lambda inputs, **p: add(*inputs, **p),
    "sub": lambda inputs, **p: sub(*inputs, **p),
    "scalar-mul": lambda inputs, **p: scalar_mul(inputs[0], **p),
    "const-mul": lambda inputs, **p: const_mul(inputs[0], **p),
    "matmul": lambda inputs, **p: matmul(*inputs, **p),
    "conv2d": lambda inputs, **p: conv2d(*inputs, **p),
    "max-pool": lambda inputs, **p: max_pool2(inputs[0], **p),
    "batch-norm": lambda inputs, **p: batch_norm(*inputs, **p),
    "relu": lambda inputs, **p: relu(inputs[0], **p),
    "sigmoid": lambda inputs, **p: sigmoid(inputs[0], **p),
    "reshape": lambda inputs, **p: reshape(inputs[0], **p),
    "narrow": lambda inputs, **p: narrow(inputs[0], **p),
    "concat": lambda inputs, **p: concat(inputs, **p),
    "mean": lambda inputs, **p: mean(inputs[0], **p),
    "sum-of-squares": lambda inputs, **p: sum_squares(inputs[0], **p),
    "binary-cross-entropy": lambda inputs, **p: binary_cross_entropy(inputs[0], **p),
    "upsample-nearest-2x": lambda inputs, **p: upsample2x(inputs[0], **p),
}


def forward_op(kind: str, inputs, **params) -> Tensor:
    """Dispatch an op by kind string; the result is recorded like any other op."""
    fn = _OP_TABLE.get(kind)
    if fn is None:
        raise UnknownOpError(f"unknown op-kind {kind!r}; known: {sorted(_OP_TABLE)}")
    return fn(list(inputs), **params)


def grad_check(scalar_function, point, epsilon: float = 1e-4, max_coords=None, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The point is promoted to float64 and the function is probed at
    ``point +- epsilon`` per coordinate; the per-coordinate error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    ``max_coords`` limits the probe to a random coordinate subset, which
    keeps checks over large parameter tensors affordable.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    x0 = base.astype(np.float64)

    with Graph() as g:
        p = Tensor(x0.copy(), requires_grad=True)
        out = scalar_function(p)
        if out.size != 1:
            raise NonScalarLossError("grad_check target function must return a scalar")
        g.backward(out)
    analytic = p.grad.reshape(-1)

    coords = np.arange(x0.size)
    if max_coords is not None and max_coords < x0.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(x0.size, size=max_coords, replace=False)

    worst = 0.0
    for idx in coords:
        shifted = x0.copy()
        shifted.flat[idx] += epsilon
        f_plus = float(scalar_function(Tensor(shifted)).data)
        shifted.flat[idx] -= 2.0 * epsilon
        f_minus = float(scalar_function(Tensor(shifted)).data)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite function value at probe coordinate {int(idx)}")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
