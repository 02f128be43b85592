"""Dense tensors with reverse-mode differentiation.

Ops build an eager tape: every operation computes its forward value
immediately and records how to push gradients back to its parents.
Calling :func:`backward` on a scalar output walks the tape in reverse
topological order and accumulates gradients on the leaf tensors that
were created with ``requires_grad=True``.

The op set is deliberately small: matmul, add, elementwise multiply,
division, leaky-relu, sigmoid, exp, log, L2 norm, sum/mean over an
axis, concatenation, log-sum-exp, batch norm, and reshape. Supported
broadcasting is limited to scalars and column vectors ``(B, 1)``
against ``(B, d)``.

Training runs in float32; verification (finite differences) in
float64. Non-finite values produced by any op are a hard error.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes (or dtypes) are incompatible with the op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


_node_ids = itertools.count()

# Toggle for the per-node finiteness check. Kept on by default; matmuls
# dominate the cost so the check is cheap in practice.
strict_finite = True


class Tensor:
    """A numpy array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf", parents=(), backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A tape-free view of the same values (gradient flow severed)."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, id={self.node_id})"

    # Operator sugar; scalars are coerced to the tensor's dtype.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, scale(_coerce(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, op, parents, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(
        data,
        requires_grad=requires,
        op=op,
        parents=tuple(parents) if requires else (),
        backward=backward_fn if requires else None,
    )
    if strict_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite value in op '{op}' (node {out.node_id})")
    return out


def _check_same_dtype(op, *tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeMismatchError(f"op '{op}': mixed dtypes {sorted(map(str, dtypes))}")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of the limited broadcast)."""
    if grad.shape == tuple(shape):
        return grad
    if shape == ():
        return np.asarray(grad.sum(), dtype=grad.dtype)
    # (B, 1) against (B, d)
    g = grad
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    if g.shape != tuple(shape):
        raise ShapeMismatchError(f"cannot reduce grad {grad.shape} to {shape}")
    return g


def _broadcast_ok(a_shape, b_shape) -> bool:
    if a_shape == b_shape or a_shape == () or b_shape == ():
        return True
    if len(a_shape) == len(b_shape) == 2 and a_shape[0] == b_shape[0]:
        return a_shape[1] == 1 or b_shape[1] == 1
    return False


# ---------------------------------------------------------------------------
# op kinds
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} (nodes {a.node_id}, {b.node_id})")

    def back(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(a.data + b.data, "add", (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} (nodes {a.node_id}, {b.node_id})")

    def back(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return _make(a.data * b.data, "mul", (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("div", a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatchError(f"div: shapes {a.shape} and {b.shape} (nodes {a.node_id}, {b.node_id})")

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return [(a, ga), (b, gb)]

    return _make(a.data / b.data, "div", (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def back(g):
        return [(a, g * c)]

    return _make(a.data * c, "scale", (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatchError(
            f"matmul: shapes {a.shape} and {b.shape} (nodes {a.node_id}, {b.node_id})"
        )

    def back(g):
        g = np.asarray(g, dtype=ad.dtype)
        if ad.ndim == 2 and bd.ndim == 2:
            return [(a, g @ bd.T), (b, ad.T @ g)]
        if ad.ndim == 1 and bd.ndim == 1:  # dot -> scalar
            return [(a, g * bd), (b, g * ad)]
        if ad.ndim == 2 and bd.ndim == 1:  # (m,n)@(n,) -> (m,)
            return [(a, np.outer(g, bd)), (b, ad.T @ g)]
        # (n,)@(n,p) -> (p,)
        return [(a, bd @ g), (b, np.outer(ad, g))]

    return _make(ad @ bd, "matmul", (a, b), back)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    mask = x.data >= 0
    factor = np.where(mask, x.data.dtype.type(1.0), x.data.dtype.type(slope))

    def back(g):
        return [(x, g * factor)]

    return _make(x.data * factor, "leaky_relu", (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    z = np.exp(-np.abs(xd))  # overflow-free on both tails
    s = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype)

    def back(g):
        return [(x, g * s * (1.0 - s))]

    return _make(s, "sigmoid", (x,), back)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # the finite check rejects inf
        e = np.exp(x.data)

    def back(g):
        return [(x, g * e)]

    return _make(e, "exp", (x,), back)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def back(g):
        return [(x, g / x.data)]

    return _make(out, "log", (x,), back)


def l2norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=keepdims))

    def back(g):
        n = norm if keepdims or axis is None else np.expand_dims(norm, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        # Subgradient 0 at the origin.
        ratio = np.divide(x.data, n, out=np.zeros_like(x.data), where=n != 0)
        return [(x, gg * ratio)]

    return _make(norm, "l2norm", (x,), back)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is None:
            return [(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, np.broadcast_to(gg, x.shape).astype(x.data.dtype))]

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,), back)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]

    def back(g):
        if axis is None:
            return [(x, (np.broadcast_to(g, x.shape) / count).astype(x.data.dtype))]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, (np.broadcast_to(gg, x.shape) / count).astype(x.data.dtype))]

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), "mean", (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        pieces = np.split(g, bounds, axis=axis)
        return list(zip(tensors, pieces))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), back)


def reshape(x: Tensor, shape) -> Tensor:
    def back(g):
        return [(x, g.reshape(x.shape))]

    return _make(x.data.reshape(shape), "reshape", (x,), back)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got {x.shape}")

    def back(g):
        return [(x, g.T)]

    return _make(x.data.T.copy(), "transpose", (x,), back)


def logsumexp(x: Tensor, axis: int = -1, weights=None, keepdims: bool = False) -> Tensor:
    """ln(sum_j w_j * exp(x_j)) over `axis`, max-subtracted for stability.

    `weights` is a plain array (no gradient), entries >= 0 with a
    positive row sum; omit it for the unweighted case.
    """
    xd = x.data
    if weights is not None:
        weights = np.asarray(weights, dtype=xd.dtype)
        if weights.shape != xd.shape:
            raise ShapeMismatchError(f"logsumexp: weights {weights.shape} vs logits {xd.shape}")
        if np.any(weights < 0):
            raise ValueError("logsumexp: negative weight")
        # max over the supported entries only: zero-weight logits must
        # not shift the sum (and the result is exact when only one
        # unit-weight entry survives)
        support = weights > 0
        m = np.max(np.where(support, xd, -np.inf), axis=axis, keepdims=True)
        shifted = np.exp(np.where(support, xd - m, -np.inf)) * weights
    else:
        m = np.max(xd, axis=axis, keepdims=True)
        shifted = np.exp(xd - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = m + np.log(total)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    # softmax-style pull-back: d/dx_j = w_j exp(x_j) / sum
    soft = shifted / total

    def back(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(x, gg * soft)]

    return _make(out, "logsumexp", (x,), back)


def batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature normalization over the batch axis, no affine terms.

    Training mode normalizes with batch statistics and folds them into
    the running arrays in place; eval mode uses the frozen running
    statistics so inference is deterministic per instance.
    """
    xd = x.data
    if xd.ndim != 2:
        raise ShapeMismatchError(f"batch_norm expects a (batch, features) input, got {x.shape}")
    if training:
        mean = xd.mean(axis=0)
        var = xd.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        y = (xd - mean) * inv_std
        n = xd.shape[0]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def back(g):
            gy_sum = g.sum(axis=0)
            gy_dot_y = (g * y).sum(axis=0)
            gx = (inv_std / n) * (n * g - gy_sum - y * gy_dot_y)
            return [(x, gx.astype(xd.dtype))]

        return _make(y.astype(xd.dtype), "batch_norm", (x,), back)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    y = (xd - running_mean) * inv_std

    def back_eval(g):
        return [(x, (g * inv_std).astype(xd.dtype))]

    return _make(y.astype(xd.dtype), "batch_norm", (x,), back_eval)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def normalize_rows(x: Tensor) -> Tensor:
    """Rows scaled to unit L2 norm; zero rows are an error."""
    norms = l2norm(x, axis=1, keepdims=True)
    if np.any(norms.data == 0):
        row = int(np.argwhere(norms.data == 0)[0][0])
        raise ValueError(f"normalize_rows: zero-norm row {row}")
    return div(x, norms)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two 1-d tensors, in [-1, 1]."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"cosine_similarity: shapes {a.shape} and {b.shape}")
    na, nb = l2norm(a), l2norm(b)
    if na.item() == 0.0 or nb.item() == 0.0:
        raise ValueError("cosine_similarity: zero-norm input")
    return div(matmul(a, b), mul(na, nb))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(output: Tensor, seed=None) -> None:
    """Accumulate d(output)/d(leaf) into `.grad` of each trainable leaf.

    `seed` defaults to 1 for scalar outputs; non-scalar outputs need an
    explicit seed of the same shape.
    """
    if not output.requires_grad:
        raise ValueError("backward on a tensor with no trainable ancestors")
    if seed is None:
        if output.data.ndim != 0:
            raise ValueError(f"non-scalar output {output.shape} needs an explicit seed gradient")
        seed = np.ones((), dtype=output.data.dtype)
    else:
        seed = np.asarray(seed, dtype=output.data.dtype)
        if seed.shape != output.data.shape:
            raise ShapeMismatchError(f"seed {seed.shape} does not match output {output.shape}")

    # Reverse topological order over the requires_grad subgraph.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {output.node_id: seed}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:  # trainable leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
