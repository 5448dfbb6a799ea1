"""Reverse-mode differentiable kernels over dense 2-D float64 matrices.

Everything in this package trains through the operations defined here.
A :class:`Tensor` wraps a numpy array and remembers how it was produced;
calling :meth:`Tensor.backward` on a scalar result walks the recorded
graph in reverse topological order and accumulates gradients into every
reachable tensor with ``requires_grad=True``.

The op set is deliberately small: matrix product, broadcasting add/mul,
row-wise softmax / KL / cross-entropy, cosine similarity, layer norm,
GELU, and a few structural ops (transpose, row gather, row/column
concatenation, column slicing). All arithmetic is double precision.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, DomainError, ShapeError

# Probabilities are clamped to this floor before any log; see row_kl.
PROB_FLOOR = 1e-12


def _as_matrix(data) -> np.ndarray:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


class Tensor:
    """A 2-D float64 matrix node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Backpropagate from a scalar (1x1) result."""
        if self.data.shape != (1, 1):
            raise ShapeError(f"backward() needs a scalar result, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.accumulate_grad(np.ones((1, 1)))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for composite code; all graph logic lives in the
    # module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable (or deliberately frozen) leaf tensor.

    The gradient buffer is always allocated so freezing contracts can be
    checked by inspecting it: a frozen parameter's buffer must stay all
    zero across a training step.
    """

    __slots__ = ("_trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self._trainable = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = flag
        self.requires_grad = flag


def _wrap(out: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    """Finalize an op result: propagate requires_grad from its parents."""
    t = Tensor(out)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        t.requires_grad = True
        t._parents = live
    return t


def constant(data) -> Tensor:
    return Tensor(data)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    res = _wrap(out, (a, b))
    if res.requires_grad:
        def _bw():
            g = res.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g, b.shape))
        res._backward = _bw
    return res


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting; b may be a float."""
    if isinstance(b, (int, float)):
        a = _coerce(a)
        out = a.data * float(b)
        res = _wrap(out, (a,))
        if res.requires_grad:
            scalar = float(b)
            def _bw():
                a.accumulate_grad(res.grad * scalar)
            res._backward = _bw
        return res
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    res = _wrap(out, (a, b))
    if res.requires_grad:
        def _bw():
            g = res.grad
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(g * a.data, b.shape))
        res._backward = _bw
    return res


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    res = _wrap(out, (a, b))
    if res.requires_grad:
        def _bw():
            g = res.grad
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        res._backward = _bw
    return res


def transpose(a: Tensor) -> Tensor:
    a = _coerce(a)
    res = _wrap(a.data.T.copy(), (a,))
    if res.requires_grad:
        def _bw():
            a.accumulate_grad(res.grad.T)
        res._backward = _bw
    return res


def div_by_scalar(x: Tensor, s: Tensor) -> Tensor:
    """x / s for a 1x1 tensor s; differentiable in both arguments."""
    x, s = _coerce(x), _coerce(s)
    if s.shape != (1, 1):
        raise ShapeError(f"divisor must be 1x1, got {s.shape}")
    sv = s.item()
    out = x.data / sv
    res = _wrap(out, (x, s))
    if res.requires_grad:
        def _bw():
            g = res.grad
            if x.requires_grad:
                x.accumulate_grad(g / sv)
            if s.requires_grad:
                s.accumulate_grad(np.array([[-(g * x.data).sum() / (sv * sv)]]))
        res._backward = _bw
    return res


def sum_all(x: Tensor) -> Tensor:
    x = _coerce(x)
    res = _wrap(np.array([[x.data.sum()]]), (x,))
    if res.requires_grad:
        def _bw():
            x.accumulate_grad(np.full_like(x.data, res.grad[0, 0]))
        res._backward = _bw
    return res


def mean_rows(x: Tensor) -> Tensor:
    """Column means: (N, D) -> (1, D)."""
    x = _coerce(x)
    n = x.rows
    res = _wrap(x.data.mean(axis=0, keepdims=True), (x,))
    if res.requires_grad:
        def _bw():
            x.accumulate_grad(np.repeat(res.grad / n, n, axis=0))
        res._backward = _bw
    return res


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by index; backward scatter-adds into the source."""
    x = _coerce(x)
    idx = np.asarray(indices, dtype=np.intp)
    res = _wrap(x.data[idx].copy(), (x,))
    if res.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            np.add.at(g, idx, res.grad)
            x.accumulate_grad(g)
        res._backward = _bw
    return res


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_coerce(p) for p in parts]
    cols = parts[0].cols
    for p in parts[1:]:
        if p.cols != cols:
            raise ShapeError(f"row concat needs equal widths: {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=0)
    res = _wrap(out, parts)
    if res.requires_grad:
        offsets = np.cumsum([0] + [p.rows for p in parts])
        def _bw():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.accumulate_grad(res.grad[lo:hi])
        res._backward = _bw
    return res


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_coerce(p) for p in parts]
    rows = parts[0].rows
    for p in parts[1:]:
        if p.rows != rows:
            raise ShapeError(f"column concat needs equal heights: {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    res = _wrap(out, parts)
    if res.requires_grad:
        offsets = np.cumsum([0] + [p.cols for p in parts])
        def _bw():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    p.accumulate_grad(res.grad[:, lo:hi])
        res._backward = _bw
    return res


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _coerce(x)
    if not (0 <= start < stop <= x.cols):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for shape {x.shape}")
    res = _wrap(x.data[:, start:stop].copy(), (x,))
    if res.requires_grad:
        def _bw():
            g = np.zeros_like(x.data)
            g[:, start:stop] = res.grad
            x.accumulate_grad(g)
        res._backward = _bw
    return res


# tanh-form GELU; smooth everywhere, which keeps finite-difference
# gradient checks clean.
_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    x = _coerce(x)
    z = x.data
    u = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(u)
    out = 0.5 * z * (1.0 + t)
    res = _wrap(out, (x,))
    if res.requires_grad:
        def _bw():
            du = _GELU_C * (1.0 + 3 * 0.044715 * z ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t ** 2) * du
            x.accumulate_grad(res.grad * local)
        res._backward = _bw
    return res


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of x / temperature, computed with max-subtraction."""
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    x = _coerce(x)
    z = x.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    res = _wrap(y, (x,))
    if res.requires_grad:
        def _bw():
            g = res.grad
            inner = (g * y).sum(axis=1, keepdims=True)
            x.accumulate_grad(y * (g - inner) / temperature)
        res._backward = _bw
    return res


def _check_same_shape(p: Tensor, q: Tensor, op: str) -> None:
    if p.shape != q.shape:
        raise ShapeError(f"{op} shape mismatch: {p.shape} vs {q.shape}")


def row_kl(p_target: Tensor, q_model: Tensor) -> Tensor:
    """Mean over rows of sum_i p*ln(p/q), with 0*ln(0/q) = 0.

    q is clamped below at PROB_FLOOR before the division; entries at or
    below the floor receive no gradient through the log.
    """
    p, q = _coerce(p_target), _coerce(q_model)
    _check_same_shape(p, q, "row_kl")
    n = p.rows
    qc = np.maximum(q.data, PROB_FLOOR)
    mask = p.data > 0.0
    terms = np.where(mask, p.data * (np.log(np.maximum(p.data, PROB_FLOOR)) - np.log(qc)), 0.0)
    res = _wrap(np.array([[terms.sum() / n]]), (p, q))
    if res.requires_grad:
        def _bw():
            g = res.grad[0, 0] / n
            if q.requires_grad:
                qgrad = np.where(q.data > PROB_FLOOR, -p.data / qc, 0.0)
                q.accumulate_grad(g * qgrad)
            if p.requires_grad:
                pgrad = np.where(mask, np.log(np.maximum(p.data, PROB_FLOOR)) - np.log(qc) + 1.0, 0.0)
                p.accumulate_grad(g * pgrad)
        res._backward = _bw
    return res


def row_cross_entropy(p_target: Tensor, q_model: Tensor) -> Tensor:
    """Mean over rows of -sum_i p*ln(q), with q clamped at PROB_FLOOR."""
    p, q = _coerce(p_target), _coerce(q_model)
    _check_same_shape(p, q, "row_cross_entropy")
    n = p.rows
    qc = np.maximum(q.data, PROB_FLOOR)
    logq = np.log(qc)
    res = _wrap(np.array([[-(p.data * logq).sum() / n]]), (p, q))
    if res.requires_grad:
        def _bw():
            g = res.grad[0, 0] / n
            if q.requires_grad:
                qgrad = np.where(q.data > PROB_FLOOR, -p.data / qc, 0.0)
                q.accumulate_grad(g * qgrad)
            if p.requires_grad:
                p.accumulate_grad(g * (-logq))
        res._backward = _bw
    return res


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale every row to unit L2 norm; zero-norm rows are rejected."""
    x = _coerce(x)
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    bad = np.nonzero(norms.reshape(-1) <= 1e-12)[0]
    if bad.size:
        raise DegenerateInputError(f"row {int(bad[0])} has near-zero norm; cannot normalize")
    u = x.data / norms
    res = _wrap(u, (x,))
    if res.requires_grad:
        def _bw():
            g = res.grad
            proj = (g * u).sum(axis=1, keepdims=True)
            x.accumulate_grad((g - proj * u) / norms)
        res._backward = _bw
    return res


def cosine_similarity_matrix(x: Tensor, y: Tensor) -> Tensor:
    """out[i][j] = cos(x_i, y_j); composed from row normalization + matmul."""
    x, y = _coerce(x), _coerce(y)
    if x.cols != y.cols:
        raise ShapeError(f"cosine similarity width mismatch: {x.shape} vs {y.shape}")
    return matmul(l2_normalize_rows(x), transpose(l2_normalize_rows(y)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine map.

    gain and bias are (1, D) tensors; gradients flow to x, gain and bias.
    """
    if eps <= 0:
        raise DomainError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.cols
    if gain.data.size != d or bias.data.size != d:
        raise ShapeError(
            f"layer_norm affine length mismatch: x has {d} columns, "
            f"gain {gain.data.size}, bias {bias.data.size}")
    g_row = gain.data.reshape(1, d)
    b_row = bias.data.reshape(1, d)
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    res = _wrap(xhat * g_row + b_row, (x, gain, bias))
    if res.requires_grad:
        def _bw():
            gr = res.grad
            if gain.requires_grad:
                gain.accumulate_grad((gr * xhat).sum(axis=0, keepdims=True).reshape(gain.shape))
            if bias.requires_grad:
                bias.accumulate_grad(gr.sum(axis=0, keepdims=True).reshape(bias.shape))
            if x.requires_grad:
                dxhat = gr * g_row
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                x.accumulate_grad((dxhat - m1 - xhat * m2) * inv)
        res._backward = _bw
    return res


def one_hot(labels, num_classes: int) -> Tensor:
    """Constant one-hot rows for integer class labels."""
    ids = np.asarray(labels, dtype=np.intp).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise DomainError(f"labels out of range [0, {num_classes})")
    m = np.zeros((ids.size, num_classes))
    m[np.arange(ids.size), ids] = 1.0
    return Tensor(m)


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    targets = one_hot(labels, logits.cols)
    if targets.rows != logits.rows:
        raise ShapeError(f"{targets.rows} labels for {logits.rows} logit rows")
    return row_cross_entropy(targets, row_softmax(logits))
