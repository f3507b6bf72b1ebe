"""Minimal reverse-mode autodiff over 2-D float64 arrays.

Every value is a :class:`Tensor` holding a ``(rows, cols)`` array. Operations
record their parents and a backward closure only when some input requires a
gradient, so inference runs without building a tape. :func:`backpropagate`
walks the reachable nodes in reverse construction order and accumulates into
the :class:`Parameter` leaves.

Untaped affine maps use a non-BLAS ``einsum`` kernel: its per-row result does
not depend on the row's position or on how many rows share the call (a BLAS
call on a single row takes a different code path), which is what makes set
pooling bitwise permutation invariant at inference. Taped forward passes and
all backward passes use BLAS for speed.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import warnings
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from skelprompt.errors import NonFiniteError, ShapeError

_node_ids = itertools.count()
_local = threading.local()

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class DegenerateCosineWarning(RuntimeWarning):
    """Cosine similarity requested for a zero-length vector."""


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "const",
        parents: tuple[Tensor, ...] = (),
        backward: Backward | None = None,
    ) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(op)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward
        self._id = next(_node_ids)

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"


class Parameter(Tensor):
    """Learnable leaf with its own gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data) -> None:
        # Own the buffer: optimizer steps update it in place.
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, op="param")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(data) -> Tensor:
    return Tensor(data)


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: Backward) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, parents, backward)
    return Tensor(data, False, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {b.shape} onto {a.shape}")


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b, where b may broadcast along rows and/or columns."""
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b, where b may broadcast."""
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, "mul", (a, b), lambda g: (g * bd, _unbroadcast(g * ad, b.shape)))


def scale(u: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _node(u.data * factor, "scale", (u,), lambda g: (g * factor,))


def neg(u: Tensor) -> Tensor:
    return scale(u, -1.0)


def exp(u: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(u.data)
    return _node(out, "exp", (u,), lambda g: (g * out,))


def reciprocal(u: Tensor) -> Tensor:
    with np.errstate(divide="ignore", over="ignore"):
        out = 1.0 / u.data
    return _node(out, "reciprocal", (u,), lambda g: (-g * out * out,))


def relu(u: Tensor) -> Tensor:
    mask = u.data > 0
    return _node(np.where(mask, u.data, 0.0), "relu", (u,), lambda g: (g * mask,))


def transpose(u: Tensor) -> Tensor:
    return _node(np.ascontiguousarray(u.data.T), "transpose", (u,), lambda g: (g.T,))


def sum_all(u: Tensor) -> Tensor:
    shape = u.shape
    return _node(np.array([[u.data.sum()]]), "sum", (u,), lambda g: (np.full(shape, g[0, 0]),))


# -- linear algebra ------------------------------------------------------------


def affine(u: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``u @ W.T + b`` with ``W`` shaped (out, in)."""
    if u.cols != W.cols:
        raise ShapeError(f"affine: input {u.shape} incompatible with weight {W.shape}")
    taped = grad_enabled() and (u.requires_grad or W.requires_grad or (b is not None and b.requires_grad))
    out = u.data @ W.data.T if taped else np.einsum("ij,kj->ik", u.data, W.data, optimize=False)
    if b is None:
        ud, Wd = u.data, W.data
        return _node(out, "affine", (u, W), lambda g: (g @ Wd, g.T @ ud))
    if b.shape != (1, W.rows):
        raise ShapeError(f"affine: bias {b.shape} incompatible with weight {W.shape}")
    out += b.data
    ud, Wd = u.data, W.data
    return _node(
        out, "affine", (u, W, b), lambda g: (g @ Wd, g.T @ ud, g.sum(axis=0, keepdims=True))
    )


def layer_normalize(u: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row to zero mean and unit variance, then scale and shift."""
    if gain.shape != (1, u.cols) or bias.shape != (1, u.cols):
        raise ShapeError(f"layer_normalize: gain {gain.shape} / bias {bias.shape} vs input {u.shape}")
    n = u.cols
    centered = u.data - u.data.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.einsum("ij,ij->i", centered, centered)[:, None] / n + eps)
    xhat = centered * inv_std
    gd = gain.data

    def backward(g):
        gx = g * gd
        proj = np.einsum("ij,ij->i", gx, xhat)[:, None] / n
        gx -= gx.mean(axis=1, keepdims=True)
        gx -= xhat * proj
        gx *= inv_std
        return gx, np.einsum("ij,ij->j", g, xhat)[None, :], g.sum(axis=0, keepdims=True)

    return _node(xhat * gd + bias.data, "layer_normalize", (u, gain, bias), backward)


def row_normalize(u: Tensor) -> Tensor:
    """Scale each row to unit L2 norm; zero rows stay zero (with a warning)."""
    norms = np.sqrt((u.data * u.data).sum(axis=1, keepdims=True))
    zero = norms == 0
    if zero.any():
        warnings.warn(
            f"{int(zero.sum())} zero-length row(s) in cosine similarity", DegenerateCosineWarning, stacklevel=2
        )
    safe = np.where(zero, 1.0, norms)
    out = np.where(zero, 0.0, u.data / safe)

    def backward(g):
        gu = (g - out * (g * out).sum(axis=1, keepdims=True)) / safe
        return (np.where(zero, 0.0, gu),)

    return _node(out, "row_normalize", (u,), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two 1xE vectors, as a 1x1 tensor.

    A zero-length operand yields 0 and a :class:`DegenerateCosineWarning`.
    """
    if a.shape != b.shape or a.rows != 1:
        raise ShapeError(f"cosine_similarity expects two 1xE vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data[0], b.data[0]
    na, nb = np.sqrt(ad @ ad), np.sqrt(bd @ bd)
    if na == 0 or nb == 0:
        warnings.warn("cosine similarity of a zero-length vector", DegenerateCosineWarning, stacklevel=2)
        return Tensor(np.zeros((1, 1)))
    c = float(ad @ bd) / (na * nb)

    def backward(g):
        s = g[0, 0]
        ga = s * (bd / (na * nb) - c * ad / (na * na))
        gb = s * (ad / (na * nb) - c * bd / (nb * nb))
        return ga.reshape(1, -1), gb.reshape(1, -1)

    return _node(np.array([[c]]), "cosine_similarity", (a, b), backward)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between the rows of a (NxE) and b (MxE)."""
    if a.cols != b.cols:
        raise ShapeError(f"cosine_matrix: {a.shape} vs {b.shape}")
    return affine(row_normalize(a), row_normalize(b))


# -- pooling and indexing --------------------------------------------------------


def set_max_pool(rows: Tensor) -> Tensor:
    """Channel-wise max over all rows (JxS -> 1xS).

    The gradient of each channel goes to the lowest-index maximizing row.
    """
    if rows.rows == 0:
        raise ShapeError("set_max_pool needs at least one row")
    arg = rows.data.argmax(axis=0)
    cols = np.arange(rows.cols)
    shape = rows.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[arg, cols] = g[0]
        return (grad,)

    return _node(rows.data.max(axis=0, keepdims=True), "set_max_pool", (rows,), backward)


def _segment_starts(lengths: Sequence[int], total: int, op: str) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.size == 0 or (lengths < 1).any():
        raise ShapeError(f"{op}: every segment needs at least one row")
    if lengths.sum() != total:
        raise ShapeError(f"{op}: segment lengths sum to {lengths.sum()}, input has {total} rows")
    return np.concatenate([[0], np.cumsum(lengths)[:-1]])


def segment_max_pool(rows: Tensor, lengths: Sequence[int]) -> Tensor:
    """Channel-wise max within consecutive row segments (sum(lengths)xS -> BxS)."""
    starts = _segment_starts(lengths, rows.rows, "segment_max_pool")
    out = np.maximum.reduceat(rows.data, starts, axis=0)
    ends = np.append(starts[1:], rows.rows)
    args = np.stack([s + rows.data[s:e].argmax(axis=0) for s, e in zip(starts, ends)])
    cols = np.arange(rows.cols)
    shape = rows.shape

    def backward(g):
        grad = np.zeros(shape)
        for b in range(len(starts)):
            grad[args[b], cols] = g[b]
        return (grad,)

    return _node(out, "segment_max_pool", (rows,), backward)


def segment_mean(rows: Tensor, lengths: Sequence[int]) -> Tensor:
    """Mean of consecutive row segments (sum(lengths)xE -> BxE)."""
    starts = _segment_starts(lengths, rows.rows, "segment_mean")
    counts = np.asarray(lengths, dtype=np.float64).reshape(-1, 1)
    out = np.add.reduceat(rows.data, starts, axis=0) / counts
    reps = np.asarray(lengths, dtype=np.int64)
    return _node(out, "segment_mean", (rows,), lambda g: (np.repeat(g / counts, reps, axis=0),))


def gather_rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise ShapeError(f"gather_rows: index outside [0, {table.rows})")
    shape = table.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _node(table.data[idx], "gather_rows", (table,), backward)


# -- losses --------------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_rows(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Sum over rows of ``-log softmax(row)[target]`` (NxC -> 1x1)."""
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.rows,):
        raise ShapeError(f"cross_entropy_rows: {len(t)} targets for {logits.rows} rows")
    if t.size and (t.min() < 0 or t.max() >= logits.cols):
        raise ValueError(f"target index outside [0, {logits.cols})")
    logp = _log_softmax(logits.data)
    rows = np.arange(logits.rows)
    loss = -logp[rows, t].sum()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        return (grad * g[0, 0],)

    return _node(np.array([[loss]]), "cross_entropy", (logits,), backward)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Cross-entropy of a single 1xC logit row against a class index."""
    if logits.rows != 1:
        raise ShapeError(f"softmax_cross_entropy expects 1xC logits, got {logits.shape}")
    if logits.cols < 2:
        raise ValueError(f"need at least 2 classes, got {logits.cols}")
    if not 0 <= target < logits.cols:
        raise ValueError(f"target {target} outside [0, {logits.cols})")
    return cross_entropy_rows(logits, [target])


# -- tape traversal ------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root._id}
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        nodes.append(node)
        for parent in node._parents:
            if parent.requires_grad and parent._id not in seen:
                seen.add(parent._id)
                stack.append(parent)
    nodes.sort(key=lambda n: n._id, reverse=True)
    return nodes


def backpropagate(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``.

    Gradients add to whatever is already in the buffers; call
    :meth:`ParamStore.zero_grad` between steps.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {loss._id: np.ones((1, 1))}
    with np.errstate(over="ignore", invalid="ignore"):
        _run_backward(loss, pending)


def _run_backward(loss: Tensor, pending: dict[int, np.ndarray]) -> None:
    for node in _reachable(loss):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(node.op, "backward")
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg


# -- parameters and optimizer --------------------------------------------------


class ParamStore:
    """Ordered collection of named parameters plus optimizer state."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}
        self.step = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One adaptive-moment update of every parameter from its gradient."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.items():
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p.data)
            store._v[name] = np.zeros_like(p.data)
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
