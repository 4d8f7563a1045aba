"""Dense float64 tensors with a reverse-mode gradient tape.

Everything trainable in this package (conv layers, the personalizer, both
losses, the downstream classifiers) runs on the ops in this module, so a
single finite-difference harness (`grad_check`) verifies all of them.

Conventions:
  * values are row-major ``np.float64`` arrays; non-finite entries are
    rejected whenever a tensor is constructed, so no op can silently
    propagate NaN/Inf,
  * tensors produced by ops are treated as immutable; parameter leaves
    (``requires_grad=True``) are the one exception -- optimizers and
    `grad_check` update their ``.data`` in place,
  * ``backward()`` walks the tape once in reverse topological order and
    accumulates into ``.grad`` (same shape as the value).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteValueError(ValueError):
    """Raised when NaN/Inf values reach an op boundary."""


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when `grad_check` cannot probe a parameter entry."""


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError(f"non-finite values at op boundary '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(arr: np.ndarray, op: str, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(arr, op=op)
        out = Tensor(arr, requires_grad=True, op=op, parents=tuple(parents))
        out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add a backward contribution; `owned` skips the defensive copy.

        Pass owned=True only for freshly computed arrays -- adopting a view
        of an upstream grad buffer would corrupt later accumulations.
        """
        if self.grad is None:
            if not owned:
                g = np.array(g, dtype=np.float64)
            if g.shape != self.data.shape:
                g = np.broadcast_to(g, self.data.shape).copy()
            self.grad = g
        else:
            self.grad += g

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    # -- autodiff --------------------------------------------------------------

    def backward(self) -> None:
        """Reverse pass from a scalar root; visits each tape node once."""
        if self.data.shape != ():
            raise ShapeMismatchError("backward() requires a scalar root")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, mul(_wrap(other), Tensor(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, Tensor(-1.0)))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order via iterative DFS (tape can be wide)."""
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
    order.reverse()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (undo numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise / broadcast ops ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        arr = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"add: {a.shape} + {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(arr, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        arr = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatchError(f"mul: {a.shape} * {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return Tensor._result(arr, "mul", (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2D@2D, 2D@1D and 1D@2D."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.ndim + bd.ndim < 3:
        raise ShapeMismatchError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner extents differ, {ad.shape} @ {bd.shape}")
    arr = ad @ bd

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ bd.T, owned=True)
            if b.requires_grad:
                b._accumulate(ad.T @ g, owned=True)
        elif ad.ndim == 2:  # (m,k) @ (k,) -> (m,)
            if a.requires_grad:
                a._accumulate(np.outer(g, bd), owned=True)
            if b.requires_grad:
                b._accumulate(ad.T @ g, owned=True)
        else:  # (k,) @ (k,n) -> (n,)
            if a.requires_grad:
                a._accumulate(bd @ g, owned=True)
            if b.requires_grad:
                b._accumulate(np.outer(ad, g), owned=True)

    return Tensor._result(arr, "matmul", (a, b), backward)


def affine_rows(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map: x @ w.T (+ b). One fused allocation.

    `w` is (out, in); `b`, when given, is (out,). This is the workhorse for
    every linear layer, so it avoids the separate broadcast-add node.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeMismatchError(f"affine_rows: {xd.shape} @ {wd.shape}.T")
    if b is not None and b.data.shape != (wd.shape[0],):
        raise ShapeMismatchError(
            f"affine_rows: bias {b.data.shape} != ({wd.shape[0]},)")
    arr = xd @ wd.T
    if b is not None:
        arr += b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ wd, owned=True)
        if w.requires_grad:
            w._accumulate(g.T @ xd, owned=True)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0), owned=True)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(arr, "affine_rows", parents, backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose expects a 2D tensor")
    arr = a.data.T.copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return Tensor._result(arr, "transpose", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    arr = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return Tensor._result(arr, "reshape", (a,), backward)


def relu(a: Tensor) -> Tensor:
    arr = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0), owned=True)

    return Tensor._result(arr, "relu", (a,), backward)


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """max(x, slope*x); gradient is `slope` at x == 0."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    arr = np.where(a.data > 0.0, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(a.data > 0.0, 1.0, slope), owned=True)

    return Tensor._result(arr, "leaky_relu", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    arr = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * arr * (1.0 - arr), owned=True)

    return Tensor._result(arr, "sigmoid", (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        arr = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data, owned=True)

    return Tensor._result(arr, "log", (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    arr = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            inside = (a.data >= lo) & (a.data <= hi)
            a._accumulate(g * inside, owned=True)

    return Tensor._result(arr, "clamp", (a,), backward)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    arr = a.data.sum(axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy(), owned=True)
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(), owned=True)

    return Tensor._result(arr, "sum", (a,), backward)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise ShapeMismatchError("mean of empty tensor")
    return mul(tsum(a, axis=axis), Tensor(1.0 / n))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat of zero tensors")
    arr = np.concatenate([p.data for p in parts], axis=axis)
    widths = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return Tensor._result(arr, "concat", tuple(parts), backward)


# -- indexed / segmented ops -----------------------------------------------------


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows (axis 0) by integer index; repeats allowed."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError("gather_rows index must be 1D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError("gather_rows index out of range")
    arr = a.data[idx]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accumulate(acc, owned=True)

    return Tensor._result(arr, "gather_rows", (a,), backward)


def _check_segments(seg: np.ndarray, n: int, num_segments: int) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape != (n,):
        raise ShapeMismatchError(f"segment ids must be shape ({n},), got {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexError("segment id out of range")
    return seg


def segment_sum(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    seg = _check_segments(segments, a.data.shape[0], num_segments)
    arr = np.zeros((num_segments,) + a.data.shape[1:])
    np.add.at(arr, seg, a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[seg], owned=True)

    return Tensor._result(arr, "segment_sum", (a,), backward)


def segment_mean(a: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment mean; empty segments yield zero rows."""
    seg = _check_segments(segments, a.data.shape[0], num_segments)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    arr = np.zeros((num_segments,) + a.data.shape[1:])
    np.add.at(arr, seg, a.data)
    arr /= safe.reshape((-1,) + (1,) * (a.data.ndim - 1))

    def backward(g):
        if a.requires_grad:
            scale = 1.0 / safe[seg]
            a._accumulate(g[seg] * scale.reshape((-1,) + (1,) * (a.data.ndim - 1)), owned=True)

    return Tensor._result(arr, "segment_mean", (a,), backward)


def segment_softmax(scores: Tensor, segments: np.ndarray) -> Tensor:
    """Softmax within each segment (max-subtracted for stability).

    Segment ids need not be contiguous; empty input yields empty output.
    Outputs are in (0, 1] and sum to 1 within each segment.
    """
    if scores.data.ndim != 1:
        raise ShapeMismatchError("segment_softmax expects 1D scores")
    n = scores.data.shape[0]
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != (n,):
        raise ShapeMismatchError(f"segment ids must be shape ({n},), got {seg.shape}")
    if n == 0:
        return Tensor._result(np.zeros(0), "segment_softmax", (scores,), lambda g: None)
    if seg.min() < 0:
        raise IndexError("segment id out of range")
    width = int(seg.max()) + 1
    mx = np.full(width, -np.inf)
    np.maximum.at(mx, seg, scores.data)
    ex = np.exp(scores.data - mx[seg])
    denom = np.zeros(width)
    np.add.at(denom, seg, ex)
    arr = ex / denom[seg]

    def backward(g):
        if scores.requires_grad:
            dot = np.zeros(width)
            np.add.at(dot, seg, arr * g)
            scores._accumulate(arr * (g - dot[seg]), owned=True)

    return Tensor._result(arr, "segment_softmax", (scores,), backward)


def edge_matvec(maps: Tensor, vecs: Tensor) -> Tensor:
    """Apply a per-row square matrix to a per-row vector.

    `maps` holds one row-major d*d matrix per row; row k of the output is
    ``maps[k].reshape(d, d) @ vecs[k]``.
    """
    if maps.data.ndim != 2 or vecs.data.ndim != 2:
        raise ShapeMismatchError("edge_matvec expects 2D inputs")
    n, d = vecs.data.shape
    if maps.data.shape != (n, d * d):
        raise ShapeMismatchError(
            f"edge_matvec: maps {maps.data.shape} incompatible with vecs {vecs.data.shape}")
    m3 = maps.data.reshape(n, d, d)
    arr = np.matmul(m3, vecs.data[:, :, None])[:, :, 0]

    def backward(g):
        if maps.requires_grad:
            maps._accumulate((g[:, :, None] * vecs.data[:, None, :]).reshape(n, d * d), owned=True)
        if vecs.requires_grad:
            vecs._accumulate(np.matmul(g[:, None, :], m3)[:, 0, :], owned=True)

    return Tensor._result(arr, "edge_matvec", (maps, vecs), backward)


# -- verification ------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Compare tape gradients of a scalar `f()` against central differences.

    Returns the maximum relative error over every entry of every parameter,
    with denominator max(|analytic|, |numeric|, 1e-8). `f` must be
    deterministic; parameter data is perturbed in place and restored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.data.shape != ():
        raise ShapeMismatchError("grad_check expects a scalar-valued computation")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    def probe(pi: int, j: int) -> float:
        try:
            val = f().data.item()
        except NonFiniteValueError as exc:
            raise GradCheckError(
                f"non-finite objective while probing parameter {pi}, entry {j}") from exc
        if not np.isfinite(val):
            raise GradCheckError(
                f"non-finite objective while probing parameter {pi}, entry {j}")
        return val

    max_rel = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        aflat = analytic[pi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = probe(pi, j)
            flat[j] = orig - eps
            f_minus = probe(pi, j)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(aflat[j]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(aflat[j] - numeric) / denom)
    return max_rel
