"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every backward rule is written in terms of ``Tensor`` operations, so running a
backward pass with ``create_graph=True`` records a new graph that can itself be
differentiated.  That is what makes Hessian-vector and mixed second-order
products available without finite differences.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import GraphError, NumericError, ShapeError

BCE_EPS = 1e-7

_local = threading.local()


def is_recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def recording(enabled: bool = True) -> Iterator[None]:
    previous = is_recording()
    _local.recording = enabled
    try:
        yield
    finally:
        _local.recording = previous


def no_grad():
    return recording(False)


def _check_finite(data: np.ndarray, op: str) -> None:
    # a NaN or Inf anywhere makes the sum non-finite
    if data.size and not math.isfinite(float(np.add.reduce(data, axis=None))):
        if not np.isfinite(data).all():
            raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """Immutable n-d array of float64 values, optionally linked into a tape."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op", "_untracked")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._untracked = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1).copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.flags.writeable = False
    out.data = data
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = op
    out._untracked = False
    if any(p.tracked for p in parents):
        if is_recording():
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._untracked = True
    elif any(p._untracked for p in parents):
        out._untracked = True
    return out


# ---------------------------------------------------------------- broadcasting


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes).reshape(shape)
    return _make(data, (x,), lambda g, need: (broadcast_to(g, x.shape),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    return _make(data, (x,), lambda g, need: (sum_to(g, x.shape),), "broadcast_to")


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g, need: (
            sum_to(g, a.shape) if need[0] else None,
            sum_to(g, b.shape) if need[1] else None,
        ),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, need: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "multiply")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g, need: (
            sum_to(mul(g, b), a.shape) if need[0] else None,
            sum_to(mul(g, a), b.shape) if need[1] else None,
        ),
        "multiply",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g, need: (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        ),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g, need: (transpose(g),), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(data, (a,), lambda g, need: (reshape(g, a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(a.data * mask.data, (a,), lambda g, need: (mul(g, mask),), "relu")


_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep saturated outputs strictly inside (0, 1)
    data = np.clip(data, _SIGMOID_LO, _SIGMOID_HI)

    def backward(g, need):
        return (mul(g, mul(out, add(1.0, neg(out)))),)

    out = _make(data, (a,), backward, "sigmoid")
    return out


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NumericError("reciprocal of zero")

    def backward(g, need):
        return (neg(mul(g, mul(out, out))),)

    out = _make(1.0 / a.data, (a,), backward, "reciprocal")
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g, need: (mul(g, reciprocal(a)),), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _make(np.clip(a.data, lo, hi), (a,), lambda g, need: (mul(g, mask),), "clamp")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _make(
            np.asarray(a.data.sum()),
            (a,),
            lambda g, need: (broadcast_to(reshape(g, (1,) * a.ndim), a.shape),),
            "sum",
        )
    axis = axis % a.ndim
    kept = tuple(1 if i == axis else s for i, s in enumerate(a.shape))
    return _make(
        a.data.sum(axis=axis),
        (a,),
        lambda g, need: (broadcast_to(reshape(g, kept), a.shape),),
        "sum",
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(sum(a, axis), 1.0 / n)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    data = a.data[tuple(index)]
    return _make(
        data,
        (a,),
        lambda g, need: (pad_axis(g, axis, start, a.shape[axis] - stop),),
        "slice",
    )


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    data = np.pad(a.data, widths)
    n = a.shape[axis]
    return _make(data, (a,), lambda g, need: (slice_axis(g, axis, before, before + n),), "pad")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g, need):
        return tuple(
            slice_axis(g, axis, int(bounds[k]), int(bounds[k + 1])) if need[k] else None
            for k in range(len(tensors))
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, backward, "concat")


def take(a: Tensor, index) -> Tensor:
    """Rows of ``a`` at ``index`` (axis 0)."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _make(a.data[index], (a,), lambda g, need: (scatter_add(g, index, n),), "take")


def scatter_add(a: Tensor, index, n: int) -> Tensor:
    """Zeros of length ``n`` along axis 0 with rows of ``a`` added at ``index``."""
    index = np.asarray(index, dtype=np.int64)
    data = np.zeros((n,) + a.shape[1:])
    np.add.at(data, index, a.data)
    return _make(data, (a,), lambda g, need: (take(g, index),), "scatter_add")


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Elementwise BCE.  Predictions are clamped to ``[BCE_EPS, 1 - BCE_EPS]``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bce: prediction {pred.shape} vs target {target.shape}")
    if np.any((pred.data < 0) | (pred.data > 1)):
        raise NumericError("bce prediction outside [0, 1]")
    if not np.all((target.data == 0) | (target.data == 1)):
        raise ValueError("bce targets must be 0 or 1")
    p = clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
    return neg(add(mul(target, log(p)), mul(add(1.0, neg(target)), log(add(1.0, neg(p))))))


# ---------------------------------------------------------------- differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Inputs that the output does not depend on get zero gradients.  With
    ``create_graph=True`` the returned gradients are themselves on the tape.
    """
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"gradient of a non-scalar output with shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape))
    elif grad_output.shape != output.shape:
        raise ShapeError(f"grad_output {grad_output.shape} vs output {output.shape}")
    if not output.tracked:
        if output._untracked:
            raise GraphError("output was computed with recording disabled")
        return [Tensor(np.zeros(x.shape)) for x in inputs]

    wanted = {id(x) for x in inputs}
    found: dict[int, Tensor] = {}
    pending: dict[int, Tensor] = {id(output): grad_output}
    with recording(create_graph):
        for node in reversed(_topo_order(output)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            if not node._parents:
                continue
            need = tuple(p.tracked for p in node._parents)
            for parent, pg in zip(node._parents, node._backward(g, need)):
                if pg is None or not parent.tracked:
                    continue
                key = id(parent)
                pending[key] = add(pending[key], pg) if key in pending else pg
    return [found[id(x)] if id(x) in found else Tensor(np.zeros(x.shape)) for x in inputs]


class ParamSet(Mapping[str, Tensor]):
    """Named tensors with a fixed, name-sorted flattening order."""

    def __init__(self, tensors: Mapping[str, Tensor | np.ndarray], requires_grad: bool = True):
        self._tensors: dict[str, Tensor] = {}
        for name in sorted(tensors):
            t = tensors[name]
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            self._tensors[name] = Tensor(arr, requires_grad=requires_grad)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    @property
    def size(self) -> int:
        return int(np.sum([t.size for t in self._tensors.values()], dtype=np.int64))

    def flatten(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def unflatten(self, vec: np.ndarray, requires_grad: bool = True) -> ParamSet:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"expected a vector of length {self.size}, got {vec.shape}")
        out, offset = {}, 0
        for name, t in self._tensors.items():
            out[name] = vec[offset : offset + t.size].reshape(t.shape)
            offset += t.size
        return ParamSet(out, requires_grad=requires_grad)

    def detached(self) -> ParamSet:
        return ParamSet(self._tensors, requires_grad=False)

    def to_json(self) -> dict:
        return {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in self._tensors.items()
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Mapping]) -> ParamSet:
        return cls(
            {
                name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
                for name, spec in obj.items()
            }
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._tensors.items())
        return f"ParamSet({inner})"


def backward(loss: Tensor, params: ParamSet) -> ParamSet:
    """d(loss)/d(p) for every tensor in ``params``, as a constant ParamSet."""
    grads = grad(loss, params.tensors())
    return ParamSet(dict(zip(params, grads)), requires_grad=False)


def _flat(tensors: Iterable[Tensor]) -> np.ndarray:
    parts = [t.data.reshape(-1) for t in tensors]
    return np.concatenate(parts) if parts else np.zeros(0)


def _dot_with(tensors: Sequence[Tensor], vec: np.ndarray) -> Tensor:
    total, offset = None, 0
    for t in tensors:
        piece = Tensor(vec[offset : offset + t.size].reshape(t.shape))
        offset += t.size
        term = sum(mul(t, piece))
        total = term if total is None else add(total, term)
    return total


def _checked_vector(v, n: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (n,):
        raise ShapeError(f"{what}: vector has length {v.size}, expected {n}")
    return v


class GradientGraph:
    """Gradient of a scalar loss kept on the tape, for repeated second-order products.

    Building the first-order graph once lets a Neumann iteration issue several
    Hessian-vector products and one mixed product without re-running the forward pass.
    """

    def __init__(self, loss: Tensor, wrt: Sequence[Tensor]):
        if loss.size != 1:
            raise ShapeError(f"second-order products need a scalar loss, got shape {loss.shape}")
        self.wrt = list(wrt)
        self.n = int(np.sum([t.size for t in self.wrt], dtype=np.int64))
        with recording(True):
            self.grads = grad(loss, self.wrt, create_graph=True)

    def gradient(self) -> np.ndarray:
        return _flat(self.grads)

    def vjp(self, v, targets: Sequence[Tensor]) -> np.ndarray:
        """``v^T d(grad)/d(targets)``; with ``targets == wrt`` this is H v."""
        v = _checked_vector(v, self.n, "second-order product")
        with recording(True):
            gv = _dot_with(self.grads, v)
            if not gv.tracked:
                out = np.zeros(int(np.sum([t.size for t in targets], dtype=np.int64)))
            else:
                out = _flat(grad(gv, targets))
        _check_finite(out, "second-order product")
        return out

    def hvp(self, v) -> np.ndarray:
        return self.vjp(v, self.wrt)


def hvp_operator(loss_fn: Callable[[ParamSet], Tensor], params: ParamSet) -> Callable[[np.ndarray], np.ndarray]:
    """``v -> H v`` for the Hessian of ``loss_fn`` at ``params`` (double backward)."""
    with recording(True):
        graph = GradientGraph(loss_fn(params), params.tensors())
    return graph.hvp


def hvp(loss_fn: Callable[[ParamSet], Tensor], params: ParamSet, v) -> np.ndarray:
    return hvp_operator(loss_fn, params)(v)


def mixed_vjp(
    loss_fn: Callable[[ParamSet, ParamSet], Tensor],
    theta: ParamSet,
    omega: ParamSet,
    v,
) -> np.ndarray:
    """``v^T d/d(omega) [d loss / d theta]`` as a flat vector over omega."""
    with recording(True):
        graph = GradientGraph(loss_fn(theta, omega), theta.tensors())
    return graph.vjp(v, omega.tensors())
