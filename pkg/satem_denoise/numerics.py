"""Dense float64 tensors with a reverse-mode differentiation tape.

Every differentiable operation is an entry in ``OPS``: a forward function
mapping input arrays to ``(output, ctx)`` and a backward function mapping the
output gradient back to one gradient per input. ``apply`` runs the forward
pass, rejects non-finite results and, when any input requires a gradient,
records the node so that ``backward`` can replay the graph in reverse creation
order.
"""
import contextlib
import itertools
import logging
import threading
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """disable graph recording on the current thread"""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable[..., Tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[Optional[np.ndarray]]]


OPS: Dict[str, Op] = {}


def register_op(name: str, forward: Callable, backward: Callable) -> Op:
    """register an operation kind usable through ``apply``

    ``forward(*arrays, **attrs)`` returns ``(out, ctx)``;
    ``backward(grad, ctx, arrays, out, **attrs)`` returns a sequence with one
    gradient (or None) per input.
    """
    op = Op(name, forward, backward)
    OPS[name] = op
    return op


@dataclass
class _Node:
    op: Op
    inputs: Tuple["Tensor", ...]
    ctx: Any
    attrs: Dict[str, Any]


class Tensor(object):
    """
    Dense n-dimensional float64 array taking part in reverse-mode differentiation

    Parameters
    ----------
    data : array_like
        Values, copied to a row-major float64 array.
    requires_grad : bool
        Whether gradients are accumulated for this tensor.
    """

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        self.data = np.array(data, dtype=DTYPE, order="C")
        if _check:
            check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self._id = next(_ids)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """a constant view of the same values, cut from the graph"""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._node = None
        out._id = next(_ids)
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # operators
    def __add__(self, other):
        return apply("add", self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return apply("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return apply("mul", self, -1.0)

    def __sub__(self, other):
        return apply("add", self, -as_tensor(other))

    def __rsub__(self, other):
        return apply("add", -self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return apply("mul", self, exp(-log(other)))
        return apply("mul", self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data) -> Tensor:
    """a leaf tensor that accumulates gradients"""
    return Tensor(data, requires_grad=True)


def check_finite(values: np.ndarray, where: str):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {where}")


def apply(kind: str, *inputs: ArrayLike, **attrs) -> Tensor:
    """run one registered operation and record it on the tape"""
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"Invalid op kind: {kind}, expected one of {sorted(OPS)}") from None

    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = [t.data for t in tensors]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        try:
            out, ctx = op.forward(*arrays, **attrs)
        except ValueError as exc:
            raise ShapeError(f"{kind}: {exc}") from exc
    check_finite(out, kind)

    result = Tensor(out, _check=False)
    if grad_enabled() and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        result._node = _Node(op, tensors, ctx, attrs)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _reduced_like(grad: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    """broadcast the gradient of a reduction back to the input shape"""
    if axis is not None and not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


def _count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


# --------- elementwise --------- #
register_op(
    "add",
    lambda a, b: (a + b, None),
    lambda g, ctx, xs, out: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)),
)
register_op(
    "mul",
    lambda a, b: (a * b, None),
    lambda g, ctx, xs, out: (
        _unbroadcast(g * xs[1], xs[0].shape),
        _unbroadcast(g * xs[0], xs[1].shape),
    ),
)
register_op("exp", lambda a: (np.exp(a), None), lambda g, ctx, xs, out: (g * out,))
register_op("log", lambda a: (np.log(a), None), lambda g, ctx, xs, out: (g / xs[0],))
register_op(
    "sigmoid",
    lambda a: (0.5 * (1.0 + np.tanh(0.5 * a)), None),
    lambda g, ctx, xs, out: (g * out * (1.0 - out),),
)
register_op(
    "relu", lambda a: (np.maximum(a, 0.0), None), lambda g, ctx, xs, out: (g * (xs[0] > 0),)
)
register_op("square", lambda a: (a * a, None), lambda g, ctx, xs, out: (2.0 * g * xs[0],))


# --------- linear algebra --------- #
def _matmul_forward(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    return a @ b, None


def _matmul_backward(g, ctx, xs, out):
    a, b = xs
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register_op("matmul", _matmul_forward, _matmul_backward)


# --------- structural --------- #
def _concat_backward(g, ctx, xs, out):
    edges = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return tuple(np.split(g, edges, axis=-1))


def _slice_forward(a, start, stop, axis=-1):
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return a[tuple(index)], tuple(index)


def _slice_backward(g, ctx, xs, out, **attrs):
    grad = np.zeros_like(xs[0])
    grad[ctx] = g
    return (grad,)


def _shift_forward(a):
    if a.ndim < 2:
        raise ValueError(f"shift needs a (..., T, C) operand, got {a.shape}")
    out = np.zeros_like(a)
    out[..., 1:, :] = a[..., :-1, :]
    return out, None


def _shift_backward(g, ctx, xs, out):
    grad = np.zeros_like(g)
    grad[..., :-1, :] = g[..., 1:, :]
    return (grad,)


register_op(
    "concat", lambda *xs: (np.concatenate(xs, axis=-1), None), _concat_backward
)
register_op("slice", _slice_forward, _slice_backward)
register_op(
    "reshape",
    lambda a, shape: (a.reshape(shape), None),
    lambda g, ctx, xs, out, **attrs: (g.reshape(xs[0].shape),),
)
register_op(
    "broadcast",
    lambda a, shape: (np.broadcast_to(a, shape).copy(), None),
    lambda g, ctx, xs, out, **attrs: (_unbroadcast(g, xs[0].shape),),
)
register_op("shift", _shift_forward, _shift_backward)


# --------- reductions --------- #
def _variance_forward(a, axis=None, keepdims=False):
    centered = a - a.mean(axis=axis, keepdims=True)
    return (centered * centered).mean(axis=axis, keepdims=keepdims), centered


def _variance_backward(g, centered, xs, out, axis=None, keepdims=False):
    n = _count(xs[0].shape, axis)
    return (_reduced_like(g, xs[0].shape, axis, keepdims) * 2.0 * centered / n,)


register_op(
    "sum",
    lambda a, axis=None, keepdims=False: (a.sum(axis=axis, keepdims=keepdims), None),
    lambda g, ctx, xs, out, axis=None, keepdims=False: (
        _reduced_like(g, xs[0].shape, axis, keepdims).copy(),
    ),
)
register_op(
    "mean",
    lambda a, axis=None, keepdims=False: (a.mean(axis=axis, keepdims=keepdims), None),
    lambda g, ctx, xs, out, axis=None, keepdims=False: (
        _reduced_like(g, xs[0].shape, axis, keepdims) / _count(xs[0].shape, axis),
    ),
)
register_op("variance", _variance_forward, _variance_backward)


# --------- functional helpers --------- #
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return apply("matmul", a, b)


def exp(a: ArrayLike) -> Tensor:
    return apply("exp", a)


def log(a: ArrayLike) -> Tensor:
    return apply("log", a)


def sigmoid(a: ArrayLike) -> Tensor:
    return apply("sigmoid", a)


def relu(a: ArrayLike) -> Tensor:
    return apply("relu", a)


def square(a: ArrayLike) -> Tensor:
    return apply("square", a)


def tanh(a: ArrayLike) -> Tensor:
    return 2.0 * sigmoid(2.0 * as_tensor(a)) - 1.0


def concat(tensors: Sequence[ArrayLike]) -> Tensor:
    return apply("concat", *tensors)


def slice_(a: ArrayLike, start: Optional[int], stop: Optional[int], axis: int = -1) -> Tensor:
    return apply("slice", a, start=start, stop=stop, axis=axis)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    return apply("reshape", a, shape=tuple(shape))


def broadcast_to(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    return apply("broadcast", a, shape=tuple(shape))


def shift(a: ArrayLike) -> Tensor:
    return apply("shift", a)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", a, axis=axis, keepdims=keepdims)


def variance(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return apply("variance", a, axis=axis, keepdims=keepdims)


# --------- differentiation --------- #
def _reachable(loss: Tensor):
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        if t._node is not None:
            stack.extend(t._node.inputs)
    # parents are always created before their children
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor):
    """populate ``grad`` of every leaf reachable from a scalar ``loss``

    Leaf gradients accumulate (+=) across calls; call ``zero_grad`` in between
    to reset them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward on a constant loss, no gradients to populate")
        return

    grads = {loss._id: np.ones_like(loss.data)}
    for t in _reachable(loss):
        g = grads.pop(t._id, None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        arrays = [x.data for x in node.inputs]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            parts = node.op.backward(g, node.ctx, arrays, t.data, **node.attrs)
        assert len(parts) == len(node.inputs), f"{node.op.name}: gradient arity mismatch"
        for x, part in zip(node.inputs, parts):
            if part is None or not x.requires_grad:
                continue
            if part.shape != x.shape:
                part = _unbroadcast(part, x.shape)
            grads[x._id] = part if x._id not in grads else grads[x._id] + part


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.zero_grad()


def global_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """compare analytic gradients against central finite differences

    Parameters
    ----------
    f : callable
        Evaluates the scalar loss from the current parameter values.
    params : dict or sequence of Tensor
        Parameters to check; their values are perturbed in place and restored.
    h : float
        Finite difference step.
    max_entries : int, optional
        Check at most this many randomly chosen entries per parameter.

    Returns
    -------
    error : float
        max |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
    """
    if h <= 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    if not isinstance(params, Mapping):
        params = {str(i): p for i, p in enumerate(params)}

    with no_grad():
        first, second = f().item(), f().item()
    if first != second:
        raise NonDeterministicError(f"loss changed between evaluations: {first} != {second}")

    zero_grad(params.values())
    backward(f())
    rng = np.random.default_rng(seed)

    worst = 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            original = flat[i]
            with no_grad():
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            if err > worst:
                logger.debug("%s[%d]: analytic=%g numeric=%g err=%g", name, i, a, numeric, err)
                worst = err
    zero_grad(params.values())
    return float(worst)


# --------- parameter containers --------- #
@dataclass
class Component(object):
    """
    Base class for anything holding parameter tensors

    Tensor fields are parameters, Component fields and lists of Components are
    walked recursively; every other field is configuration.
    """

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[name] = value
            elif isinstance(value, Component):
                out.update(value.named_parameters(f"{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Component):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        zero_grad(self.parameters())

    def detached(self):
        """a copy sharing values whose tensors take no gradient"""
        changes = {}
        for f in fields(self):
            if not f.init:
                continue
            value = getattr(self, f.name)
            if isinstance(value, Tensor):
                changes[f.name] = value.detach()
            elif isinstance(value, Component):
                changes[f.name] = value.detached()
            elif isinstance(value, list) and value and isinstance(value[0], Component):
                changes[f.name] = [item.detached() for item in value]
        return replace(self, **changes)
