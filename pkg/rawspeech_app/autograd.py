'''
Minimal dense n-d tensor with reverse-mode differentiation.

Every op records its parents and a backward rule on the output tensor; the
tape is rebuilt on every forward pass. `backward` orders the recorded graph
topologically and runs each rule exactly once, in reverse.
'''
from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from rawspeech_app.constants import GRADCHECK_STEP
from rawspeech_app.exceptions import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

# === Global switches ===
_grad_enabled = True
_kink_trace: list | None = None


@contextmanager
def no_grad():
    '''Forward passes inside record no graph (evaluation, numeric probes)'''
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def trace_kinks():
    '''
    Collect the activation pattern of every non-smooth op (ReLU signs, max
    argmax positions) run inside the block.
    '''
    global _kink_trace
    previous = _kink_trace
    _kink_trace = []
    try:
        yield _kink_trace
    finally:
        _kink_trace = previous


def record_kink(tag: str, pattern: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append((tag, np.ascontiguousarray(pattern).tobytes()))


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f'Non-finite values produced by `{op}`')


# === Tensor ===

class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = ''):
        self.data = np.ascontiguousarray(np.array(data, dtype=DTYPE))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

        # Recorded graph links (empty for leaves)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ''

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError('item() needs a single-element tensor', self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f' {self.name!r}' if self.name else ''
        return f'Tensor{label}(shape={self.shape}, op={self._op or "leaf"}, requires_grad={self.requires_grad})'

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return reduce_max(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    '''
    Wrap an op result. The backward rule maps the output gradient to one
    gradient (or None) per parent.
    '''
    _ensure_finite(data, op)

    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=DTYPE)
    out.grad = None
    out.name = ''
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._op = op

    if _grad_enabled and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn

    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    '''Sum a broadcast gradient back down to `shape`'''
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f'Shape mismatch in `{op}`', a.shape, b.shape) from None


# === Elementwise binary ops ===

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), _backward, 'add')


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'sub')

    def _backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), _backward, 'sub')


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')

    def _backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_op(a.data * b.data, (a, b), _backward, 'mul')


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'div')

    def _backward(g):
        return (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return make_op(a.data / b.data, (a, b), _backward, 'div')


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), 'neg')


# === Linear algebra and shape ops ===

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError('Shape mismatch in `matmul`', a.shape, b.shape)

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_op(a.data @ b.data, (a, b), _backward, 'matmul')


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError('Cannot reshape', a.shape, tuple(shape)) from None

    return make_op(data, (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)

    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f'Invalid transpose axes {axes}', a.shape)

    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    if not tensors:
        raise ShapeError('concat needs at least one tensor')

    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        rest_a = tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]
        rest_b = t.shape[:axis] + t.shape[axis + 1:]
        if t.ndim != ndim or rest_a != rest_b:
            raise ShapeError(f'Shape mismatch in `concat` along axis {axis}', tensors[0].shape, t.shape)

    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, 'concat')


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shape = tensors[0].shape
    expanded = []
    for t in tensors:
        if t.shape != shape:
            raise ShapeError('Shape mismatch in `stack`', shape, t.shape)
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))

    return concat(expanded, axis=axis)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(a.data[index], (a,), _backward, 'slice')


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError('Cannot broadcast', a.shape, tuple(shape)) from None

    return make_op(data.copy(), (a,), lambda g: (unbroadcast(g, a.shape),), 'broadcast')


# === Reductions ===

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward, 'sum')


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    return div(reduce_sum(a, axis=axis, keepdims=keepdims), float(count))


def reduce_max(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    '''
    Gradient goes to a single argmax per slice; ties resolve to the lowest index.
    '''
    a = as_tensor(a)

    if axis is None:
        flat_idx = int(np.argmax(a.data))
        record_kink('max', np.array([flat_idx]))
        data = a.data.reshape(-1)[flat_idx]
        if keepdims:
            data = np.reshape(data, (1,) * a.ndim)

        def _backward(g):
            full = np.zeros(a.size)
            full[flat_idx] = np.reshape(g, -1)[0]
            return (full.reshape(a.shape),)

        return make_op(np.asarray(data), (a,), _backward, 'max')

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    record_kink('max', idx)
    data = np.take_along_axis(a.data, idx, axis=axis)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return make_op(data if keepdims else np.squeeze(data, axis=axis), (a,), _backward, 'max')


# === Elementwise unary ops ===

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), 'exp')


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g / (2 * out),), 'sqrt')


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * a.data, (a,), lambda g: (2 * a.data * g,), 'square')


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1 - out * out),), 'tanh')


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form stays finite for large |x|
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return make_op(out, (a,), lambda g: (g * out * (1 - out),), 'sigmoid')


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    record_kink('relu', mask)
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), 'relu')


# === Graph and backward ===

@dataclass
class Graph:
    '''Recorded tensors in topological order (inputs before the ops using them)'''
    nodes: list[Tensor] = field(default_factory=list)

    @property
    def operations(self) -> list[Tensor]:
        return [node for node in self.nodes if node._backward is not None]


def build_graph(root: Tensor) -> Graph:
    # Iterative post-order DFS, LSTM graphs are too deep for recursion
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    return Graph(nodes=order)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if grad.shape != tensor.shape:
        raise ShapeError('Gradient shape mismatch', tensor.shape, grad.shape)

    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=DTYPE)
    else:
        tensor.grad += grad


def backward(loss: Tensor) -> None:
    '''
    Fill `.grad` of every requires_grad tensor reachable from a scalar loss.
    Gradients accumulate additively across uses and across calls.
    '''
    if loss.size != 1:
        raise GraphError(f'backward needs a scalar loss, got shape {loss.shape}')

    if not loss.requires_grad:
        raise GraphError('No recorded graph: run a forward pass on tensors that require grad first')

    graph = build_graph(loss)

    # Intermediate grads are per-pass, leaves keep accumulating
    for node in graph.operations:
        node.grad = None

    _accumulate(loss, np.ones_like(loss.data))

    for node in reversed(graph.nodes):
        if node._backward is None or node.grad is None:
            continue

        grads = node._backward(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            _ensure_finite(grad, f'{node._op} backward')
            _accumulate(parent, np.asarray(grad, dtype=DTYPE))


# === Finite-difference gradient check ===

@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    skipped: int


def grad_check_report(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = GRADCHECK_STEP,
    coords: Iterable[int] | None = None,
) -> GradCheckResult:
    '''
    Compare d f / d x from `backward` against central differences
    (f(x + h e_i) - f(x - h e_i)) / 2h. Coordinates whose probes change the
    activation pattern of a non-smooth op are skipped.
    '''
    if step <= 0:
        raise ValueError(f'step must be positive, got {step}')

    x.requires_grad = True
    x.grad = None

    with trace_kinks() as base_pattern:
        out = f(x)

    if out.size != 1:
        raise GraphError(f'grad_check needs a scalar function, got shape {out.shape}')

    backward(out)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    indices = range(x.size) if coords is None else coords
    max_error, checked, skipped = 0.0, 0, 0

    with no_grad():
        for i in indices:
            original = flat[i]

            flat[i] = original + step
            with trace_kinks() as plus_pattern:
                f_plus = f(x).item()

            flat[i] = original - step
            with trace_kinks() as minus_pattern:
                f_minus = f(x).item()

            flat[i] = original

            if plus_pattern != base_pattern or minus_pattern != base_pattern:
                skipped += 1
                continue

            numeric = (f_plus - f_minus) / (2 * step)
            error = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            max_error = max(max_error, error)
            checked += 1

    return GradCheckResult(max_error=max_error, checked=checked, skipped=skipped)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = GRADCHECK_STEP, coords=None) -> float:
    '''Max relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)'''
    return grad_check_report(f, x, step=step, coords=coords).max_error


# === Parameter serialization ===

META_KEY = '__meta__'


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    '''name -> array archive (npz, row-major float64), with an optional JSON metadata blob'''
    path = Path(path)
    payload = {name: np.ascontiguousarray(value) for name, value in arrays.items()}
    payload[META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))

    with path.open('wb') as f:
        np.savez(f, **payload)

    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        arrays = {name: archive[name] for name in archive.files if name != META_KEY}
        meta = json.loads(str(archive[META_KEY])) if META_KEY in archive.files else {}

    return arrays, meta
