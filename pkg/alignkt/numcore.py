"""
Dense f64 tensors with tape-based reverse-mode differentiation.

Every op builds a new Tensor that remembers its parents and a closure that
pushes the output gradient back to them. A per-thread counter stamps each
node at creation time, so sorting reachable nodes by that stamp gives a
topological order without any recursion.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class NumericalError(ArithmeticError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


def _next_stamp() -> int:
    stamp = getattr(_state, 'stamp', 0) + 1
    _state.stamp = stamp
    return stamp


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    A row-major float64 array that can take part in a backward pass.

    Attributes:
        data: The values.
        requires_grad: Whether gradients are accumulated into `grad`.
        grad: Gradient buffer with the same shape as `data`, or None.
        name: Optional label (parameters carry their ParamStore key).
    """

    # ndarray (op) Tensor defers to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = 'leaf'
        self._stamp = _next_stamp()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f", name='{self.name}'" if self.name else ''
        return f"Tensor(shape={self.shape}, op='{self._op}'{label})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this tensor through the recorded graph.

        Args:
            grad: Seed gradient; defaults to ones (this tensor must be a scalar).

        Raises:
            ShapeError: If no seed is given for a non-scalar tensor.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        graph = Graph.from_root(self)
        seeds: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        graph.run(seeds)

    # ----- arithmetic -----

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> 'Tensor':
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> 'Tensor':
        return div(other, self)

    def __neg__(self) -> 'Tensor':
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> 'Tensor':
        return power(self, exponent)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, key) -> 'Tensor':
        return index(self, key)

    # ----- method forms of the unary/reduction ops -----

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> 'Tensor':
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> 'Tensor':
        return transpose(self, axes)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def sqrt(self) -> 'Tensor':
        return power(self, 0.5)

    def sigmoid(self) -> 'Tensor':
        return sigmoid(self)

    def tanh(self) -> 'Tensor':
        return tanh(self)

    def clamp(self, low: Optional[float] = None, high: Optional[float] = None) -> 'Tensor':
        return clamp(self, low, high)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, check it is finite and record it on the tape."""
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"Non-finite values produced by op '{op}'")
    out = Tensor(data)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass
class Graph:
    """
    Nodes reachable from a root, ordered from the root back to the leaves.

    Attributes:
        nodes: Tensors sorted by decreasing creation stamp.
    """
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> 'Graph':
        seen: Dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            stack.extend(node._parents)
        ordered = sorted(seen.values(), key=lambda t: t._stamp, reverse=True)
        return cls(nodes=ordered)

    def run(self, seeds: Dict[int, np.ndarray]) -> None:
        """Visit every node once, leaves accumulate into `.grad`."""
        pending: Dict[int, np.ndarray] = dict(seeds)
        for node in self.nodes:
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node._accumulate(grad)
                continue
            for parent, parent_grad in node._backward(grad):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


# ----- elementwise binary ops -----

def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]
    return _make(a.data + b.data, (a, b), 'add', backward)


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]
    return _make(a.data - b.data, (a, b), 'sub', backward)


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]
    return _make(a.data * b.data, (a, b), 'mul', backward)


def div(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return [(a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))]
    return _make(a.data / b.data, (a, b), 'div', backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return [(a, _unbroadcast(grad_a, a.shape)), (b, _unbroadcast(grad_b, b.shape))]
    return _make(a.data @ b.data, (a, b), 'matmul', backward)


# ----- elementwise unary ops -----

def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def backward(g):
        return [(a, g * exponent * a.data ** (exponent - 1))]
    return _make(out, (a,), 'pow', backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return [(a, g * out)]
    return _make(out, (a,), 'exp', backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return [(a, g / a.data)]
    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(a.data)
    return _make(out, (a,), 'log', backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return [(a, g * (1.0 - out * out))]
    return _make(out, (a,), 'tanh', backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return [(a, g * out * (1.0 - out))]
    return _make(out, (a,), 'sigmoid', backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        return [(a, g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))]
    return _make(out, (a,), 'softplus', backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return [(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))]
    return _make(out, (a,), 'gelu', backward)


def clamp(a: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    """Clip values; the gradient passes only where the input was inside the range."""
    out = np.clip(a.data, low, high)
    inside = np.ones_like(a.data, dtype=bool)
    if low is not None:
        inside &= a.data >= low
    if high is not None:
        inside &= a.data <= high

    def backward(g):
        return [(a, g * inside)]
    return _make(out, (a,), 'clamp', backward)


# ----- reductions and shape ops -----

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g, a.shape).copy())]
    return _make(np.asarray(out), (a,), 'sum', backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g):
        return [(a, g.reshape(a.shape))]
    return _make(a.data.reshape(shape), (a,), 'reshape', backward)


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return [(a, np.transpose(g, inverse))]
    return _make(np.transpose(a.data, axes), (a,), 'transpose', backward)


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate."""
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return [(a, full)]
    return _make(np.array(a.data[key]), (a,), 'index', backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    Look up rows of `table` (embedding lookup).

    Args:
        table: Tensor of shape (n, ...) .
        ids: Integer array of any shape with values in [0, n).

    Returns:
        Tensor of shape ids.shape + table.shape[1:].

    Raises:
        IndexError: If any id is out of range.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"Row id out of range for table '{table.name}' with {n} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return [(table, full)]
    return _make(table.data[ids], (table,), 'gather', backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return [(t, part) for t, part in zip(tensors, parts)]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, 'concat', backward)


def where(condition: np.ndarray, a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Select from `a` where condition holds, else from `b` (condition is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    condition = np.asarray(condition, dtype=bool)

    def backward(g):
        return [(a, _unbroadcast(np.where(condition, g, 0.0), a.shape)),
                (b, _unbroadcast(np.where(condition, 0.0, g), b.shape))]
    return _make(np.where(condition, a.data, b.data), (a, b), 'where', backward)


# ----- composite layers -----

def softmax_rows(m: Tensor, mask: Optional[np.ndarray] = None,
                 return_empty: bool = False):
    """
    Masked softmax over the last axis.

    Masked entries are exactly 0. Rows with no visible entry come out as all
    zeros instead of NaN.

    Args:
        m: Scores, any rank >= 1; the last axis is normalized.
        mask: Boolean visibility broadcastable to m.shape (True = visible).
        return_empty: Also return the boolean array flagging fully-masked rows.

    Returns:
        The weights, or (weights, empty_rows) when return_empty is set.

    Raises:
        ShapeError: If the mask does not broadcast to the score shape.
    """
    if mask is None:
        visible = np.ones(m.shape, dtype=bool)
    else:
        try:
            visible = np.broadcast_to(np.asarray(mask, dtype=bool), m.shape)
        except ValueError:
            raise ShapeError(f"Mask shape {np.shape(mask)} does not match scores {m.shape}")
    empty = ~visible.any(axis=-1)
    shifted = np.where(visible, m.data, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(visible, np.exp(np.where(visible, m.data, 0.0) - row_max), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    total = np.where(total > 0, total, 1.0)
    out = e / total

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return [(m, out * (g - inner))]
    result = _make(out, (m,), 'softmax', backward)
    if empty.any():
        logger.debug("softmax_rows: %d fully masked rows", int(empty.sum()))
    if return_empty:
        return result, empty
    return result


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """
    Row-wise cosine similarity over the last axis.

    Raises:
        ValueError: If any row has zero norm.
    """
    for t in (a, b):
        if np.any(np.linalg.norm(t.data, axis=-1) == 0.0):
            raise ValueError("Cosine similarity is undefined for a zero-norm vector")
    dot = (a * b).sum(axis=-1)
    norm_a = (a * a).sum(axis=-1).sqrt()
    norm_b = (b * b).sum(axis=-1).sqrt()
    return dot / (norm_a * norm_b)


# ----- parameters and optimization -----

class ParamStore:
    """
    Named learnable arrays.

    Parameters are registered once, in a fixed order; that order drives
    checkpoint layout and optimizer iteration.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._frozen: set = set()

    def add(self, name: str, data: ArrayLike, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"Parameter '{name}' already exists")
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        if not trainable:
            self._frozen.add(name)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"Parameter '{name}' does not exist")

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params.keys())

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def is_trainable(self, name: str) -> bool:
        return name not in self._frozen

    def freeze(self, name: str) -> None:
        self[name]
        self._frozen.add(name)

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        """
        Overwrite parameter values.

        Raises:
            ValueError: If names or shapes differ from the registered ones.
        """
        missing = set(self._params) ^ set(arrays)
        if missing:
            raise ValueError(f"Parameter names do not match: {sorted(missing)}")
        for name, array in arrays.items():
            target = self._params[name]
            if target.shape != np.shape(array):
                raise ValueError(f"Shape mismatch for '{name}': {target.shape} vs {np.shape(array)}")
            target.data = np.array(array, dtype=np.float64)

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))


@dataclass
class AdamState:
    """Moment buffers and hyperparameters of the Adam optimizer."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState) -> ParamStore:
    """
    Apply one bias-corrected Adam update to every trainable parameter.

    Gradients are cleared afterward.

    Args:
        params: Parameters with populated gradients.
        state: Optimizer state, updated in place.

    Returns:
        The same ParamStore, updated.

    Raises:
        ValueError: If a trainable parameter has no gradient.
    """
    missing = [name for name, t in params.items()
               if params.is_trainable(name) and t.grad is None]
    if missing:
        raise ValueError(f"Missing gradient for trainable parameters: {missing}")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for name, tensor in params.items():
        if not params.is_trainable(name):
            continue
        g = tensor.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        tensor.data = tensor.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    params.zero_grad()
    return params


def grad_check(f: Callable[[], Tensor], params: ParamStore, h: float = 1e-5,
               samples_per_param: Optional[int] = 8, seed: int = 0) -> float:
    """
    Compare analytic gradients against central differences.

    Args:
        f: Builds a scalar loss from the current parameter values.
        params: Parameters to perturb.
        h: Finite-difference step, in [1e-6, 1e-4].
        samples_per_param: Coordinates sampled per parameter (None = all).
        seed: Seed for coordinate sampling.

    Returns:
        max |analytic - numeric| / (|analytic| + |numeric| + 1e-12).

    Raises:
        ValueError: If h is out of range.
        NumericalError: If the loss is not finite.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"Finite-difference step {h} outside [1e-6, 1e-4]")

    params.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError("Loss is not finite")
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for name, tensor in params.items():
            size = tensor.data.size
            if samples_per_param is None or samples_per_param >= size:
                coords = np.arange(size)
            else:
                coords = rng.choice(size, size=samples_per_param, replace=False)
            for coord in coords:
                original = tensor.data.flat[coord]
                tensor.data.flat[coord] = original + h
                plus = f().item()
                tensor.data.flat[coord] = original - h
                minus = f().item()
                tensor.data.flat[coord] = original
                numeric = (plus - minus) / (2.0 * h)
                exact = analytic[name].reshape(-1)[coord]
                err = abs(exact - numeric) / (abs(exact) + abs(numeric) + 1e-12)
                if err > worst:
                    logger.debug("grad_check %s[%d]: analytic=%g numeric=%g", name, coord, exact, numeric)
                    worst = err
    return worst
