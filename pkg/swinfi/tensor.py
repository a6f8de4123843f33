"""
Tensor Engine

Dense numpy-backed tensors with reverse-mode automatic differentiation and
an Adam optimizer. Only the operations SwinFi needs are provided:
arithmetic with broadcasting, batched matmul, reshape/transpose/roll,
indexing and gathers (window partition, relative position bias), softmax,
log-softmax, layer norm, GELU, sums/means and sum of squares.

Precision is a process-wide mode: float64 for gradient checks, float32 for
training. Every forward op rejects NaN/Inf results.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from swinfi.errors import ConfigError, NonFiniteError, ShapeError


GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

PRECISIONS = {"float64": np.float64, "float32": np.float32}
_precision = {"dtype": np.float32}
_local = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def get_dtype() -> type:
    """Return the numpy dtype of the active precision mode."""
    return _precision["dtype"]


def set_precision(name: str):
    """
    Switch the process-wide precision mode

    Args:
        name: "float64" (test mode) or "float32" (train mode)
    """
    if name not in PRECISIONS:
        raise ConfigError(f"Unknown precision '{name}' (expected one of {sorted(PRECISIONS)})")
    _precision["dtype"] = PRECISIONS[name]


@contextmanager
def precision(name: str):
    """Temporarily switch precision mode."""
    previous = _precision["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _precision["dtype"] = previous


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense tensor node in a dynamic autodiff graph

    Leaves are created directly; interior nodes come from the op functions
    below and remember their parents plus a closure mapping the output
    gradient to one gradient per parent.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self._op = "leaf"

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # Autodiff
    # ------------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None):
        """
        Accumulate gradients into every leaf reachable from this node

        Args:
            grad: Seed gradient (default: ones, i.e. d(self)/d(self))
        """
        if not self.requires_grad:
            raise ShapeError("backward() called on a tensor that does not require grad")

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        if seed.shape != self.shape:
            raise ShapeError(f"Seed gradient shape {seed.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): seed}

        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue

            if node._backward is None:
                # Leaf: accumulate
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue

            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list:
    """Post-order of the graph reachable from root (iterative, no recursion limit)."""
    order = []
    seen = set()
    stack = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge when any parent needs grad."""
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _node(data, (a, b), backward, "div")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Batched matrix product a[..., m, k] @ b[..., k, n]

    Raises:
        ShapeError: inner extents differ or batch extents do not broadcast
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), backward, "matmul")


# ----------------------------------------------------------------------
# Layout
# ----------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(x.data, axes), (x,), backward, "transpose")


def roll(x: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Cyclic shift along the given axes (np.roll semantics)."""
    x = as_tensor(x)
    shifts, axes = tuple(shifts), tuple(axes)

    def backward(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _node(np.roll(x.data, shifts, axis=axes), (x,), backward, "roll")


def getitem(x: Tensor, index) -> Tensor:
    """Indexing with numpy semantics; gradient scatters back with np.add.at."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(x.data[index]), (x,), backward, "getitem")


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of x by an integer index array of any shape (relative position bias lookup)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, indices, g)
        return (full,)

    return _node(x.data[indices], (x,), backward, "take")


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(data.size, 1) if x.size else 1

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return _node(data, (x,), backward, "mean")


def sum_of_squares(x: Tensor) -> Tensor:
    """Scalar sum of x**2."""
    x = as_tensor(x)

    def backward(g):
        return (2.0 * g * x.data,)

    return _node(np.asarray(np.sum(x.data * x.data)), (x,), backward, "sum_of_squares")


# ----------------------------------------------------------------------
# Nonlinearities and normalization
# ----------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction; rows along `axis` sum to 1."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for {x.ndim}-D input")
    _check_finite(x.data, "softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (log-sum-exp)."""
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize each last-axis vector to zero mean and unit variance, then
    apply the affine gain/bias

    Raises:
        ShapeError: gain or bias extent differs from the last axis
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({width},)")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _node(out, (x, gain, bias), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation with coefficient 0.044715."""
    x = as_tensor(x)
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + GELU_COEFF * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _node(out, (x,), backward, "gelu")


# ----------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples, redrawing anything beyond two standard deviations."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2.0 * std
    while np.any(outside):
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2.0 * std
    return values


# ----------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    abs_floor: float = 1e-6,
    scale_floor: float = 1e-2,
) -> float:
    """
    Compare autodiff against central finite differences

    Args:
        f: Builds a scalar graph that depends on x
        x: Leaf tensor to perturb (must be float64)
        eps: Finite-difference step
        abs_floor: Entries whose analytic and numeric magnitudes are both
            below this are scored by absolute error
        scale_floor: Relative errors are taken against at least this
            fraction of the largest analytic entry, so finite-difference
            roundoff on entries far below the gradient scale is not scored

    Returns:
        Max over entries of |a - b| / max(|a|, |b|, scale_floor * max|a|)

    Raises:
        ConfigError: not in float64 mode
        NonFiniteError: f(x) is not finite
    """
    if get_dtype() != np.float64 or x.data.dtype != np.float64:
        raise ConfigError("grad_check requires float64 precision mode")

    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    def evaluate() -> float:
        value = float(f(x).data.reshape(-1)[0])
        if not np.isfinite(value):
            raise NonFiniteError("grad_check: f(x) is not finite")
        return value

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = evaluate()
            flat[i] = original - eps
            f_minus = evaluate()
            flat[i] = original
            numeric.flat[i] = (f_plus - f_minus) / (2.0 * eps)

    diff = np.abs(analytic - numeric)
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    scale = scale_floor * float(np.abs(analytic).max()) if analytic.size else 0.0
    rel = diff / np.maximum(magnitude, max(scale, 1e-8))
    errors = np.where(magnitude < abs_floor, diff, rel)
    return float(errors.max()) if errors.size else 0.0


# ----------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments, one buffer pair per named parameter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, Tensor], lr: float = 1e-3, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: Dict[str, Tensor],
    grads: Optional[Dict[str, np.ndarray]],
    state: AdamState,
    lr: Optional[float] = None,
) -> AdamState:
    """
    Apply one Adam update in place

    Args:
        params: Named parameters to update
        grads: Named gradients (default: each parameter's .grad)
        state: Moment buffers, step counter and hyperparameters
        lr: Learning rate override for this step (schedules)

    Returns:
        The same state, advanced by one step
    """
    state.step_count += 1
    t = state.step_count
    rate = state.lr if lr is None else lr
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} != parameter {p.shape} for '{name}'")

        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != parameter {p.shape} for '{name}'")

        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g

        update = rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)

    return state


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total
