"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of operations the SS-VTCN graph needs are provided.  The
graph is rebuilt on every forward pass; calling :func:`backward` on a scalar
accumulates gradients into the ``grad`` field of every leaf tensor created
with ``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class GraphCycleError(RuntimeError):
    """Raised when a computation graph is found to contain a cycle."""


class NonFiniteError(FloatingPointError):
    """Raised when an upstream computation produced NaN or infinity."""


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # shape / flat view
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def relu(self) -> Tensor:
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent.  Outside :func:`no_grad` and when any parent needs a
    gradient, the node is linked into the graph.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, w) -> Tensor:
    """``a[..., k] @ w[k, m]``; ``w`` must be two-dimensional."""
    a, w = as_tensor(a), as_tensor(w)
    if w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {w.shape}")

    def backward_fn(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return ga, gw

    return make_node(a.data @ w.data, (a, w), backward_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make_node(y, (x,), lambda g: (g * y,))


def expm1(x) -> Tensor:
    """exp(x) - 1 without cancellation near zero."""
    x = as_tensor(x)
    y = np.expm1(x.data)
    return make_node(y, (x,), lambda g: (g * (y + 1.0),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x, lo: float) -> Tensor:
    """max(x, lo); gradient is zero where the floor is active."""
    x = as_tensor(x)
    mask = x.data >= lo
    return make_node(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x, index) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_node(np.array(x.data[index]), (x,), backward_fn)


def softmax(logits, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Raises :class:`NonFiniteError` if any logit is NaN or infinite, which
    always indicates a corrupt upstream computation.
    """
    logits = as_tensor(logits)
    if logits.shape[axis] < 2:
        raise ValueError("softmax needs at least two classes")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("non-finite logits reached softmax")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (logits,), backward_fn)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child = stack.pop()
        if child == 0:
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise GraphCycleError("computation graph contains a cycle")
            state[id(node)] = 1
        if child < len(node._parents):
            stack.append((node, child + 1))
            parent = node._parents[child]
            mark = state.get(id(parent))
            if mark == 1:
                raise GraphCycleError("computation graph contains a cycle")
            if mark is None:
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar ``loss``.

    Gradients are accumulated (added) into ``grad`` of every leaf tensor that
    requires one; intermediate nodes keep nothing.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(base))
        flat[i] = orig - h
        down = float(f(base))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    a = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    n = np.asarray(numeric, dtype=DTYPE).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, shape) -> AdamState:
        return cls(np.zeros(shape, dtype=DTYPE), np.zeros(shape, dtype=DTYPE), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float = 0.005,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new parameters and state."""
    params = np.asarray(params, dtype=DTYPE)
    grads = np.asarray(grads, dtype=DTYPE)
    if params.shape != grads.shape or state.first_moment.shape != params.shape:
        raise ValueError(
            f"adam_step shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape}"
        )
    if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
        raise ValueError("adam_step needs lr > 0 and 0 <= beta1, beta2 < 1")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grads
    v = beta2 * state.second_moment + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


class Adam:
    """Adam over a fixed list of parameter tensors, updated in place."""

    def __init__(self, params: Iterable[Tensor], lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.states = [AdamState.zeros(p.shape) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.states[i] = adam_step(
                p.data, g, self.states[i], self.lr, self.beta1, self.beta2, self.eps
            )


# ---------------------------------------------------------------------------
# Seeded randomness


@dataclass(frozen=True)
class Rng:
    """PCG64 stream keyed by a 64-bit seed and a path of named sub-streams.

    ``Rng(seed).child("tcn")`` and ``Rng(seed).child("vae")`` are independent
    of each other and of the order in which they are created.  Child keys are
    CRC-32 hashes of the names, fed to :class:`numpy.random.SeedSequence` as
    its spawn key, so streams are stable across platforms and runs.
    """

    seed: int
    path: tuple[str, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        key = tuple(zlib.crc32(p.encode("utf-8")) for p in self.path)
        ss = np.random.SeedSequence(entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.PCG64(ss)))

    def child(self, name: str) -> Rng:
        return Rng(self.seed, self.path + (name,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def geometric(self, p: float, size=None):
        return self._gen.geometric(p, size)

    def multinomial(self, n: int, pvals) -> np.ndarray:
        return self._gen.multinomial(n, pvals)

    def choice(self, a, size=None, p=None):
        return self._gen.choice(a, size=size, p=p)


def init_uniform(rng: Rng, shape, fan_in: int, name: str | None = None) -> Tensor:
    """Parameter drawn from U(-k, k), k = 1/sqrt(fan_in)."""
    k = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, size=shape), requires_grad=True, name=name)
