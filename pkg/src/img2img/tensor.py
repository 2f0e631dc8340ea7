"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward rule on the output tensor. ``backward`` orders the
recorded graph topologically and replays the rules in reverse, after which
the graph is marked consumed.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DomainError, GraphError, NonDeterministicError, NonFiniteError, ShapeError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used by tensor factories (float64 for grad checks)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor / tensor is not supported; divide by a scalar")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self) -> Tensor:
        return reduce_sum(self)

    def mean(self) -> Tensor:
        return reduce_mean(self)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        for p in parents:
            if p.requires_grad and p._consumed:
                raise GraphError(f"{op}: input belongs to a graph that was already consumed by backward()")
        out.requires_grad = True
        # parents frozen at op time stay out of the graph even if unfrozen later
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


# -- factories --------------------------------------------------------------

def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("shape must have at least one dimension")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


class RngState:
    """Seeded random stream.

    ``stream`` is a tuple of non-negative integers that derives an independent
    child stream from the same seed, so e.g. initialization and dropout never
    share draws. ``position`` counts draw calls made so far.
    """

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self.position = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> RngState:
        return RngState(self.seed, self.stream + tuple(keys))

    def _tick(self) -> np.random.Generator:
        self.position += 1
        return self._gen

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._tick().normal(mean, std, size=shape)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._tick().uniform(low, high, size=shape)

    def integers(self, low: int, high: int) -> int:
        return int(self._tick().integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._tick().permutation(n)

    def keep_mask(self, shape, keep_prob: float) -> np.ndarray:
        return self._tick().random(size=shape) < keep_prob

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "stream": list(self.stream),
            "position": self.position,
            "bit_generator": self._gen.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> RngState:
        rng = cls(state["seed"], state["stream"])
        rng._gen.bit_generator.state = state["bit_generator"]
        rng.position = int(state["position"])
        return rng

    def __eq__(self, other) -> bool:
        return isinstance(other, RngState) and self.get_state() == other.get_state()


def gaussian_init(shape, mean: float, stddev: float, rng: RngState, requires_grad: bool = True) -> Tensor:
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    data = rng.normal(_check_shape(shape), mean, stddev).astype(_DEFAULT_DTYPE)
    return Tensor(data, requires_grad=requires_grad)


# -- elementwise ops ----------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(as_tensor(a), float(b))
    if not isinstance(a, Tensor):
        return _add_scalar(b, float(a))
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def _add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _add_scalar(as_tensor(a), -float(b))
    if not isinstance(a, Tensor):
        return _add_scalar(neg(b), float(a))
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scalar_mul(as_tensor(a), b)
    if not isinstance(a, Tensor):
        return scalar_mul(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the math name
    # sign(0) -> +1: the right branch at the kink
    s = np.where(a.data >= 0, 1, -1).astype(a.dtype)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip to [low, high]; gradient passes only where the value was inside."""
    inside = (a.data >= low) & (a.data <= high)
    return _make(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clamp")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def reduce_sum(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("reduce_sum of an empty tensor")
    shape, dt = a.shape, a.dtype
    return _make(np.asarray(a.data.sum(dtype=dt)), (a,), lambda g: (np.full(shape, g, dtype=dt),), "reduce_sum")


def reduce_mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("reduce_mean of an empty tensor")
    shape, dt, n = a.shape, a.dtype, a.size
    return _make(
        np.asarray(a.data.mean(dtype=dt)),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=dt),),
        "reduce_mean",
    )


# -- backward ---------------------------------------------------------------

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
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every ``requires_grad`` ancestor.

    ``grad`` seeds the output cotangent; it is required for non-scalar
    outputs. The graph is consumed afterwards: a second call raises.
    """
    if loss._consumed:
        raise GraphError("backward() called twice on a consumed graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    if grad is None:
        if loss.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape, dtype=loss.dtype)
    else:
        seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise ShapeError(f"cotangent shape {seed.shape} != output shape {loss.shape}")

    tape = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient during backward()")
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or p is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in tape:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# -- finite differences -----------------------------------------------------

@dataclass
class GradCheckReport:
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    t: Tensor,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    indices: Sequence[int] | None = None,
    scale_floor: float = 1e-3,
    abs_floor: float = 1e-10,
) -> GradCheckReport:
    """Compare backward() against central differences of ``f`` at ``t``.

    ``f`` must be scalar-valued and deterministic. The relative error of an
    element uses ``max(|analytic|, |numeric|, scale_floor * max|numeric|)`` as
    denominator so that near-zero entries are judged against the gradient's
    overall scale, and never below ``abs_floor``, so a gradient that is zero up to
    rounding is not judged relative to nothing. ``indices`` restricts the check to flat positions.
    """
    if not t.requires_grad:
        raise GraphError("finite_diff_check needs a tensor with requires_grad=True")
    t.grad = None
    y = f(t)
    base = float(y.data.reshape(-1)[0])
    backward(y)
    analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
    t.grad = None

    with no_grad():
        again = float(f(t).data.reshape(-1)[0])
    if again != base:
        raise NonDeterministicError(
            f"function changed between two evaluations at the same point ({base!r} vs {again!r}); "
            "freeze dropout masks before checking"
        )

    idx = np.arange(t.size) if indices is None else np.asarray(indices, dtype=np.int64)
    flat = t.data.reshape(-1)
    numeric = np.empty(len(idx), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(t).data.reshape(-1)[0])
            flat[i] = orig - step
            fm = float(f(t).data.reshape(-1)[0])
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * step)
    analytic = analytic_full.reshape(-1)[idx].astype(np.float64)
    floor = max(scale_floor * float(np.abs(numeric).max(initial=0.0)), abs_floor)
    rel = relative_errors(analytic, numeric, floor)
    return GradCheckReport(idx, analytic, numeric, float(rel.max(initial=0.0)), tolerance)
