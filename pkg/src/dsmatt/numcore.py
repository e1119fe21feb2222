"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op in this module computes its result eagerly with numpy. When a
:class:`Tape` is active (``with Tape() as tape:``) and at least one input
requires a gradient, the op also appends a record holding its inputs and a
vector-Jacobian closure. :func:`backward` walks those records in reverse.

Random sampling goes through :class:`Rng`, a thin wrapper over numpy's
``PCG64`` bit generator (a permuted linear-congruential generator with a
published reference algorithm), so that identical seeds give identical
streams everywhere numpy runs.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dsmatt_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller breaks an op precondition."""


class Tensor:
    """A float64 array plus the bookkeeping autodiff needs."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered log of differentiable ops plus named probe points.

    Only one thread of control writes a tape during forward and reads it
    during backward; independent tapes may live in separate contexts.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.probes: dict[str, Tensor] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise ContractError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def probe(self, name: str, tensor: Tensor) -> Tensor:
        """Mark ``tensor`` so that backward reports the signal arriving at it."""
        if name in self.probes:
            raise ContractError(f"duplicate probe name {name!r}")
        self.probes[name] = tensor
        return tensor


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def probe(name: str, tensor: Tensor) -> Tensor:
    """Register a probe on the active tape; a no-op without one."""
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.probe(name, tensor)
    return tensor


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, vjp))
    else:
        out.requires_grad = False
    return out


class Gradients:
    """Result of :func:`backward`: gradients by tensor plus probe signals."""

    def __init__(self, grads: dict[int, np.ndarray], keep: dict[int, Tensor],
                 probes: dict[str, np.ndarray]):
        self._grads = grads
        self._keep = keep
        self.probes = probes

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def get(self, tensor: Tensor, default=None):
        return self._grads.get(id(tensor), default)


def backward(tape: Tape, loss: Tensor, upstream=None) -> Gradients:
    """Reverse sweep over ``tape`` seeded at ``loss``.

    ``upstream`` defaults to 1.0 and must have the loss's shape; scaling it
    scales every returned gradient by the same factor.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data) if upstream is None else np.asarray(upstream, DTYPE).reshape(loss.shape)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    keep: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            if prev is None:
                grads[key] = gi
                keep[key] = t
            else:
                grads[key] = prev + gi
    probes = {}
    for name, t in tape.probes.items():
        g = grads.get(id(t))
        probes[name] = np.zeros_like(t.data) if g is None else g
    return Gradients(grads, keep, probes)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _emit(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _emit(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def rsqrt(a: Tensor) -> Tensor:
    """Element-wise ``x ** -0.5``."""
    r = 1.0 / np.sqrt(a.data)
    return _emit(r, (a,), lambda g: (g * (-0.5) * r ** 3,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,))


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out, DTYPE), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit(np.asarray(out, DTYPE), (a,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {ad.shape} @ {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, n): flatten the batch so the weight gradient is one GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[1])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), vjp)

    out = ad @ bd

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; additive large-negative entries act as a mask."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _emit(out, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, DTYPE)
        # add.at accumulates when fancy indices repeat
        np.add.at(full, idx, g)
        return (full,)

    return _emit(np.array(a.data[idx], dtype=DTYPE), (a,), vjp)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape, DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), vjp)


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded random stream backed by numpy's PCG64 generator."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def normal(self, std: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, lo: int, hi: int, shape=None):
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def child(self, key: int) -> "Rng":
        """Independent stream derived from this seed and ``key``."""
        return Rng(np.random.SeedSequence([self.seed, key]).generate_state(1, np.uint64)[0])


def uniform(rng: Rng, lo: float, hi: float, shape) -> Tensor:
    if not lo < hi:
        raise ValueError(f"uniform needs lo < hi, got lo={lo}, hi={hi}")
    return Tensor(rng.uniform(lo, hi, shape))


def normal(rng: Rng, std: float, shape) -> Tensor:
    if not std > 0:
        raise ValueError(f"normal needs std > 0, got {std}")
    return Tensor(rng.normal(std, shape))


# ---------------------------------------------------------------- gradient oracle

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               indices: Iterable[tuple[int, ...]] | None = None) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` must be deterministic. The relative error of each coordinate is
    ``|a - b| / max(|a|, |b|, 1e-8)``. ``indices`` restricts the check to a
    subset of coordinates of ``x``; by default every coordinate is checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            out = f(x)
        analytic = backward(tape, out)[x]
    finally:
        x.requires_grad = was
    if indices is None:
        indices = np.ndindex(*x.shape)
    worst = 0.0
    for idx in indices:
        orig = x.data[idx]
        x.data[idx] = orig + eps
        fp = f(x).item()
        x.data[idx] = orig - eps
        fm = f(x).item()
        x.data[idx] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
