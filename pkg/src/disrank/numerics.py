"""Dense float32 tensors with a reverse-mode tape and an Adam optimizer.

Only the operations the two tiny transformers need are provided.  Every op
checks its output for NaN/Inf and, when gradients are enabled and any input
requires grad, appends a record to the active :class:`Tape`.  Calling
:func:`backward` on a scalar walks the tape once in reverse and accumulates
gradients into the leaf tensors.
"""

from __future__ import annotations

import contextlib
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
LAYER_NORM_EPS = 1e-5


class NumericsError(Exception):
    pass


class ShapeError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


class TapeError(NumericsError, RuntimeError):
    pass


_dtype: type = np.float32
_grad_enabled = True


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    Gradient checks run under float64; everything else stays float32.
    """
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Row-major array plus optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` get a zero ``grad`` of
    the same shape immediately; op outputs keep a reference to the record
    that produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_record")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype) if not isinstance(data, np.ndarray) else data
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor: dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._record: _Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(eq=False)
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op records; inputs always precede the ops that consume them."""

    records: list[_Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for rec in self.records:
            rec.output._record = None
        self.records.clear()


_tape = Tape()


def current_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Record into a new tape for the duration of the block."""
    global _tape
    prev, _tape = _tape, Tape()
    try:
        yield _tape
    finally:
        _tape = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite value in output")


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(op, out)
    t = Tensor(out)
    if _grad_enabled and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        rec = _Record(op, inputs, t, backward)
        t._record = rec
        _tape.records.append(rec)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    dt = x.dtype.type
    x2 = x * x
    th = x2 * dt(0.044715)
    th += 1
    th *= x
    th *= dt(GELU_C)
    np.tanh(th, out=th)
    out = th + 1
    out *= x
    out *= dt(0.5)

    def backward(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        d = x2 * dt(3 * 0.044715)
        d += 1
        d *= dt(0.5 * GELU_C)
        d *= x
        sech2 = th * th
        np.subtract(1, sech2, out=sech2)
        d *= sech2
        d += dt(0.5) * (1 + th)
        d *= g
        return (d,)

    return _emit("gelu", out, (a,), backward)


# --- shape -----------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def gather_rows(x: Tensor, positions) -> Tensor:
    """Pick ``x[b, positions[b]]`` for each batch row of a (B, T, d) tensor."""
    pos = np.asarray(positions, dtype=np.int64)
    if x.data.ndim != 3 or pos.shape != (x.shape[0],):
        raise ShapeError(f"gather_rows: shapes {x.shape} and {pos.shape}")
    if pos.min() < 0 or pos.max() >= x.shape[1]:
        raise ShapeError(f"gather_rows: position out of range for shape {x.shape}")
    rows = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, pos] = g
        return (gx,)

    return _emit("gather_rows", x.data[rows, pos], (x,), backward)


def take(x: Tensor, index) -> Tensor:
    """Select entries of a 1-D tensor."""
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 1:
        raise ShapeError(f"take: expected 1-D tensor, got {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("take", x.data[idx], (x,), backward)


# --- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    ok = a.data.ndim >= 2 and b.data.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and b.data.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def rowdot(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for a vector ``w``, reduced row by row.

    Unlike a BLAS matrix-vector product, each row's result does not depend
    on how many rows are in the batch, so batched and single scoring agree
    bit for bit.
    """
    if w.data.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"rowdot: incompatible shapes {x.shape} and {w.shape}")
    out = (x.data.astype(np.float64) * w.data.astype(np.float64)).sum(axis=-1).astype(x.data.dtype)

    def backward(g):
        gx = g[..., None] * w.data
        gw = (g[..., None] * x.data).reshape(-1, w.shape[0]).sum(axis=0)
        return gx, gw

    return _emit("rowdot", out, (x, w), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding_lookup", table.data[ids], (table,), backward)


# --- normalisation ---------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise rows over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: shapes {x.shape} and {gamma.shape}/{beta.shape}")
    dt = x.data.dtype.type
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = dt(1) / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + dt(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _emit("layer_norm", out, (x, gamma, beta), backward)


# --- reductions and losses -------------------------------------------------


def total(a: Tensor) -> Tensor:
    """Sum of all entries (accumulated in float64)."""
    s = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _emit("sum", s, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    s = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)
    dt = a.data.dtype.type
    return _emit("mean", s, (a,), lambda g: (np.full(a.shape, g / dt(n), dtype=a.data.dtype),))


def mse(a, b) -> Tensor:
    """Mean squared difference of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.data.dtype)

    def backward(g):
        ga = (2.0 * float(g) / n * diff).astype(a.data.dtype)
        return ga, -ga

    return _emit("mse", out, (a, b), backward)


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where mask is 1.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` have the leading
    shape.  The sum runs in float64.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"cross_entropy: incompatible shapes {logits.shape} and {targets.shape}/{mask.shape}"
        )
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("cross_entropy: mask must be {0,1}-valued")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = mask.astype(x.dtype)
    out = np.asarray(-(picked.astype(np.float64) * w).sum() / n, dtype=x.dtype)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1, -1)
        return (p * (w[..., None] * x.dtype.type(float(g) / n)),)

    return _emit("cross_entropy", out, (logits,), backward)


# --- backward --------------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    tape = tape if tape is not None else _tape
    if not tape.records:
        raise TapeError("backward: tape is empty")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._record is None:
        raise TapeError("backward: loss is not on the tape")
    end = None
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i] is loss._record:
            end = i
            break
    if end is None:
        raise TapeError("backward: loss is not on the tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: end + 1]):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi
    tape.clear()


# --- optimizer -------------------------------------------------------------


class Adam:
    """Adam with bias correction.  ``step`` zeroes the gradients it consumes."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        if lr < 0:
            raise ValueError("adam: lr must be non-negative")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise NumericsError(f"adam: parameter {p.name or p.shape} has no grad")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            dt = p.data.dtype.type
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * g * g
            if self.lr:
                p.data -= dt(self.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.grad.fill(0)


def adam_step(
    params: Sequence[Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    *,
    state: Adam | None = None,
) -> Adam:
    """One Adam update; pass the returned state back in for the next step."""
    if state is None:
        state = Adam(params, lr, beta1, beta2, eps)
    state.step()
    return state


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        factor = params[0].data.dtype.type(max_norm / (norm + 1e-12))
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# --- randomness ------------------------------------------------------------


class Prng:
    """Seeded root for all randomness, built on numpy's PCG64.

    ``stream(name)`` returns an independent generator keyed by a CRC32 of
    the name, so adding a new consumer never shifts existing streams.
    """

    ALGORITHM = "PCG64"

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        ss = np.random.SeedSequence(self.seed, spawn_key=(key,))
        return np.random.Generator(np.random.PCG64(ss))


def tune_allocator() -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmaps.

    Training allocates and frees megabyte-sized arrays every op; letting
    glibc mmap each one makes page faults a third of the step time.
    Returns False where mallopt is unavailable.
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        m_trim_threshold, m_mmap_threshold = -1, -3
        return bool(libc.mallopt(m_mmap_threshold, 1 << 30)) and bool(libc.mallopt(m_trim_threshold, 1 << 30))
    except (OSError, AttributeError):
        return False
