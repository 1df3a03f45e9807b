"""Dense float64 tensors with a reverse-mode differentiation tape.

The primitive set is deliberately small: exactly the operations the
recommender's forward pass and losses are built from. Tensors are 1-D or
2-D, always float64; gradients are checked against central finite
differences (see ``grad_check``), so there is no 32-bit mode.

A ``Tape`` is rebuilt for every training step (define-by-run). Passing
``tape=None`` to any primitive runs the same forward arithmetic without
recording, which is how evaluation code shares one code path with
training.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "rng_stream",
    "xavier_init",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "scale",
    "rowdot",
    "rowscale",
    "tanh",
    "softplus",
    "log_sigmoid",
    "softmax_rows",
    "log_softmax_rows",
    "rsqrt",
    "concat",
    "slice_cols",
    "gather_rows",
    "sum_all",
    "softplus_array",
    "sigmoid_array",
    "log_softmax_array",
]


# ---------------------------------------------------------------------------
# deterministic RNG streams
# ---------------------------------------------------------------------------

def rng_stream(seed: int, *names) -> np.random.Generator:
    """Named counter-based random stream.

    Every stochastic operation in the package draws from a stream keyed by
    (seed, *names), so results are bit-reproducible regardless of call
    order. Philox is counter-based and platform-stable.
    """
    tag = repr((int(seed),) + tuple(names)).encode()
    digest = hashlib.sha256(tag).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# tensors and the tape
# ---------------------------------------------------------------------------

class Tensor:
    """A 1-D or 2-D float64 array, optionally participating in gradients.

    The data buffer is owned by the tensor. It is treated as immutable
    while a tape referencing it is alive; the trainer mutates parameter
    buffers in place only between steps.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 2:
            raise ValueError(f"tensors are 1-D or 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    return out


class Tape:
    """Append-only record of primitive applications for one backward pass."""

    __slots__ = ("nodes", "_consumed")

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def _record(tape: Tape | None, out: Tensor, inputs: tuple[Tensor, ...], pull) -> Tensor:
    """Mark ``out`` differentiable and record ``pull`` if any input needs it.

    ``pull(grad_out)`` yields (input_tensor, grad_contribution) pairs for
    the inputs that require gradients.
    """
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, pull))
    return out


class Gradients:
    """Gradient map keyed by tensor identity; unreached tensors read as zero."""

    def __init__(self, store: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._store = store
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._store.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep over the tape starting from a scalar loss.

    Every requires_grad tensor reachable from ``loss`` receives its exact
    gradient; gradients accumulate additively when a tensor feeds several
    consumers. A tape can be consumed once.
    """
    if tape._consumed:
        raise RuntimeError("backward already called on this tape")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, pull in reversed(tape.nodes):
        g_out = grads.get(id(out))
        if g_out is None:
            continue
        for tensor, contribution in pull(g_out):
            key = id(tensor)
            held = grads.get(key)
            if held is None:
                grads[key] = np.array(contribution, dtype=np.float64, copy=True)
                tensors[key] = tensor
            else:
                held += contribution
    return Gradients(grads, tensors)


# ---------------------------------------------------------------------------
# stable numeric kernels (shared by primitives and tape-free evaluation)
# ---------------------------------------------------------------------------

def softplus_array(x: np.ndarray) -> np.ndarray:
    """Overflow-safe ln(1+e^x) = max(x,0) + log1p(e^-|x|)."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction; 1-D input is one row."""
    two_d = x if x.ndim == 2 else x[None, :]
    shifted = two_d - two_d.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return out if x.ndim == 2 else out[0]


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _wrap(a.data @ b.data)

    def pull(g):
        if a.requires_grad:
            yield a, g @ b.data.T
        if b.requires_grad:
            yield b, a.data.T @ g

    return _record(tape, out, (a, b), pull)


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows of a 2-D left operand."""
    if a.shape == b.shape:
        out = _wrap(a.data + b.data)

        def pull(g):
            if a.requires_grad:
                yield a, g
            if b.requires_grad:
                yield b, g

    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        out = _wrap(a.data + b.data[None, :])

        def pull(g):
            if a.requires_grad:
                yield a, g
            if b.requires_grad:
                yield b, g.sum(axis=0)

    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _record(tape, out, (a, b), pull)


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)
    out = _wrap(a.data * c)

    def pull(g):
        if a.requires_grad:
            yield a, g * c

    return _record(tape, out, (a,), pull)


def rowdot(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Row-wise dot product: (m,n)x(m,n) -> (m,1); 1-D vectors give shape (1,)."""
    if a.shape != b.shape:
        raise ValueError(f"rowdot shape mismatch: {a.shape} . {b.shape}")
    if a.ndim == 2:
        out = _wrap(np.einsum("ij,ij->i", a.data, b.data)[:, None])

        def pull(g):
            if a.requires_grad:
                yield a, g * b.data
            if b.requires_grad:
                yield b, g * a.data

    else:
        out = _wrap(np.array([float(a.data @ b.data)]))

        def pull(g):
            if a.requires_grad:
                yield a, g[0] * b.data
            if b.requires_grad:
                yield b, g[0] * a.data

    return _record(tape, out, (a, b), pull)


def rowscale(a: Tensor, s: Tensor, tape: Tape | None = None) -> Tensor:
    """Scale each row of a (m,n) tensor by the matching entry of a (m,1) column."""
    if a.ndim != 2 or s.ndim != 2 or s.shape != (a.shape[0], 1):
        raise ValueError(f"rowscale shape mismatch: {a.shape} scaled by {s.shape}")
    out = _wrap(a.data * s.data)

    def pull(g):
        if a.requires_grad:
            yield a, g * s.data
        if s.requires_grad:
            yield s, (g * a.data).sum(axis=1, keepdims=True)

    return _record(tape, out, (a, s), pull)


def tanh(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(np.tanh(a.data))
    out_data = out.data

    def pull(g):
        if a.requires_grad:
            yield a, g * (1.0 - out_data * out_data)

    return _record(tape, out, (a,), pull)


def softplus(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(softplus_array(a.data))

    def pull(g):
        if a.requires_grad:
            yield a, g * sigmoid_array(a.data)

    return _record(tape, out, (a,), pull)


def log_sigmoid(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(-softplus_array(-a.data))

    def pull(g):
        if a.requires_grad:
            yield a, g * sigmoid_array(-a.data)

    return _record(tape, out, (a,), pull)


def softmax_rows(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(np.exp(log_softmax_array(a.data)))
    p = out.data

    def pull(g):
        if a.requires_grad:
            if p.ndim == 2:
                yield a, p * (g - (g * p).sum(axis=1, keepdims=True))
            else:
                yield a, p * (g - float(g @ p))

    return _record(tape, out, (a,), pull)


def log_softmax_rows(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = _wrap(log_softmax_array(a.data))
    ls = out.data

    def pull(g):
        if a.requires_grad:
            p = np.exp(ls)
            if ls.ndim == 2:
                yield a, g - p * g.sum(axis=1, keepdims=True)
            else:
                yield a, g - p * g.sum()

    return _record(tape, out, (a,), pull)


def rsqrt(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise 1/sqrt(x); inputs must be strictly positive."""
    if np.any(a.data <= 0):
        raise ValueError("rsqrt requires strictly positive inputs")
    out = _wrap(1.0 / np.sqrt(a.data))
    inv = out.data

    def pull(g):
        if a.requires_grad:
            yield a, g * (-0.5 * inv / a.data)

    return _record(tape, out, (a,), pull)


def concat(parts: Iterable[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate along the last axis: columns for 2-D, elements for 1-D."""
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat of zero tensors")
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts):
        raise ValueError(f"concat rank mismatch: {[p.shape for p in parts]}")
    if ndim == 2:
        rows = parts[0].shape[0]
        if any(p.shape[0] != rows for p in parts):
            raise ValueError(f"concat row mismatch: {[p.shape for p in parts]}")
        out = _wrap(np.concatenate([p.data for p in parts], axis=1))
        widths = [p.shape[1] for p in parts]
    else:
        out = _wrap(np.concatenate([p.data for p in parts]))
        widths = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + widths)

    def pull(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                yield p, g[..., lo:hi]

    return _record(tape, out, parts, pull)


def slice_cols(a: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    """Contiguous slice along the last axis."""
    width = a.shape[-1]
    if not (0 <= start < stop <= width):
        raise ValueError(f"slice [{start}:{stop}] out of range for width {width}")
    out = _wrap(np.ascontiguousarray(a.data[..., start:stop]))

    def pull(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[..., start:stop] = g
            yield a, full

    return _record(tape, out, (a,), pull)


def gather_rows(table: Tensor, indices, tape: Tape | None = None) -> Tensor:
    """Select rows of a 2-D table; backward scatter-adds into gathered rows only."""
    if table.ndim != 2:
        raise ValueError(f"gather_rows needs a 2-D table, got shape {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"gather indices must be 1-D, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"gather index {bad} out of range for table with {n} rows")
    out = _wrap(table.data[idx])

    def pull(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            yield table, full

    return _record(tape, out, (table,), pull)


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of all entries, as a shape-(1,) scalar tensor."""
    out = _wrap(np.array([a.data.sum()]))

    def pull(g):
        if a.requires_grad:
            yield a, np.full_like(a.data, g[0])

    return _record(tape, out, (a,), pull)


# ---------------------------------------------------------------------------
# initialization and verification
# ---------------------------------------------------------------------------

def xavier_init(shape, seed: int) -> Tensor:
    """Uniform [-b, b] with b = sqrt(6/(fan_in+fan_out)), deterministic per seed.

    1-D shapes use fan_in = fan_out = n. The draw comes from the stream
    ("xavier", *shape), so each differently-shaped tensor with the same
    seed gets independent values.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (1, 2):
        raise ValueError(f"xavier_init supports 1-D or 2-D shapes, got {shape}")
    if any(s <= 0 for s in shape):
        raise ValueError(f"xavier_init got zero-sized dimension in {shape}")
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        fan_in = fan_out = shape[0]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    values = rng_stream(seed, "xavier", *shape).uniform(-bound, bound, size=shape)
    return Tensor(values, requires_grad=True)


def grad_check(
    loss_fn: Callable[[Tape | None], Tensor],
    params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(tape)`` must rebuild the loss from the current parameter
    buffers; it is called with ``tape=None`` for the perturbed evaluations.
    The error metric is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|) per entry.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-7, 1e-3], got {eps}")
    params = list(params.items()) if isinstance(params, Mapping) else list(params)

    tape = Tape()
    loss = loss_fn(tape)
    grads = backward(tape, loss)

    worst = 0.0
    for name, tensor in params:
        g_ad = grads[tensor]
        buf = tensor.data.reshape(-1)
        for j in range(buf.size):
            orig = buf[j]
            buf[j] = orig + eps
            hi = loss_fn(None).item()
            buf[j] = orig - eps
            lo = loss_fn(None).item()
            buf[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericalError(f"non-finite loss perturbing {name}[{j}]")
            g_fd = (hi - lo) / (2.0 * eps)
            g = g_ad.reshape(-1)[j]
            err = abs(g - g_fd) / max(1.0, abs(g), abs(g_fd))
            if err > worst:
                worst = err
    return worst
