"""Dense float64 kernels shared by every other module.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
Matrices are stored row-major with shape ``(rows, cols)`` and act on column
vectors, so ``W @ x`` maps a ``cols``-dim input onto ``rows`` outputs.  Batched
code uses row-batches ``X @ W.T`` through :func:`linear`.

Random numbers come from :class:`RngStream`, a thin owner of numpy's PCG64
bit generator.  Multiply-accumulate operations routed through :func:`linear`
can be tallied with :func:`count_macs`.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import defaultdict

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand dimensions violate an operation's contract."""


def as_vector(data, dim: int | None = None) -> np.ndarray:
    v = np.asarray(data, dtype=DTYPE)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ShapeError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.asarray(data, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ShapeError(f"expected {rows}x{cols}, got {m.shape[0]}x{m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Return ``m @ v``; raises :class:`ShapeError` unless ``m.cols == v.dim``."""
    m = np.asarray(m, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {m.shape} by {v.shape}")
    _record(m.size)
    return m @ v


def sigmoid(x):
    """Logistic function, evaluated without overflow for any finite input."""
    x = np.asarray(x, dtype=DTYPE)
    # exp of a non-positive argument only
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# multiply-accumulate accounting

_counter: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar("macs", default=None)
_scope: contextvars.ContextVar[str] = contextvars.ContextVar("mac_scope", default="other")


class MacCounter:
    """Tally of multiply-accumulates per named scope."""

    def __init__(self):
        self.by_scope: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def __getitem__(self, scope: str) -> int:
        return self.by_scope.get(scope, 0)


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def mac_scope(name: str):
    token = _scope.set(name)
    try:
        yield
    finally:
        _scope.reset(token)


def _record(n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.by_scope[_scope.get()] += int(n)


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply ``w`` (``out x in``) to each row of ``x`` (``... x in``)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} does not match matrix {w.shape}")
    _record((x.size // x.shape[-1]) * w.size)
    return x @ w.T


# ---------------------------------------------------------------------------
# random streams


class RngStream:
    """Seeded random stream backed by numpy's PCG64 generator.

    One stream per logical thread of execution; the sample sequence depends
    only on ``seed``.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size, stddev: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * stddev

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn_seed(self) -> int:
        """Draw a fresh 63-bit seed for a child stream."""
        return int(self._gen.integers(0, 2**63 - 1))


def sample_gaussian(rng: RngStream, dim: int, stddev: float) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    if stddev == 0:
        return np.zeros(dim, dtype=DTYPE)
    return rng.normal(dim, stddev)


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
