"""Dense matrix helpers, activations with analytic derivatives, and split-capable RNG streams.

Matrices are plain ``numpy.ndarray`` objects in C (row-major) order.  Everything
here is a pure function except :class:`RngStream`, which owns generator state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not chain."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a float64 row-major matrix, optionally from a flat sequence."""
    a = np.array(values, dtype=np.float64, order="C")
    if rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"{a.size} values cannot fill a {rows}x{cols} matrix")
        a = a.reshape(rows, cols)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.asarray(x)))[0]
        raise NonFiniteError(f"{what} has a non-finite entry at index {tuple(int(i) for i in bad)}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Leading batch axes broadcast the same way ``np.matmul`` does.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


# --------------------------------------------------------------------------- activations

_TAGS = ("identity", "tanh", "sigmoid", "relu", "leaky_relu", "softmax_rows")


@dataclass(frozen=True)
class ActivationKind:
    tag: str = "identity"
    slope: float = 0.01

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise ValueError(f"unknown activation {self.tag!r}; expected one of {_TAGS}")
        if self.tag == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky_relu slope must lie in (0, 1), got {self.slope}")

    @classmethod
    def parse(cls, value: "ActivationKind | str | None") -> "ActivationKind":
        """Accept ``None``, ``"tanh"``, ``"leaky_relu(0.2)"`` or an existing kind."""
        if value is None:
            return cls("identity")
        if isinstance(value, ActivationKind):
            return value
        text = str(value).strip().lower()
        if text in ("none", ""):
            return cls("identity")
        if text.startswith("leaky_relu"):
            slope = 0.01
            if "(" in text:
                slope = float(text[text.index("(") + 1 : text.rindex(")")])
            return cls("leaky_relu", slope)
        return cls(text)

    def __str__(self) -> str:
        if self.tag == "leaky_relu":
            return f"leaky_relu({self.slope:g})"
        return self.tag


IDENTITY = ActivationKind("identity")
TANH = ActivationKind("tanh")
SIGMOID = ActivationKind("sigmoid")
RELU = ActivationKind("relu")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shift = np.max(x, axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    e = np.exp(x - shift)
    s = np.sum(e, axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax_rows_vjp(value: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Row-wise softmax Jacobian-transpose applied to ``cotangent``."""
    return value * (cotangent - np.sum(cotangent * value, axis=-1, keepdims=True))


def activation(kind: ActivationKind | str, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(sigma(x), sigma'(x))`` elementwise.

    For ``softmax_rows`` the derivative slot only carries the diagonal terms
    ``s * (1 - s)``; use :func:`softmax_rows_vjp` for the full reverse product.
    """
    kind = ActivationKind.parse(kind)
    x = np.asarray(x, dtype=np.float64)
    tag = kind.tag
    if tag == "identity":
        return x, np.ones_like(x)
    if tag == "tanh":
        v = np.tanh(x)
        return v, 1.0 - v * v
    if tag == "sigmoid":
        v = sigmoid(x)
        return v, v * (1.0 - v)
    if tag == "relu":
        return np.maximum(x, 0.0), (x > 0).astype(np.float64)
    if tag == "leaky_relu":
        pos = x > 0
        return np.where(pos, x, kind.slope * x), np.where(pos, 1.0, kind.slope)
    v = softmax_rows(x)
    return v, v * (1.0 - v)


# --------------------------------------------------------------------------- random streams


class RngStream:
    """Counter-based (Philox) random stream keyed by ``(seed, stream_id)``.

    Two streams built from the same pair produce identical draws.  ``split``
    derives child streams with distinct ids instead of sharing one generator
    between concurrent consumers.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        self.generator = np.random.Generator(self._bitgen)
        self._n_children = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @staticmethod
    def derive_id(seed: int, stream_id: int, index: int) -> int:
        ss = np.random.SeedSequence(entropy=[int(seed), int(stream_id), int(index), 0x5EED])
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def child(self, index: int) -> "RngStream":
        """Deterministic child stream number ``index`` (independent of draw history)."""
        return RngStream(self.seed, self.derive_id(self.seed, self.stream_id, index))

    def split(self, n: int | None = None):
        """Hand out fresh child streams; one stream when ``n`` is None, else a list."""
        if n is None:
            self._n_children += 1
            return self.child(self._n_children)
        out = [self.child(self._n_children + i + 1) for i in range(n)]
        self._n_children += n
        return out

    # thin wrappers so callers never reach for the global numpy RNG
    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def poisson(self, lam, size=None):
        return self.generator.poisson(lam, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)


def keyed_normal(seed: int, stream_id: int, counter: int, shape) -> np.ndarray:
    """Standard normals addressed by an explicit Philox counter (no stored state)."""
    counter = int(counter)
    # the address lives in the high words; Philox advances the low ones while drawing
    ctr = np.array(
        [0, 0, counter & 0xFFFFFFFFFFFFFFFF, (counter >> 64) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64
    )
    bg = np.random.Philox(counter=ctr, key=np.array([seed, stream_id], dtype=np.uint64))
    return np.random.Generator(bg).standard_normal(shape)
