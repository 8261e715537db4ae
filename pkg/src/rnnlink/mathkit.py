"""Dense linear algebra, activations and the seeded generator.

Every numeric container in the package is a float64 numpy array.  The one
operation whose rounding behaviour is pinned down explicitly is
:func:`affine`: each output element is accumulated left to right over the
input dimension, so the result for a given row never depends on how many
other rows were evaluated alongside it.  Batched and one-at-a-time inference
therefore agree bit for bit.
"""

from __future__ import annotations

import enum

import numba
import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _affine_rows(x, w_t, out):
    n_rows, n_in = x.shape
    n_out = w_t.shape[1]
    for b in range(n_rows):
        for i in range(n_out):
            out[b, i] = 0.0
        for j in range(n_in):
            xv = x[b, j]
            for i in range(n_out):
                out[b, i] += xv * w_t[j, i]


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Return ``W @ x (+ b)`` with a fixed accumulation order.

    ``x`` may be a vector of length ``W.shape[1]`` or a batch of shape
    ``(n, W.shape[1])``; the result has the matching leading shape.
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got shape {W.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"cannot apply weight of shape {W.shape} to input of shape {x.shape}")
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        if b.shape != (W.shape[0],):
            raise DimensionError(
                f"bias of shape {b.shape} does not match weight of shape {W.shape}")
    x2 = np.ascontiguousarray(x.reshape(-1, W.shape[1]))
    out = np.empty((x2.shape[0], W.shape[0]))
    _affine_rows(x2, np.ascontiguousarray(W.T), out)
    if b is not None:
        out += b
    return out.reshape(x.shape[:-1] + (W.shape[0],))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class Activation(enum.Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"

    @property
    def gamma_bound(self) -> float:
        """Supremum of the derivative, the per-pass gradient gain."""
        return _GAMMA[self]

    @classmethod
    def parse(cls, name: "str | Activation") -> "Activation":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}") from None


_GAMMA = {
    Activation.SIGMOID: 0.25,
    Activation.TANH: 1.0,
    Activation.RELU: 1.0,
    Activation.IDENTITY: 1.0,
}


def sigmoid(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-v))


def apply(kind: Activation, v: np.ndarray) -> np.ndarray:
    """Value of the activation only."""
    if kind is Activation.SIGMOID:
        return sigmoid(v)
    if kind is Activation.TANH:
        return np.tanh(v)
    if kind is Activation.RELU:
        return np.maximum(v, 0.0)
    return np.array(v, dtype=np.float64, copy=True)


def derivative_from_value(kind: Activation, value: np.ndarray,
                          pre: np.ndarray | None = None) -> np.ndarray:
    """Derivative expressed through the activation output.

    ReLU needs the pre-activation to be exact at 0; when ``pre`` is omitted
    the output is used instead, which gives the same 0 subgradient there.
    """
    if kind is Activation.SIGMOID:
        return value * (1.0 - value)
    if kind is Activation.TANH:
        return 1.0 - value * value
    if kind is Activation.RELU:
        ref = value if pre is None else pre
        return (ref > 0.0).astype(np.float64)
    return np.ones_like(value)


def activate(kind: Activation, v) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise value and derivative of ``kind`` at ``v``."""
    kind = Activation.parse(kind)
    v = np.asarray(v, dtype=np.float64)
    value = apply(kind, v)
    return value, derivative_from_value(kind, value, v)


# ---------------------------------------------------------------------------
# seeded generator
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream.

    The state is a 64-bit counter advanced by the golden-ratio increment; each
    output is the counter passed through the SplitMix64 finaliser.  Only
    integer arithmetic modulo 2**64 is involved, so streams are identical on
    every platform.  :meth:`split` derives an independent child generator.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int | None = None):
        count = 1 if n is None else int(n)
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            out = _mix64(z)
        self.state = (self.state + count * int(_GOLDEN)) & _MASK64
        return int(out[0]) if n is None else out

    def random(self, size=None):
        """Uniform draws in [0, 1) with 53 bits of resolution."""
        shape = () if size is None else (size if isinstance(size, tuple) else (int(size),))
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(n) >> np.uint64(11)
        out = bits.astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(out[0]) if size is None else out.reshape(shape)

    def uniform(self, lo: float, hi: float, size=None):
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got lo={lo}, hi={hi}")
        u = self.random(size)
        return lo + (hi - lo) * u

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def split(self) -> "Rng":
        return Rng(self.next_u64())


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    return rng.uniform(lo, hi)
