"""Minimal dense numeric kernel shared by the rest of the package.

Vectors and matrices are plain float64 numpy arrays; this module adds the
handful of operations everything else is built on: a shape-checked
matrix-vector product, an overflow-safe softmax, a splitmix64 PRNG whose
output stream is bit-identical across platforms, and Glorot-uniform
parameter initialization.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InputError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """splitmix64 generator.

    The state advances by a fixed odd increment and the output is the
    standard splitmix64 finalizer of the new state.  Pure integer
    arithmetic, so identical seeds give identical streams on every
    platform.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        """Advance one step and return a 64-bit unsigned output."""
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def uniform(self) -> float:
        """Uniform draw in [0, 1) using the top 53 bits of one output."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal draw via Box-Muller; consumes two uniforms."""
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def exponential(self, rate: float) -> float:
        """Exponential draw with the given rate; consumes one uniform."""
        if rate <= 0.0:
            raise InputError(f"exponential rate must be positive, got {rate}")
        return -math.log(1.0 - self.uniform()) / rate

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle driven by this generator."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(master: int, *parts: object) -> int:
    """Deterministically derive a child seed from a master seed and labels.

    Used to give independent, reproducible streams to experiment cells
    (method, slice count, fold) without coordinating a global draw order.
    """
    z = master & _MASK64
    for part in parts:
        for b in str(part).encode("utf-8"):
            z = _mix64((z + _GAMMA + b) & _MASK64)
    return z


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Validate and return a 1-D float64 array with at least one entry."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise InputError(f"{name} must be a nonempty 1-D array, got shape {arr.shape}")
    return arr


def matvec(m: np.ndarray, x) -> np.ndarray:
    """Matrix-vector product with explicit dimension checking.

    Raises
    ------
    InputError
        If `m` is not 2-D or its column count does not match `len(x)`.
    """
    m = np.asarray(m, dtype=np.float64)
    v = as_vector(x)
    if m.ndim != 2:
        raise InputError(f"matrix must be 2-D, got shape {m.shape}")
    if m.shape[1] != v.shape[0]:
        raise InputError(f"dimension mismatch: matrix is {m.shape}, vector has length {v.shape[0]}")
    return m @ v


def softmax(x) -> np.ndarray:
    """Max-shifted softmax.

    Subtracting the maximum before exponentiating leaves the result
    unchanged mathematically but avoids overflow for large scores.
    """
    v = as_vector(x, "softmax input")
    if not np.isfinite(v).all():
        raise InputError("softmax input must be finite")
    shifted = np.exp(v - v.max())
    return shifted / shifted.sum()


def glorot_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Glorot-uniform matrix draw: i.i.d. uniform in [-a, a], a = sqrt(6/(rows+cols)).

    Consumes exactly ``rows * cols`` generator draws in row-major order.
    """
    if rows < 1 or cols < 1:
        raise InputError(f"matrix dims must be positive, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    out = np.empty((rows, cols), dtype=np.float64)
    flat = out.ravel()
    for i in range(flat.size):
        flat[i] = bound * (2.0 * rng.uniform() - 1.0)
    return out
