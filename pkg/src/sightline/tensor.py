"""Numeric array primitives shared by every layer, loss and data transform.

Tensors are plain ``numpy.ndarray`` objects (row-major, float32 or float64).
This module adds the checked arithmetic the rest of the package relies on,
a seedable random stream, and the text fixture format used by the tests.

The random stream is numpy's PCG64 bit generator, seeded from a 64-bit
unsigned integer. Replaying the same sequence of calls from the same seed
yields bit-identical output.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence, Union

import numpy as np

DTYPES = {"float32": np.float32, "float64": np.float64}

Scalar = Union[int, float]


class DimensionError(ValueError):
    """Raised when tensor shapes do not compose."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


def as_tensor(data, dtype="float32") -> np.ndarray:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        dtype = DTYPES[dtype]
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def _check_finite(out: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{what} produced non-finite values")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return _check_finite(a @ b, "matmul")


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def _broadcastable(a_shape: Sequence[int], b_shape: Sequence[int]) -> bool:
    # trailing-dimension alignment only: b must equal a suffix of a's shape
    if len(b_shape) > len(a_shape):
        return False
    return tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape)


def elementwise(a: np.ndarray, b: Union[np.ndarray, Scalar], op: str) -> np.ndarray:
    """Apply ``op`` (add, sub, mul, div) between ``a`` and ``b``.

    ``b`` may be a scalar, a same-shape tensor, or a tensor whose shape
    matches the trailing dimensions of ``a``.
    """
    if op not in _OPS:
        raise ValueError(f"unknown op {op!r}")
    if np.ndim(b) == 0:
        b_arr = np.asarray(b, dtype=a.dtype)
    else:
        b_arr = np.asarray(b)
        if not _broadcastable(a.shape, b_arr.shape):
            raise DimensionError(f"shape {b_arr.shape} does not broadcast over {a.shape}")
    if op == "div" and np.any(b_arr == 0):
        raise ZeroDivisionError("elementwise division by exact zero")
    return _check_finite(_OPS[op](a, b_arr).astype(a.dtype, copy=False), op)


class SeededRng:
    """Deterministic random stream backed by numpy's PCG64."""

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        return self.generator.uniform(lo, hi, size)

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream derived from this seed and ``key``."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return SeededRng(int(seq.generate_state(1, dtype=np.uint64)[0]))


def rng_fill(rng: SeededRng, shape, dist: str = "uniform", a: float = 0.0, b: float = 1.0,
             dtype="float32") -> np.ndarray:
    """Draw a tensor of ``shape`` from ``uniform(a, b)`` or ``normal(a, b)``.

    For the normal distribution ``a`` is the mean and ``b`` the standard
    deviation.
    """
    shape = tuple(int(d) for d in np.atleast_1d(shape))
    if dist == "uniform":
        if not a <= b:
            raise ValueError(f"uniform requires lo <= hi, got ({a}, {b})")
        out = rng.generator.uniform(a, b, size=shape)
        # uniform() is half-open [lo, hi) but float rounding may still land on hi
        np.clip(out, a, b, out=out)
    elif dist == "normal":
        if not b >= 0:
            raise ValueError(f"normal requires std >= 0, got {b}")
        out = rng.generator.normal(a, b, size=shape)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return as_tensor(out, dtype)


def write_fixture(path: Union[str, Path], t: np.ndarray) -> None:
    """Write ``t`` in the text fixture format: ``dtype ndim d1 .. dk`` then values."""
    t = np.asarray(t)
    name = {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64"}[t.dtype]
    header = " ".join([name, str(t.ndim)] + [str(d) for d in t.shape])
    body = " ".join(repr(float(v)) for v in t.ravel())
    Path(path).write_text(header + "\n" + body + "\n")


def read_fixture(path: Union[str, Path]) -> np.ndarray:
    header, _, body = Path(path).read_text().partition("\n")
    parts = header.split()
    if len(parts) < 2:
        raise ValueError(f"{path}: malformed fixture header {header!r}")
    dtype, ndim = parts[0], int(parts[1])
    dims = [int(d) for d in parts[2:]]
    if len(dims) != ndim:
        raise ValueError(f"{path}: header declares {ndim} dims but lists {len(dims)}")
    values = [float(v) for v in body.split()]
    if len(values) != math.prod(dims):
        raise ValueError(f"{path}: expected {math.prod(dims)} values, found {len(values)}")
    return as_tensor(values, dtype).reshape(dims)
