"""Dense-tensor substrate: deterministic RNG, finite-difference oracle, parameters.

Tensors are plain numpy arrays (row-major, float32 for training, float64 for
gradient checks). This module owns everything the rest of the library needs
to be bit-reproducible: a counter-based random generator specified by its
constants, the central-difference gradient oracle every layer is validated
against, a stable row-wise argsort, and the named value/gradient store.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericalError",
    "Param",
    "ParamStore",
    "RandomStream",
    "argsort_rows_ascending",
    "finite_difference_gradient",
    "fold_seed",
    "glorot_uniform",
    "max_relative_error",
    "rng_uniform",
]


class NumericalError(RuntimeError):
    """Raised when a non-finite value poisons an operation that requires finiteness."""


# splitmix64 applied to a counter. Constants from Steele, Lea & Flood's
# published generator: gamma = 0x9E3779B97F4A7C15 (the 64-bit golden ratio),
# mix multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB, shifts 30/27/31.
# Draw i of seed s is mix64(s + (i+1)*gamma); doubles come from the top 53
# bits. Counter-based, so streams are stateless, splittable, and identical
# on every platform.
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        z = (z ^ (z >> _U64(30))) * _MUL1
        z = (z ^ (z >> _U64(27))) * _MUL2
        return z ^ (z >> _U64(31))


def _mask64(value: int) -> np.ndarray:
    return np.array(value & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)


def fold_seed(seed: int, *keys: int) -> int:
    """Derive a child seed from a master seed and integer keys (order-sensitive)."""
    z = _mask64(seed)
    with np.errstate(over="ignore"):
        for key in keys:
            z = _mix64(z + _GAMMA + _mask64(key))
    return int(z)


def _unit_doubles(seed: int, start: int, count: int) -> np.ndarray:
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(_mask64(seed) + counters * _GAMMA)
    return (z >> _U64(11)).astype(np.float64) * 2.0**-53


def rng_uniform(seed: int, lo: float, hi: float, shape) -> np.ndarray:
    """Reproducible uniform draws in [lo, hi): same seed, same bits, any platform."""
    if not lo < hi:
        raise ValueError(f"rng_uniform needs lo < hi, got [{lo}, {hi})")
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    n = 1
    for extent in shape:
        if extent <= 0:
            raise ValueError(f"rng_uniform shape {shape} has a non-positive extent")
        n *= extent
    u = _unit_doubles(seed, 0, n)
    vals = lo + (hi - lo) * u
    # lo + (hi-lo)*u can round up to hi when hi-lo is tiny; keep the interval half-open
    np.minimum(vals, np.nextafter(hi, lo), out=vals)
    return vals.reshape(shape)


class RandomStream:
    """Sequential view over the counter-based generator (one seed, advancing offset)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._offset = 0

    def uniform(self, lo: float, hi: float, shape=None):
        if not lo < hi:
            raise ValueError(f"uniform needs lo < hi, got [{lo}, {hi})")
        scalar = shape is None
        shape = (1,) if scalar else ((shape,) if np.isscalar(shape) else tuple(shape))
        n = int(np.prod(shape))
        u = _unit_doubles(self.seed, self._offset, n)
        self._offset += n
        vals = lo + (hi - lo) * u
        np.minimum(vals, np.nextafter(hi, lo), out=vals)
        return float(vals[0]) if scalar else vals.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n) via stable argsort of fresh uniform keys."""
        keys = self.uniform(0.0, 1.0, (n,)) if n else np.empty(0)
        return np.argsort(keys, kind="stable")


def finite_difference_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    Element i is (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps). Use float64
    inputs; at eps=1e-5 float32 differences are dominated by rounding noise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    xflat = x.reshape(-1)
    for i in range(xflat.size):
        orig = xflat[i]
        xflat[i] = orig + eps
        fplus = float(f(x))
        xflat[i] = orig - eps
        fminus = float(f(x))
        xflat[i] = orig
        if not (np.isfinite(fplus) and np.isfinite(fminus)):
            raise NumericalError(f"non-finite function value at perturbed element {i}")
        flat[i] = (fplus - fminus) / (2.0 * eps)
    return grad


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function for any float dtype."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def argsort_rows_ascending(m: np.ndarray) -> np.ndarray:
    """Per-row ascending argsort; ties keep the smaller original column first."""
    m = np.asarray(m)
    if not np.isfinite(m).all():
        raise NumericalError("argsort_rows_ascending requires finite input")
    return np.argsort(m, axis=-1, kind="stable")


def max_relative_error(actual: np.ndarray, expected: np.ndarray, floor: float = 1e-3) -> float:
    """Per-element |a-e| / (|e| + floor), maxed over elements.

    The absolute cushion keeps identically-zero gradients (e.g. a linear bias
    feeding a batch norm) from turning finite-difference noise into a large
    ratio, while real errors on O(1) gradients still surface at full size.
    """
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.max(np.abs(actual - expected) / (np.abs(expected) + floor)))


class Param:
    """A named tensor with a gradient buffer of the same shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Param({self.name}, shape={tuple(self.value.shape)})"


class ParamStore:
    """Ordered, uniquely named collection of value+gradient pairs."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        param = Param(name, np.ascontiguousarray(value))
        self._params[name] = param
        return param

    def get(self, name: str) -> Param:
        return self._params[name]

    def names(self):
        return list(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def __contains__(self, name: str):
        return name in self._params

    def zero_grad(self):
        for param in self._params.values():
            param.grad[...] = 0.0


def glorot_uniform(seed: int, fan_in: int, fan_out: int, shape, dtype=np.float32) -> np.ndarray:
    """Symmetric uniform init with limit sqrt(6/(fan_in+fan_out))."""
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng_uniform(seed, -limit, limit, shape).astype(dtype)
