"""Dense-tensor substrate: float32 arrays, shape-checked matmul, batch
normalization, seeded RNG, and the central-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` objects in row-major order. The
real-valued model path stores and returns float32; reductions that feed
statistics (means, variances) accumulate in float64 before being cast
back, which keeps invariants such as "standardized mean is zero" tight
without leaving 32-bit storage semantics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float32

Tensor = np.ndarray


def as_tensor(values, dtype=DTYPE) -> Tensor:
    """Convert nested lists / arrays to a contiguous array of `dtype`."""
    return np.ascontiguousarray(np.asarray(values, dtype=dtype))


def require_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(x)))[0])
        raise NumericError(f"{what} contains a non-finite value at flat index {bad}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Shape-checked 2-D matrix product with a fixed accumulation order.

    The contraction runs left-to-right over the inner axis (einsum's
    sequential C loop, no BLAS dispatch), so results are reproducible
    bit-for-bit across runs. Intended for reference computations and
    oracles; hot paths use the integer-exact packed kernels instead.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    require_finite(a, "matmul lhs")
    require_finite(b, "matmul rhs")
    out = np.einsum("mk,kn->mn", a.astype(DTYPE), b.astype(DTYPE), optimize=False)
    return out.astype(DTYPE)


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state.

    `gamma`/`beta` are the learnable scale and shift; `running_mean` and
    `running_var` hold the inference-time statistics, updated in training
    mode with momentum `momentum` (new = (1-m)*old + m*batch).
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=DTYPE),
            beta=np.zeros(channels, dtype=DTYPE),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])


def batch_norm(x: Tensor, p: BatchNormParams, training: bool = False) -> Tensor:
    """Normalize-scale-shift over the trailing channel axis.

    Training mode uses the batch statistics (population variance, float64
    accumulation) and updates the running statistics in place. Inference
    mode uses the stored running statistics.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != p.channels:
        raise ShapeError(
            f"batch_norm channel mismatch: input has {x.shape[-1]} channels, "
            f"params have {p.channels}"
        )
    if training:
        flat = x.reshape(-1, p.channels)
        mean = flat.mean(axis=0, dtype=np.float64)
        var = flat.var(axis=0, dtype=np.float64)
        m = p.momentum
        p.running_mean[:] = ((1.0 - m) * p.running_mean + m * mean).astype(DTYPE)
        p.running_var[:] = ((1.0 - m) * p.running_var + m * var).astype(DTYPE)
        mean = mean.astype(DTYPE)
        var = var.astype(DTYPE)
    else:
        mean = p.running_mean
        var = p.running_var
    denom = var + DTYPE(p.epsilon)
    if np.any(denom <= 0):
        bad = int(np.flatnonzero(denom <= 0)[0])
        raise NumericError(f"batch_norm variance + epsilon <= 0 at channel {bad}")
    inv = 1.0 / np.sqrt(denom, dtype=DTYPE)
    return ((x - mean) * inv * p.gamma + p.beta).astype(DTYPE)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at
    a time: (f(x + h*e_i) - f(x - h*e_i)) / (2h).

    This is the independent oracle used by every gradient test; it never
    shares code with the analytic backward passes it checks.
    """
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: f non-finite at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class Rng:
    """Deterministic random source.

    Algorithm: numpy PCG64 seeded through ``SeedSequence(seed)`` (or
    ``SeedSequence([seed, tag])`` for child streams), so identical seeds
    produce identical sequences on every platform numpy supports.
    """

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, tag: int) -> "Rng":
        """Independent substream derived from (seed, tag)."""
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        rng._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, tag]))
        )
        return rng

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> Tensor:
        return (mean + std * self._gen.standard_normal(shape)).astype(DTYPE)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        return self._gen.uniform(low, high, size=shape).astype(DTYPE)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
