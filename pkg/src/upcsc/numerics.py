"""Dense float64 linear algebra helpers, LR schedule, SGD, and the
finite-difference gradient oracle.

A "matrix" throughout the package is a 2-D C-contiguous float64 numpy array.
Heavy lifting (products, reductions) is delegated to numpy; the functions
here add the shape/domain checks the rest of the package relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from .autograd import Tensor
from .errors import ShapeError, DegenerateInputError

NORM_EPS = 1e-12


def substream(*keys: int) -> np.random.Generator:
    """Independent PCG64 stream keyed by a tuple of integers.

    Every random decision in the package draws from a stream derived this
    way, so any single step or run can be replayed without replaying the
    whole experiment.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction; every row sums to 1."""
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("softmax_rows requires a nonempty matrix")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize_rows(m):
    """Scale every row to unit Euclidean norm.

    Accepts a plain matrix or an autograd Tensor (the projector path in the
    losses differentiates through this). A row with norm <= 1e-12 is a hard
    error: collapsing embeddings should fail loudly, not be clamped.
    """
    sq = (m * m).sum(axis=1, keepdims=True)
    raw = sq.data if isinstance(sq, Tensor) else sq
    if raw.size and raw.min() <= NORM_EPS**2:
        raise DegenerateInputError("zero-norm row cannot be normalized")
    return m / sq**0.5


@dataclass(frozen=True)
class LrSchedule:
    base_rate: float
    total_steps: int

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(schedule: LrSchedule, step: int) -> float:
    """Half-cosine decay from base_rate at step 0 to 0 at total_steps."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    return schedule.base_rate * 0.5 * (1.0 + math.cos(math.pi * step / schedule.total_steps))


class GradientSet:
    """One gradient array per trainable parameter, keyed by parameter name."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.arrays.items())

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(a))) if a.size else 0.0) for a in self.arrays.values())

    @classmethod
    def zeros_like(cls, params) -> "GradientSet":
        return cls({name: np.zeros_like(arr) for name, arr in params.param_items()})


def sgd_step(params, grads: GradientSet, rates: Mapping[str, float]):
    """theta <- theta - rate(group) * grad, returning a new parameter set.

    `params` is any object with param_items() / group_of() / with_params()
    (see ModelState). Rates are looked up per parameter group; a missing
    group is an error.
    """
    updated = {}
    for name, arr in params.param_items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name}")
        updated[name] = arr - rates[params.group_of(name)] * g
    return params.with_params(updated)


def finite_diff_gradient(loss_fn: Callable, params, h: float = 1e-5) -> GradientSet:
    """Central-difference gradient of loss_fn over every parameter coordinate.

    Perturbs the parameter arrays in place and restores them, so loss_fn must
    read the current arrays on every call (and must be deterministic).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads = {}
    for name, arr in params.param_items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn(params))
            flat[i] = orig - h
            lm = float(loss_fn(params))
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return GradientSet(grads)


def max_relative_error(a: GradientSet, b: GradientSet, floor: float = 1e-8) -> float:
    """max over coordinates of |a-b| / max(|a|, |b|, floor)."""
    worst = 0.0
    for name, ga in a.items():
        gb = b[name]
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gb)), floor)
        if ga.size:
            worst = max(worst, float(np.max(np.abs(ga - gb) / denom)))
    return worst
