"""Dense linear-algebra and seeded-randomness substrate.

Matrices are plain 2-D float64 numpy arrays. Every reduction in this module
runs a fixed summation order, so repeated calls with identical inputs return
bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation.

    Accumulates in float64. The summation order is the fixed order of the
    underlying BLAS kernel, which is stable from run to run on one platform.
    """
    a = _check_matrix(a, "left operand")
    b = _check_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} times "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def frobenius_norm(a: np.ndarray) -> float:
    a = _check_matrix(a)
    return math.sqrt(float(np.sum(a * a)))


def _power_iteration(
    a: np.ndarray, iters: int, tol: float, v0: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Largest singular value of `a` via power iteration on a^T a.

    Starts from the normalized all-ones vector unless `v0` is given
    (callers probing a slowly-moving matrix pass the previous top vector to
    cut the iteration count). Returns (sigma, v) with v the final unit
    right-singular-vector estimate.
    """
    q = a.shape[1]
    if v0 is None:
        v = np.full(q, 1.0 / math.sqrt(q))
    else:
        nv = math.sqrt(float(np.sum(v0 * v0)))
        if nv == 0.0:
            v = np.full(q, 1.0 / math.sqrt(q))
        else:
            v = v0 / nv
    sigma_prev = math.inf
    sigma = 0.0
    for _ in range(iters):
        w = a @ v
        sigma = math.sqrt(float(np.sum(w * w)))
        bv = a.T @ w
        nbv = math.sqrt(float(np.sum(bv * bv)))
        if nbv == 0.0:
            # a^T a v vanished: v is in the null space; for the zero matrix
            # (or after exact cancellation) the only safe answer is 0.
            return 0.0, v
        v = bv / nbv
        if abs(sigma - sigma_prev) <= tol:
            break
        sigma_prev = sigma
    return sigma, v


def spectral_norm(a: np.ndarray, iters: int = 200, tol: float = 1e-10) -> float:
    """Largest singular value, approximated by power iteration on a^T a.

    Deterministic all-ones start vector; stops when successive estimates
    differ by at most `tol` or after `iters` rounds. A zero matrix returns 0.
    """
    a = _check_matrix(a)
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    sigma, _ = _power_iteration(a, iters, tol)
    return sigma


def tuple_ball_distance(
    a: list[np.ndarray] | tuple[np.ndarray, ...],
    b: list[np.ndarray] | tuple[np.ndarray, ...],
    iters: int = 200,
    tol: float = 1e-10,
) -> tuple[list[float], float]:
    """Per-layer spectral distances between two weight tuples, plus the max.

    Membership of `a` in the radius-omega ball around `b` means the returned
    max is <= omega.
    """
    if len(a) != len(b):
        raise ShapeError(f"tuples have {len(a)} vs {len(b)} layers")
    per_layer = []
    for la, lb in zip(a, b):
        if la.shape != lb.shape:
            raise ShapeError(f"layer shape mismatch: {la.shape} vs {lb.shape}")
        per_layer.append(spectral_norm(la - lb, iters=iters, tol=tol))
    return per_layer, max(per_layer)


def tuple_frobenius_distance(
    a: list[np.ndarray] | tuple[np.ndarray, ...],
    b: list[np.ndarray] | tuple[np.ndarray, ...],
) -> float:
    """Frobenius norm of the stacked difference, sqrt(sum_l ||a_l - b_l||_F^2)."""
    if len(a) != len(b):
        raise ShapeError(f"tuples have {len(a)} vs {len(b)} layers")
    total = 0.0
    for la, lb in zip(a, b):
        if la.shape != lb.shape:
            raise ShapeError(f"layer shape mismatch: {la.shape} vs {lb.shape}")
        diff = la - lb
        total += float(np.sum(diff * diff))
    return math.sqrt(total)


@dataclass
class RngStream:
    """A named, reproducible random stream.

    Backed by the counter-based Philox 4x64 generator keyed with
    (seed, stream_id), so two streams built from the same pair replay the
    same sequence while distinct ids are statistically independent. Gaussian
    variates come from an in-module Box-Muller transform over Philox
    uniforms; that choice is pinned so sampled values never depend on numpy's
    default normal algorithm.

    A stream is stateful once sampling begins: treat it as consumed by value,
    one owner per stream.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def standard_normals(self, count: int) -> np.ndarray:
        """`count` i.i.d. N(0,1) draws via Box-Muller pairs."""
        pairs = (count + 1) // 2
        u1 = self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], no log(0)
        angle = (2.0 * math.pi) * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:count]

    def uniforms(self, count: int) -> np.ndarray:
        return self._gen.random(count)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n), returned sorted."""
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
        picked = self._gen.choice(n, size=k, replace=False)
        return np.sort(picked)


def gaussian_matrix(rows: int, cols: int, std: float, rng: RngStream) -> np.ndarray:
    """rows x cols matrix of i.i.d. N(0, std^2) entries from `rng`."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dims must be positive, got {rows}x{cols}")
    if std < 0.0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0.0:
        return np.zeros((rows, cols))
    return std * rng.standard_normals(rows * cols).reshape(rows, cols)
