"""Deep ReLU regression network: forward pass, squared loss, analytic gradients.

The model is f(x) = V relu(W_L relu(... relu(W_1 x))) with a fixed output
layer V; only the hidden tuple W = (W_1, ..., W_L) is ever trained. The
activation derivative at exactly zero is taken as 1 (a unit with
preactivation 0 counts as firing), which matters when comparing against
finite differences near kinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, ShapeError, gaussian_matrix


@dataclass(frozen=True)
class NetConfig:
    """Architecture: L hidden layers of m ReLU units, input dim d, output dim o.

    Initialization stds default to sqrt(2/m) for hidden layers and sqrt(1/o)
    for the fixed output layer, which keeps per-coordinate outputs O(1) at
    init independently of the width.
    """

    L: int
    m: int
    d: int
    o: int
    init_hidden_std: float | None = None
    init_output_std: float | None = None

    def __post_init__(self) -> None:
        for name in ("L", "m", "d", "o"):
            if getattr(self, name) < 1:
                raise ValueError(f"NetConfig.{name} must be >= 1, got {getattr(self, name)}")

    def hidden_std(self) -> float:
        return math.sqrt(2.0 / self.m) if self.init_hidden_std is None else self.init_hidden_std

    def output_std(self) -> float:
        return math.sqrt(1.0 / self.o) if self.init_output_std is None else self.init_output_std


@dataclass
class Params:
    """Trainable hidden tuple W plus the frozen output matrix V.

    W[0] is m x d, deeper layers are m x m, V is o x m. V is marked read-only
    at construction and shared (not copied) between clones.
    """

    W: list[np.ndarray]
    V: np.ndarray

    def __post_init__(self) -> None:
        self.V.setflags(write=False)

    def clone(self) -> "Params":
        return Params([w.copy() for w in self.W], self.V)

    def layer_count(self) -> int:
        return len(self.W)


@dataclass
class ForwardTrace:
    """Everything one forward pass produced for a single example.

    `activations[0]` is the input x itself; `patterns[l][r]` records whether
    unit r of layer l fired (preactivation >= 0).
    """

    preactivations: list[np.ndarray]
    activations: list[np.ndarray]
    patterns: list[np.ndarray]
    output: np.ndarray


ParamGrad = list  # per-layer arrays matching Params.W shapes


def init_params(cfg: NetConfig, rng: RngStream) -> Params:
    """Sample fresh parameters; draws W_1..W_L then V from one stream."""
    shapes = [(cfg.m, cfg.d)] + [(cfg.m, cfg.m)] * (cfg.L - 1)
    W = [gaussian_matrix(r, c, cfg.hidden_std(), rng) for r, c in shapes]
    V = gaussian_matrix(cfg.o, cfg.m, cfg.output_std(), rng)
    return Params(W, V)


def _forward_batch(
    p: Params, X: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Forward over a column-stacked batch X (d x n).

    Returns (inputs_per_layer, patterns, output) where inputs_per_layer[l] is
    the d x n or m x n matrix fed into layer l (index L is the final hidden
    activation feeding V).
    """
    feeds = [X]
    patterns = []
    F = X
    for Wl in p.W:
        Z = Wl @ F
        D = Z >= 0.0
        F = np.where(D, Z, 0.0)
        feeds.append(F)
        patterns.append(D)
    return feeds, patterns, p.V @ F


def forward(p: Params, x: np.ndarray) -> ForwardTrace:
    """Single-example forward pass with full activation-pattern capture."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != p.W[0].shape[1]:
        raise ShapeError(f"input must be a length-{p.W[0].shape[1]} vector, got shape {x.shape}")
    pre = []
    acts = [x]
    pats = []
    f = x
    for Wl in p.W:
        z = Wl @ f
        D = z >= 0.0
        f = np.where(D, z, 0.0)
        pre.append(z)
        acts.append(f)
        pats.append(D)
    return ForwardTrace(pre, acts, pats, p.V @ f)


def _as_columns(xs: np.ndarray, ys: np.ndarray, p: Params) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim != 2 or ys.ndim != 2 or xs.shape[0] != ys.shape[0]:
        raise ShapeError(f"need matching (n,d) and (n,o) arrays, got {xs.shape} and {ys.shape}")
    if xs.shape[0] == 0:
        raise ValueError("empty example set")
    if xs.shape[1] != p.W[0].shape[1]:
        raise ShapeError(f"input dim {xs.shape[1]} != network d {p.W[0].shape[1]}")
    if ys.shape[1] != p.V.shape[0]:
        raise ShapeError(f"target dim {ys.shape[1]} != network o {p.V.shape[0]}")
    return xs.T, ys.T


def predict(p: Params, xs: np.ndarray) -> np.ndarray:
    """Batched outputs, one row per example; same arithmetic path as `loss`."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != p.W[0].shape[1]:
        raise ShapeError(f"need an (n, {p.W[0].shape[1]}) array, got {xs.shape}")
    _, _, out = _forward_batch(p, xs.T)
    return out.T


def loss(p: Params, xs: np.ndarray, ys: np.ndarray) -> float:
    """Mean over examples of 0.5 * ||f(x) - y||^2."""
    X, Y = _as_columns(xs, ys, p)
    _, _, out = _forward_batch(p, X)
    R = out - Y
    return 0.5 * float(np.sum(R * R)) / X.shape[1]


def _gradient_from_batch(
    p: Params, X: np.ndarray, Y: np.ndarray, out: ParamGrad | None = None
) -> tuple[float, ParamGrad]:
    feeds, patterns, fwd = _forward_batch(p, X)
    n = X.shape[1]
    R = fwd - Y
    batch_loss = 0.5 * float(np.sum(R * R)) / n
    U = np.where(patterns[-1], p.V.T @ R, 0.0)
    grads: ParamGrad = [None] * len(p.W) if out is None else out
    for li in range(len(p.W) - 1, -1, -1):
        if out is None:
            grads[li] = (U @ feeds[li].T) / n
        else:
            np.matmul(U, feeds[li].T, out=grads[li])
            np.divide(grads[li], n, out=grads[li])
        if li > 0:
            U = np.where(patterns[li - 1], p.W[li].T @ U, 0.0)
    return batch_loss, grads


def gradient(p: Params, xs: np.ndarray, ys: np.ndarray) -> ParamGrad:
    """Exact analytic gradient of the mean squared loss w.r.t. each W_l.

    The backward pass applies the captured activation masks, so the result
    matches the layerwise chain-rule product exactly; V gets no gradient.
    """
    X, Y = _as_columns(xs, ys, p)
    return _gradient_from_batch(p, X, Y)[1]


def loss_and_gradient(
    p: Params, xs: np.ndarray, ys: np.ndarray, out: ParamGrad | None = None
) -> tuple[float, ParamGrad]:
    """Loss and gradient from a single forward/backward pass.

    `out`, when given, is a list of preallocated per-layer arrays the
    gradient is written into (hot loops reuse it to avoid reallocating the
    large deep-layer matrices).
    """
    X, Y = _as_columns(xs, ys, p)
    return _gradient_from_batch(p, X, Y, out=out)


def stochastic_gradient(
    p: Params, xs: np.ndarray, ys: np.ndarray, batch: np.ndarray
) -> ParamGrad:
    """Gradient restricted to `batch` indices, averaged with weight 1/|batch|.

    Uniform batches are therefore unbiased for the full 1/n-averaged
    gradient.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 1 or batch.shape[0] == 0:
        raise ValueError("batch must be a nonempty 1-D index list")
    n = np.asarray(xs).shape[0]
    if np.any(batch < 0) or np.any(batch >= n):
        raise IndexError(f"batch index out of range for shard of size {n}")
    X, Y = _as_columns(np.asarray(xs)[batch], np.asarray(ys)[batch], p)
    return _gradient_from_batch(p, X, Y)[1]


def grad_frobenius_sq(g: ParamGrad) -> float:
    """Squared Frobenius norm of a gradient tuple, sum over layers."""
    return float(sum(np.sum(gl * gl) for gl in g))


def apply_step(p: Params, g: ParamGrad, eta: float) -> None:
    """In-place W <- W - eta * g, layer by layer."""
    for Wl, gl in zip(p.W, g):
        Wl -= eta * gl
