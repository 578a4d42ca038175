"""Instrumentation for the quantities the convergence analysis bounds.

Everything here is a pure function of parameter snapshots: drift from
initialization, deviation of local models from the last synchronized model,
gradient-norm-to-loss ratios, the relaxed smoothness and gradient-continuity
residuals, per-window loss shrinkage, and log-linear rate fits. Ball and
drift quantities use the max-per-layer spectral norm; deviation and gradient
quantities use the (tuple) Frobenius norm; both flavors of drift are
reported because either convention could be the one a reader cares about.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import network
from .numerics import (
    ShapeError,
    _power_iteration,
    tuple_ball_distance,
    tuple_frobenius_distance,
)

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .federated import FedState

LOSS_FLOOR = 1e-30


@dataclass
class ProbeRecord:
    """One instrumentation row captured at step t (round c = t // tau)."""

    t: int
    c: int
    global_loss: float
    client_loss_min: float
    client_loss_mean: float
    client_loss_max: float
    drift_virtual: float
    drift_client_max: float
    deviation_mean_sq: float
    deviation_bound_rhs: float
    grad_upper_ratio: float
    grad_lower_ratio: float
    shrinkage_violation: float
    drift_virtual_fro: float = 0.0
    drift_client_max_fro: float = 0.0

    CSV_FIELDS = (
        "t",
        "c",
        "global_loss",
        "client_loss_min",
        "client_loss_mean",
        "client_loss_max",
        "drift_virtual",
        "drift_client_max",
        "deviation_mean_sq",
        "deviation_bound_rhs",
        "grad_upper_ratio",
        "grad_lower_ratio",
        "shrinkage_violation",
    )


@dataclass
class RateFit:
    """Least-squares fit of ln(loss) against round index."""

    slope: float
    intercept: float
    r2: float
    implied_rate: float


@dataclass
class LipschitzSample:
    """Raw triple for testing the almost-Lipschitz gradient inequality.

    lhs is the client-averaged squared Frobenius gap between gradients at W
    and W~; sq_dist the squared max-layer spectral distance; loss_tilde the
    loss at W~. Keeping the raw triple lets either candidate bound shape
    (with or without the extra quadratic offset term) be fitted downstream.
    """

    lhs: float
    sq_dist: float
    loss_tilde: float


class DriftTracker:
    """Warm-start cache for the repeated spectral norms a drift probe needs.

    Probing the same slowly-moving difference matrices round after round,
    power iteration restarted from the previous top singular vector converges
    in a handful of sweeps instead of hundreds.
    """

    def __init__(self, iters: int = 200, tol: float = 1e-10):
        self.iters = iters
        self.tol = tol
        self._vectors: dict[tuple[str, int], np.ndarray] = {}

    def spectral(self, key: tuple[str, int], a: np.ndarray) -> float:
        sigma, v = _power_iteration(a, self.iters, self.tol, v0=self._vectors.get(key))
        self._vectors[key] = v
        return sigma


def _max_layer_spectral(
    a: Sequence[np.ndarray],
    b: Sequence[np.ndarray],
    tracker: DriftTracker | None,
    key_prefix: str,
) -> float:
    tracker = tracker or DriftTracker()
    return max(
        tracker.spectral((key_prefix, li), la - lb) for li, (la, lb) in enumerate(zip(a, b))
    )


def grad_ratios(
    p: network.Params,
    xs: np.ndarray,
    ys: np.ndarray,
    n_per_client: int,
    phi: float,
) -> tuple[float, float]:
    """Scale-free gradient-bound ratios at `p` over the full dataset.

    upper = d ||grad||_F^2 / (m L) and lower = d n^2 ||grad||_F^2 / (m phi L):
    the analysis pins upper below a constant and lower above one inside the
    lazy-training ball. Both are 0 by convention at a zero-loss stationary
    point, and lower is reported 0 when phi is uncertified (phi == 0).
    """
    m = p.W[0].shape[0]
    d = p.W[0].shape[1]
    lval = network.loss(p, xs, ys)
    if lval <= LOSS_FLOOR:
        return 0.0, 0.0
    gsq = network.grad_frobenius_sq(network.gradient(p, xs, ys))
    upper = d * gsq / (m * lval)
    lower = 0.0 if phi == 0.0 else d * n_per_client**2 * gsq / (m * phi * lval)
    return upper, lower


def lipschitz_sample(
    W: network.Params,
    W_tilde: network.Params,
    shards: Sequence,
) -> LipschitzSample:
    """Measure the gradient-continuity triple between two parameter points."""
    if [w.shape for w in W.W] != [w.shape for w in W_tilde.W]:
        raise ShapeError("parameter tuples have mismatched shapes")
    K = len(shards)
    lhs = 0.0
    loss_tilde = 0.0
    for shard in shards:
        g = network.gradient(W, shard.xs, shard.ys)
        gt = network.gradient(W_tilde, shard.xs, shard.ys)
        lhs += sum(float(np.sum((a - b) ** 2)) for a, b in zip(g, gt))
        loss_tilde += network.loss(W_tilde, shard.xs, shard.ys)
    _, dist = tuple_ball_distance(W.W, W_tilde.W)
    return LipschitzSample(lhs / K, dist * dist, loss_tilde / K)


def semi_smoothness_components(
    W_hat: network.Params,
    W_tilde: network.Params,
    xs: np.ndarray,
    ys: np.ndarray,
    omega: float,
) -> tuple[float, float, float]:
    """(gap, sqrt-loss term, quadratic term) of the relaxed smoothness check.

    gap = L(W~) - L(W^) - <grad L(W^), W~ - W^>; the two returned basis terms
    are sqrt(L(W^)) * omega^(1/3) * sqrt(m ln m / d) * dist and (m/d) * dist^2
    with dist the max-layer spectral displacement, so the inequality under
    test reads gap <= C' * term1 + C'' * term2.
    """
    m = W_hat.W[0].shape[0]
    d = W_hat.W[0].shape[1]
    l_hat = network.loss(W_hat, xs, ys)
    l_tilde = network.loss(W_tilde, xs, ys)
    g = network.gradient(W_hat, xs, ys)
    inner = sum(
        float(np.sum(gl * (wt - wh)))
        for gl, wt, wh in zip(g, W_tilde.W, W_hat.W)
    )
    _, dist = tuple_ball_distance(W_hat.W, W_tilde.W)
    gap = l_tilde - l_hat - inner
    term1 = math.sqrt(l_hat) * omega ** (1.0 / 3.0) * math.sqrt(m * math.log(m)) / math.sqrt(d) * dist
    term2 = (m / d) * dist * dist
    return gap, term1, term2


def semi_smoothness_residual(
    W_hat: network.Params,
    W_tilde: network.Params,
    xs: np.ndarray,
    ys: np.ndarray,
    omega: float,
    c_prime: float,
    c_dprime: float,
) -> float:
    """Slack of the relaxed smoothness inequality with the given constants.

    Nonnegative when the inequality holds: first-order expansion plus the
    sqrt-loss and quadratic correction terms dominates the actual loss at
    W~.
    """
    gap, term1, term2 = semi_smoothness_components(W_hat, W_tilde, xs, ys, omega)
    return c_prime * term1 + c_dprime * term2 - gap


def deviation_check(state: "FedState") -> tuple[float, float]:
    """(measured, bound) for the local-model deviation since the last sync.

    measured = (1/K) sum_i ||W_i(t) - W(t_c)||_F^2 over the tuple; the bound
    is (eta^2 tau^2 + eta^2 tau) * (m n / d) * L(W(t_c)) with the global loss
    recorded at the last synchronization.
    """
    K = len(state.clients)
    measured = 0.0
    for client in state.clients:
        dist = tuple_frobenius_distance(client.W, state.w_sync)
        measured += dist * dist
    measured /= K
    m = state.clients[0].W[0].shape[0]
    d = state.clients[0].W[0].shape[1]
    eta, tau = state.cfg.eta, state.cfg.tau
    n = state.partition.max_shard_size()
    bound = (eta**2 * tau**2 + eta**2 * tau) * (m * n / d) * state.sync_loss
    return measured, bound


def shrinkage_check(
    history: Sequence[float],
    algo: str,
    tol_rel: float = 0.0,
    bound_factor: float = 1.0,
) -> float:
    """Worst shrinkage violation over one inter-sync window of local losses.

    `history` starts at the loss right after the last sync. For local_gd the
    violation is the worst relative step-to-step increase (the analysis says
    the local loss never rises between syncs); relative increases at or below
    tol_rel are treated as exact ties. For local_sgd the loss may rise by at
    most `bound_factor` times the sync loss, so the violation is
    max_t L(t)/L(sync) - bound_factor.
    """
    if len(history) == 0:
        raise ValueError("empty loss history")
    if len(history) == 1:
        return 0.0
    if algo == "local_gd":
        rels = []
        for prev, cur in zip(history[:-1], history[1:]):
            rel = (cur - prev) / max(prev, LOSS_FLOOR)
            if 0.0 < rel <= tol_rel:
                rel = 0.0
            rels.append(rel)
        return max(rels)
    if algo == "local_sgd":
        ref = max(history[0], LOSS_FLOOR)
        return max(l / ref for l in history) - bound_factor
    raise ValueError(f"unknown algo {algo!r}")


def sgd_shrinkage_factor(phi: float, m: int, n: int) -> float:
    """Allowed multiplicative headroom of local loss over the sync loss."""
    if m < 2:
        return 1.0
    return math.exp(phi / (m * n**2.5 * math.log(m) ** 2))


def linear_rate_fit(loss_per_round: Sequence[float]) -> RateFit:
    """OLS of ln(loss) on round index.

    Values at or below 1e-30 truncate the fit window (everything from the
    first such entry on is dropped). A constant sequence fits slope 0 and, as
    the variance is zero, r2 is reported as 0 by convention.
    """
    usable = []
    for v in loss_per_round:
        if v <= LOSS_FLOOR:
            break
        usable.append(math.log(v))
    if len(usable) < 3:
        raise ValueError(f"need >= 3 positive entries before truncation, got {len(usable)}")
    y = np.array(usable)
    x = np.arange(len(usable), dtype=np.float64)
    xm, ym = float(x.mean()), float(y.mean())
    sxx = float(np.sum((x - xm) ** 2))
    sxy = float(np.sum((x - xm) * (y - ym)))
    slope = sxy / sxx
    intercept = ym - slope * xm
    sst = float(np.sum((y - ym) ** 2))
    if sst == 0.0:
        r2 = 0.0
    else:
        resid = y - (intercept + slope * x)
        r2 = 1.0 - float(np.sum(resid**2)) / sst
        r2 = min(max(r2, 0.0), 1.0)
    return RateFit(slope, intercept, r2, math.exp(slope))


@dataclass
class DriftReport:
    """Distances of the averaged and per-client models from initialization."""

    drift_virtual: float
    drift_client_max: float
    drift_virtual_fro: float
    drift_client_max_fro: float


def drift_report(
    state: "FedState",
    virtual: Sequence[np.ndarray] | None = None,
    tracker: DriftTracker | None = None,
) -> DriftReport:
    """Max-layer spectral and tuple-Frobenius drift from the initial model."""
    from .federated import virtual_average

    tracker = tracker or DriftTracker()
    if virtual is None:
        virtual = virtual_average(state).W
    dv = _max_layer_spectral(virtual, state.w0, tracker, "virtual")
    dv_f = tuple_frobenius_distance(virtual, state.w0)
    dc = 0.0
    dc_f = 0.0
    for i, client in enumerate(state.clients):
        dc = max(dc, _max_layer_spectral(client.W, state.w0, tracker, f"client{i}"))
        dc_f = max(dc_f, tuple_frobenius_distance(client.W, state.w0))
    return DriftReport(dv, dc, dv_f, dc_f)


def default_omega(phi: float, n: int, L: int, m: int, constant: float = 1.0) -> float:
    """Reference ball radius phi^(3/2) n^-6 L^-6 (ln m)^-(3/2), times a knob.

    At desk scale this is minuscule, so drift is reported as a ratio against
    it rather than gated on it.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    return constant * phi**1.5 / (n**6 * L**6 * math.log(m) ** 1.5)
