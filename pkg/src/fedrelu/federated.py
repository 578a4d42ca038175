"""Local GD / Local SGD across K simulated clients with periodic averaging.

Each round, every client takes tau gradient steps on its own shard; the
server then replaces every local model with the entrywise client average
(computed once and broadcast, so post-sync equality is exact). The run loop
snapshots everything the probes need, and a fixed seed makes the whole
trajectory, metrics included, bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import network, probes
from .data import Partition
from .numerics import RngStream

LOCAL_GD = "local_gd"
LOCAL_SGD = "local_sgd"

# stream ids far above any client index, so per-client streams never collide
INIT_STREAM = 1_000_000_001
DATA_STREAM = 1_000_000_002
PARTITION_STREAM = 1_000_000_003


class ProtocolError(RuntimeError):
    """Raised when the averaging protocol is driven off its schedule."""


@dataclass
class FedConfig:
    K: int
    tau: int
    eta: float
    rounds: int
    algo: str = LOCAL_GD
    batch: int = 1
    seed: int = 0
    c_eta: float = 1.0

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not self.eta > 0.0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.algo not in (LOCAL_GD, LOCAL_SGD):
            raise ValueError(f"algo must be {LOCAL_GD!r} or {LOCAL_SGD!r}, got {self.algo!r}")

    @property
    def total_steps(self) -> int:
        return self.rounds * self.tau


def default_lr(
    algo: str,
    net: network.NetConfig,
    n: int,
    phi: float,
    tau: int,
    c_eta: float,
) -> float:
    """Theory-shaped step size, scaled by the tunable constant c_eta.

    local_gd:  c_eta * d * n^2 / (m * phi * tau)
    local_sgd: c_eta * d * phi / (m * tau * n^3 * (ln m)^2)
    """
    if n < 1 or tau < 1 or phi <= 0.0 or net.m < 1 or net.d < 1:
        raise ValueError("default_lr needs positive n, tau, phi, m, d")
    if c_eta < 0.0:
        raise ValueError(f"c_eta must be >= 0, got {c_eta}")
    if algo == LOCAL_GD:
        return c_eta * net.d * n**2 / (net.m * phi * tau)
    if algo == LOCAL_SGD:
        if net.m < 2:
            raise ValueError("local_sgd step size needs m >= 2")
        return c_eta * net.d * phi / (net.m * tau * n**3 * math.log(net.m) ** 2)
    raise ValueError(f"unknown algo {algo!r}")


@dataclass
class FedState:
    """Mutable protocol state: client models plus the probe snapshots.

    w0 is the initial hidden tuple and is never touched again; w_sync tracks
    the hidden tuple broadcast at the latest synchronization, and sync_loss
    the global loss recorded there (the deviation bound is stated against
    it).
    """

    cfg: FedConfig
    partition: Partition
    clients: list[network.Params]
    w0: list[np.ndarray]
    w_sync: list[np.ndarray]
    c: int = 0
    t: int = 0
    sync_loss: float = 0.0
    streams: list[RngStream] = field(default_factory=list)
    _scratch: dict = field(default_factory=dict, repr=False, compare=False)

    def grad_scratch(self, client: int) -> list[np.ndarray]:
        bufs = self._scratch.get(client)
        if bufs is None:
            bufs = [np.empty_like(w) for w in self.clients[client].W]
            self._scratch[client] = bufs
        return bufs

    def avg_workspace(self, shape: tuple[int, int], count: int) -> list[np.ndarray]:
        key = ("avg", shape)
        bufs = self._scratch.get(key)
        if bufs is None or len(bufs) < count:
            bufs = [np.empty(shape) for _ in range(count)]
            self._scratch[key] = bufs
        return bufs

    @classmethod
    def fresh(cls, cfg: FedConfig, net: network.NetConfig, partition: Partition) -> "FedState":
        if partition.K != cfg.K:
            raise ValueError(f"partition has {partition.K} shards, config wants K={cfg.K}")
        params0 = network.init_params(net, RngStream(cfg.seed, INIT_STREAM))
        clients = [params0.clone() for _ in range(cfg.K)]
        state = cls(
            cfg=cfg,
            partition=partition,
            clients=clients,
            w0=[w.copy() for w in params0.W],
            w_sync=[w.copy() for w in params0.W],
            streams=[RngStream(cfg.seed, i) for i in range(cfg.K)],
        )
        state.sync_loss = global_loss(state.clients[0], partition)
        return state


def client_loss(state: FedState, client: int) -> float:
    shard = state.partition.shards[client]
    return network.loss(state.clients[client], shard.xs, shard.ys)


def global_loss(p: network.Params, partition: Partition) -> float:
    """Client-averaged objective (1/K) sum_i L_i(p)."""
    return sum(network.loss(p, s.xs, s.ys) for s in partition.shards) / partition.K


def local_step(state: FedState, client: int) -> float | None:
    """One gradient step on `client`'s own model and shard.

    local_gd uses the full-shard gradient and returns the shard loss at the
    pre-step parameters (free from the same forward pass); local_sgd draws a
    fresh without-replacement batch from the client's private stream and
    returns None (the batch loss says nothing about the shard loss).
    """
    if not 0 <= client < state.cfg.K:
        raise IndexError(f"client {client} out of range for K={state.cfg.K}")
    shard = state.partition.shards[client]
    p = state.clients[client]
    pre_loss: float | None = None
    if state.cfg.algo == LOCAL_GD:
        pre_loss, g = network.loss_and_gradient(
            p, shard.xs, shard.ys, out=state.grad_scratch(client)
        )
    else:
        k = min(state.cfg.batch, len(shard))
        batch = state.streams[client].sample_without_replacement(len(shard), k)
        g = network.stochastic_gradient(p, shard.xs, shard.ys, batch)
    eta = state.cfg.eta
    for Wl, gl in zip(p.W, g):
        np.multiply(gl, eta, out=gl)
        np.subtract(Wl, gl, out=Wl)
    return pre_loss


def _mean_two(a: np.ndarray, b: np.ndarray, bufs: list[np.ndarray]) -> np.ndarray:
    lo, hi = bufs[0], bufs[1]
    np.minimum(a, b, out=lo)
    np.maximum(a, b, out=hi)
    np.add(lo, hi, out=lo)
    return lo / 2.0


def _mean_four(layers: list[np.ndarray], bufs: list[np.ndarray]) -> np.ndarray:
    # partial sorting network: global extremes and the two middle values,
    # then the power-of-two pairing (min+max)+(mid1+mid2), which is
    # entrywise order-canonical and exact when all four values agree
    a, b, c, d = layers
    lo0, hi0, lo1, hi1, ext, mid = bufs[:6]
    np.minimum(a, b, out=lo0)
    np.maximum(a, b, out=hi0)
    np.minimum(c, d, out=lo1)
    np.maximum(c, d, out=hi1)
    np.minimum(lo0, lo1, out=ext)          # global min
    np.maximum(hi0, hi1, out=mid)          # global max
    np.add(ext, mid, out=ext)              # min + max
    np.maximum(lo0, lo1, out=lo0)          # mid1
    np.minimum(hi0, hi1, out=hi0)          # mid2
    np.add(lo0, hi0, out=lo0)              # mid1 + mid2
    np.add(ext, lo0, out=ext)
    return ext / 4.0


def virtual_average(state: FedState) -> network.Params:
    """Entrywise mean of the client models, materialized as new Params.

    Each entry's K values are combined in an order determined by the values
    themselves (ascending), never by client numbering, so the result is
    bit-identical under any client permutation and clients that already
    agree average to exactly their common value. K = 2 and K = 4 use
    vectorized min/max networks; other K sort an entrywise stack.
    """
    K = state.cfg.K
    if K == 1:
        return state.clients[0].clone()
    avg = []
    for li in range(len(state.w0)):
        layers = [c.W[li] for c in state.clients]
        if K == 2:
            bufs = state.avg_workspace(layers[0].shape, 2)
            avg.append(_mean_two(layers[0], layers[1], bufs))
        elif K == 4:
            bufs = state.avg_workspace(layers[0].shape, 6)
            avg.append(_mean_four(layers, bufs))
        else:
            stack = np.stack(layers)
            stack.sort(axis=0)
            base = stack[0]
            acc = stack[1] - base
            for k in range(2, K):
                acc += stack[k] - base
            avg.append(base + acc / K)
    return network.Params(avg, state.clients[0].V)


def synchronize(state: FedState, averaged: network.Params | None = None) -> FedState:
    """Average all clients and broadcast one copy of the result.

    Only legal when t is a multiple of tau. After the call every client holds
    an identical (same-bits) copy of the average, w_sync is refreshed, and
    the round counter advances. A probe that just materialized the virtual
    average at this step can pass it in to avoid recomputing it.
    """
    if state.t % state.cfg.tau != 0:
        raise ProtocolError(
            f"synchronize called at t={state.t}, not a multiple of tau={state.cfg.tau}"
        )
    if averaged is None:
        averaged = virtual_average(state)
    state.w_sync = [w.copy() for w in averaged.W]
    for client in state.clients:
        for li in range(len(client.W)):
            client.W[li][...] = averaged.W[li]
    state.c += 1
    return state


@dataclass
class ProbeSchedule:
    """Probe at t=0, every `every` steps, and at the final step."""

    every: int = 1

    def __post_init__(self) -> None:
        if self.every < 1:
            raise ValueError(f"probe interval must be >= 1, got {self.every}")

    def fires(self, t: int, total: int) -> bool:
        return t == 0 or t == total or t % self.every == 0


@dataclass
class MetricsLog:
    """Ordered probe records plus the fully resolved run header.

    `final_params` carries the last synchronized model for downstream
    evaluation; it is never serialized with the metrics.
    """

    header: dict
    records: list[probes.ProbeRecord]
    final_params: network.Params | None = None

    def rows_at_round_boundaries(self, tau: int) -> list[probes.ProbeRecord]:
        return [r for r in self.records if r.t % tau == 0]


def run(
    cfg: FedConfig,
    partition: Partition,
    net: network.NetConfig,
    schedule: ProbeSchedule | None = None,
) -> MetricsLog:
    """Execute `rounds` rounds of (tau local steps, then synchronize).

    Probe rows are captured after a step completes and before any averaging
    at that step, so rows on round boundaries show the pre-averaging client
    spread together with the loss of the model about to be broadcast.
    """
    schedule = schedule or ProbeSchedule(every=cfg.tau)
    state = FedState.fresh(cfg, net, partition)
    total = cfg.total_steps
    tracker = probes.DriftTracker()
    windows = [[client_loss(state, i)] for i in range(cfg.K)]
    window_start = 0
    sgd_factor = probes.sgd_shrinkage_factor(
        partition.dataset.phi, net.m, partition.max_shard_size()
    )

    records: list[probes.ProbeRecord] = []

    def fill_windows() -> None:
        # the loss after the most recent step is only materialized on demand:
        # gradient steps report the loss at their *pre-step* point for free
        steps_done = state.t - window_start
        for i in range(cfg.K):
            if len(windows[i]) == steps_done:
                windows[i].append(client_loss(state, i))

    def capture(virtual: network.Params) -> None:
        fill_windows()
        per_client = [network.loss(virtual, s.xs, s.ys) for s in partition.shards]
        g_loss = sum(per_client) / cfg.K
        current = [w[-1] for w in windows]
        drift = probes.drift_report(state, virtual=virtual.W, tracker=tracker)
        dev_measured, dev_bound = probes.deviation_check(state)
        upper, lower = probes.grad_ratios(
            virtual,
            partition.dataset.xs,
            partition.dataset.ys,
            partition.max_shard_size(),
            partition.dataset.phi,
        )
        violation = max(
            probes.shrinkage_check(w, cfg.algo, bound_factor=sgd_factor) for w in windows
        )
        records.append(
            probes.ProbeRecord(
                t=state.t,
                c=state.t // cfg.tau,
                global_loss=g_loss,
                client_loss_min=min(current),
                client_loss_mean=sum(current) / cfg.K,
                client_loss_max=max(current),
                drift_virtual=drift.drift_virtual,
                drift_client_max=drift.drift_client_max,
                deviation_mean_sq=dev_measured,
                deviation_bound_rhs=dev_bound,
                grad_upper_ratio=upper,
                grad_lower_ratio=lower,
                shrinkage_violation=violation,
                drift_virtual_fro=drift.drift_virtual_fro,
                drift_client_max_fro=drift.drift_client_max_fro,
            )
        )

    capture(virtual_average(state))
    for _ in range(cfg.rounds):
        for _ in range(cfg.tau):
            steps_done = state.t - window_start
            for i in range(cfg.K):
                pre_loss = local_step(state, i)
                if pre_loss is not None and len(windows[i]) == steps_done:
                    windows[i].append(pre_loss)
            state.t += 1
            if state.cfg.algo == LOCAL_SGD:
                fill_windows()
            if schedule.fires(state.t, total) and state.t % cfg.tau != 0:
                capture(virtual_average(state))
        boundary_avg = virtual_average(state)
        if schedule.fires(state.t, total):
            capture(boundary_avg)
        synchronize(state, averaged=boundary_avg)
        per_client_sync = [
            network.loss(state.clients[0], s.xs, s.ys) for s in partition.shards
        ]
        state.sync_loss = sum(per_client_sync) / cfg.K
        windows = [[network.loss(state.clients[i], partition.shards[i].xs, partition.shards[i].ys)] for i in range(cfg.K)]
        window_start = state.t

    header = {
        "K": cfg.K,
        "tau": cfg.tau,
        "eta": cfg.eta,
        "rounds": cfg.rounds,
        "algo": cfg.algo,
        "batch": cfg.batch,
        "seed": cfg.seed,
        "c_eta": cfg.c_eta,
        "net": {"L": net.L, "m": net.m, "d": net.d, "o": net.o},
        "n_per_client": partition.max_shard_size(),
        "phi": partition.dataset.phi,
        "partition_scheme": partition.scheme,
        "probe_every": schedule.every,
        "total_steps": total,
        "version": "0.1.0",
    }
    return MetricsLog(header, records, final_params=state.clients[0].clone())
