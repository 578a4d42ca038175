import numpy as np
import pytest

from fedrelu import data, federated, network
from fedrelu.federated import (
    DATA_STREAM,
    PARTITION_STREAM,
    FedConfig,
    FedState,
    ProbeSchedule,
    ProtocolError,
    default_lr,
    local_step,
    run,
    synchronize,
    virtual_average,
)
from fedrelu.numerics import RngStream, tuple_frobenius_distance


def make_setup(seed=0, n=16, d=6, o=2, K=4, L=2, m=12, phi=0.15):
    ds = data.gen_separable(n, d, phi, RngStream(seed, DATA_STREAM), o=o)
    part = data.partition_iid(ds, K, RngStream(seed, PARTITION_STREAM))
    net = network.NetConfig(L=L, m=m, d=d, o=o)
    return ds, part, net


def fresh_state(cfg, net, part):
    return FedState.fresh(cfg, net, part)


def advance_one_window(state):
    """tau local steps for every client, bumping t like the run loop does."""
    for _ in range(state.cfg.tau):
        for i in range(state.cfg.K):
            local_step(state, i)
        state.t += 1


# --- local_step ----------------------------------------------------------------


def test_zero_step_size_leaves_params_unchanged():
    _, part, net = make_setup()
    p = network.init_params(net, RngStream(1, 5))
    before = [w.copy() for w in p.W]
    g = network.gradient(p, part.shards[0].xs, part.shards[0].ys)
    network.apply_step(p, g, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(p.W, before))


def test_local_step_stationary_at_zero_residual():
    ds, part, net = make_setup(seed=2, K=1)
    cfg = FedConfig(K=1, tau=1, eta=0.3, rounds=1, seed=2)
    state = fresh_state(cfg, net, part)
    # rebuild the single shard so its targets equal the model's predictions
    xs = part.shards[0].xs
    ys = network.predict(state.clients[0], xs)
    zero_ds = data.Dataset(xs.copy(), ys, None)
    zero_part = data.partition_iid(zero_ds, 1, RngStream(2, PARTITION_STREAM))
    state.partition = zero_part
    before = [w.copy() for w in state.clients[0].W]
    local_step(state, 0)
    assert all(np.array_equal(a, b) for a, b in zip(state.clients[0].W, before))


def test_local_step_matches_manual_update_bitwise():
    _, part, net = make_setup(seed=3)
    cfg = FedConfig(K=4, tau=2, eta=0.07, rounds=1, seed=3)
    state = fresh_state(cfg, net, part)
    shard = part.shards[1]
    expected = [w.copy() for w in state.clients[1].W]
    g = network.gradient(state.clients[1], shard.xs, shard.ys)
    for w, gl in zip(expected, g):
        w -= cfg.eta * gl
    local_step(state, 1)
    assert all(np.array_equal(a, b) for a, b in zip(state.clients[1].W, expected))


def test_local_step_rejects_bad_client():
    _, part, net = make_setup(seed=4)
    state = fresh_state(FedConfig(K=4, tau=1, eta=0.1, rounds=1, seed=4), net, part)
    with pytest.raises(IndexError):
        local_step(state, 4)


def test_local_sgd_batches_come_from_client_stream():
    _, part, net = make_setup(seed=5)
    cfg = FedConfig(K=4, tau=1, eta=0.05, rounds=1, algo="local_sgd", batch=2, seed=5)
    state = fresh_state(cfg, net, part)
    expected_batch = RngStream(5, 1).sample_without_replacement(len(part.shards[1]), 2)
    expected = [w.copy() for w in state.clients[1].W]
    g = network.stochastic_gradient(
        state.clients[1], part.shards[1].xs, part.shards[1].ys, expected_batch
    )
    for w, gl in zip(expected, g):
        w -= cfg.eta * gl
    local_step(state, 1)
    assert all(np.array_equal(a, b) for a, b in zip(state.clients[1].W, expected))


# --- virtual_average -------------------------------------------------------------


def test_virtual_average_single_client_identity():
    _, part, net = make_setup(seed=6, K=1)
    state = fresh_state(FedConfig(K=1, tau=1, eta=0.1, rounds=1, seed=6), net, part)
    avg = virtual_average(state)
    assert all(np.array_equal(a, b) for a, b in zip(avg.W, state.clients[0].W))


def test_virtual_average_opposite_clients_cancel():
    _, part, net = make_setup(seed=7, K=2)
    state = fresh_state(FedConfig(K=2, tau=1, eta=0.1, rounds=1, seed=7), net, part)
    for w0, w1 in zip(state.clients[0].W, state.clients[1].W):
        w1[...] = -w0
    avg = virtual_average(state)
    assert all(np.array_equal(a, np.zeros_like(a)) for a in avg.W)


def test_virtual_average_vs_scalar_loop_oracle():
    _, part, net = make_setup(seed=8, K=3)
    state = fresh_state(FedConfig(K=3, tau=1, eta=0.1, rounds=1, seed=8), net, part)
    for i in range(3):
        advance = network.gradient(state.clients[i], part.shards[i].xs, part.shards[i].ys)
        network.apply_step(state.clients[i], advance, 0.1 * (i + 1))
    avg = virtual_average(state)
    for li in range(len(avg.W)):
        expect = np.zeros_like(avg.W[li])
        for r in range(expect.shape[0]):
            for c in range(expect.shape[1]):
                expect[r, c] = (
                    state.clients[0].W[li][r, c]
                    + state.clients[1].W[li][r, c]
                    + state.clients[2].W[li][r, c]
                ) / 3.0
        assert np.allclose(avg.W[li], expect, rtol=1e-15, atol=1e-15)


def test_virtual_average_idempotent_on_equal_clients():
    _, part, net = make_setup(seed=9, K=3)
    state = fresh_state(FedConfig(K=3, tau=1, eta=0.1, rounds=1, seed=9), net, part)
    avg = virtual_average(state)
    assert all(np.array_equal(a, b) for a, b in zip(avg.W, state.clients[0].W))


# --- synchronize ------------------------------------------------------------------


def test_synchronize_two_point_mean():
    _, part, net = make_setup(seed=10, K=2)
    state = fresh_state(FedConfig(K=2, tau=1, eta=0.1, rounds=1, seed=10), net, part)
    A = [w.copy() for w in state.clients[0].W]
    B = [w + 0.3 for w in A]
    for w, b in zip(state.clients[1].W, B):
        w[...] = b
    state.t = 1
    synchronize(state)
    for a, b, got in zip(A, B, state.clients[0].W):
        assert np.allclose(got, (a + b) / 2.0, rtol=1e-15, atol=1e-15)
    for w0, w1 in zip(state.clients[0].W, state.clients[1].W):
        assert np.array_equal(w0, w1)


def test_synchronize_exactness_and_round_counter():
    _, part, net = make_setup(seed=11)
    cfg = FedConfig(K=4, tau=3, eta=0.05, rounds=1, seed=11)
    state = fresh_state(cfg, net, part)
    advance_one_window(state)
    synchronize(state)
    assert state.c == 1
    for client in state.clients[1:]:
        for w0, wc in zip(state.clients[0].W, client.W):
            assert np.array_equal(w0, wc)
        assert tuple_frobenius_distance(state.clients[0].W, client.W) == 0.0
    for ws, w0 in zip(state.w_sync, state.clients[0].W):
        assert np.array_equal(ws, w0)


def test_synchronize_off_schedule_is_protocol_error():
    _, part, net = make_setup(seed=12)
    state = fresh_state(FedConfig(K=4, tau=2, eta=0.05, rounds=1, seed=12), net, part)
    state.t = 1
    with pytest.raises(ProtocolError):
        synchronize(state)


# --- run ---------------------------------------------------------------------------


def test_run_minimal_single_step():
    ds, part, net = make_setup(seed=13, K=1, n=4)
    cfg = FedConfig(K=1, tau=1, eta=0.05, rounds=1, seed=13)
    log = run(cfg, part, net, ProbeSchedule(every=1))
    assert [r.t for r in log.records] == [0, 1]
    # the single step must equal one plain GD step on the only shard
    p = network.init_params(net, RngStream(13, federated.INIT_STREAM))
    g = network.gradient(p, part.shards[0].xs, part.shards[0].ys)
    network.apply_step(p, g, cfg.eta)
    assert log.records[1].global_loss == pytest.approx(
        network.loss(p, part.shards[0].xs, part.shards[0].ys), rel=1e-12
    )


def test_tau_one_equals_centralized_gd():
    ds, part, net = make_setup(seed=14, K=4, n=16)
    eta = 0.05
    cfg = FedConfig(K=4, tau=1, eta=eta, rounds=50, seed=14)
    state = fresh_state(cfg, net, part)
    ref = network.init_params(net, RngStream(14, federated.INIT_STREAM))
    for step in range(50):
        for i in range(4):
            local_step(state, i)
        state.t += 1
        synchronize(state)
        grads = [network.gradient(ref, s.xs, s.ys) for s in part.shards]
        mean_grad = [
            (grads[0][li] + grads[1][li] + grads[2][li] + grads[3][li]) / 4.0
            for li in range(len(ref.W))
        ]
        network.apply_step(ref, mean_grad, eta)
        num = tuple_frobenius_distance(state.w_sync, ref.W)
        den = max(tuple_frobenius_distance(ref.W, [np.zeros_like(w) for w in ref.W]), 1e-30)
        assert num / den <= 1e-10


def test_single_client_equals_plain_gd_bitwise():
    ds, part, net = make_setup(seed=15, K=1, n=8)
    cfg = FedConfig(K=1, tau=5, eta=0.04, rounds=2, seed=15)
    log = run(cfg, part, net, ProbeSchedule(every=5))
    ref = network.init_params(net, RngStream(15, federated.INIT_STREAM))
    shard = part.shards[0]
    for _ in range(10):
        g = network.gradient(ref, shard.xs, shard.ys)
        network.apply_step(ref, g, cfg.eta)
    assert log.final_params is not None
    assert all(np.array_equal(a, b) for a, b in zip(log.final_params.W, ref.W))


def test_client_order_invariance():
    ds, part, net = make_setup(seed=16, K=3, n=12)
    cfg = FedConfig(K=3, tau=2, eta=0.05, rounds=3, seed=16)

    def sync_snapshots(partition):
        state = fresh_state(cfg, net, partition)
        snaps = []
        for _ in range(cfg.rounds):
            advance_one_window(state)
            synchronize(state)
            snaps.append([w.copy() for w in state.w_sync])
        return snaps

    order = [2, 0, 1]
    permuted = data.Partition(
        ds,
        [data.Shard(ds, part.shards[j].indices, i) for i, j in enumerate(order)],
        "iid",
    )
    for a, b in zip(sync_snapshots(part), sync_snapshots(permuted)):
        for wa, wb in zip(a, b):
            assert np.array_equal(wa, wb)


def test_run_deterministic():
    ds, part, net = make_setup(seed=17)
    cfg = FedConfig(K=4, tau=2, eta=0.05, rounds=3, algo="local_sgd", batch=1, seed=17)
    a = run(cfg, part, net, ProbeSchedule(every=2))
    b = run(cfg, part, net, ProbeSchedule(every=2))
    assert a.records == b.records


def test_run_rejects_partition_mismatch():
    ds, part, net = make_setup(seed=18, K=4)
    cfg = FedConfig(K=3, tau=1, eta=0.05, rounds=1, seed=18)
    with pytest.raises(ValueError):
        run(cfg, part, net)


def test_w0_never_mutated():
    ds, part, net = make_setup(seed=19)
    cfg = FedConfig(K=4, tau=2, eta=0.08, rounds=2, seed=19)
    state = fresh_state(cfg, net, part)
    w0_bytes = [w.tobytes() for w in state.w0]
    for _ in range(2):
        advance_one_window(state)
        synchronize(state)
    assert [w.tobytes() for w in state.w0] == w0_bytes


# --- default_lr -------------------------------------------------------------------


def test_default_lr_local_gd_hand_value():
    net = network.NetConfig(L=2, m=1024, d=32, o=4)
    got = default_lr("local_gd", net, n=16, phi=0.3, tau=4, c_eta=1.0)
    assert got == pytest.approx(32 * 256 / (1024 * 0.3 * 4), rel=1e-12)


def test_default_lr_local_sgd_formula():
    import math

    net = network.NetConfig(L=2, m=256, d=16, o=2)
    got = default_lr("local_sgd", net, n=8, phi=0.2, tau=2, c_eta=2.0)
    expect = 2.0 * 16 * 0.2 / (256 * 2 * 512 * math.log(256) ** 2)
    assert got == pytest.approx(expect, rel=1e-12)


def test_default_lr_zero_constant():
    net = network.NetConfig(L=1, m=64, d=8, o=2)
    assert default_lr("local_gd", net, n=4, phi=0.2, tau=1, c_eta=0.0) == 0.0


def test_default_lr_tau_doubling_halves_exactly():
    net = network.NetConfig(L=2, m=128, d=16, o=2)
    one = default_lr("local_gd", net, n=8, phi=0.25, tau=3, c_eta=0.7)
    two = default_lr("local_gd", net, n=8, phi=0.25, tau=6, c_eta=0.7)
    assert two == one / 2.0


def test_default_lr_rejects_nonpositive():
    net = network.NetConfig(L=1, m=64, d=8, o=2)
    with pytest.raises(ValueError):
        default_lr("local_gd", net, n=0, phi=0.2, tau=1, c_eta=1.0)
    with pytest.raises(ValueError):
        default_lr("local_gd", net, n=4, phi=0.0, tau=1, c_eta=1.0)
    with pytest.raises(ValueError):
        default_lr("local_gd", net, n=4, phi=0.2, tau=1, c_eta=-1.0)


def test_fedconfig_validation():
    with pytest.raises(ValueError):
        FedConfig(K=0, tau=1, eta=0.1, rounds=1)
    with pytest.raises(ValueError):
        FedConfig(K=1, tau=0, eta=0.1, rounds=1)
    with pytest.raises(ValueError):
        FedConfig(K=1, tau=1, eta=0.0, rounds=1)
    with pytest.raises(ValueError):
        FedConfig(K=1, tau=1, eta=0.1, rounds=1, algo="sgd")
