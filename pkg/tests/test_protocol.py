import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcflsim import chain, compression, learning, protocol, timecost
from bcflsim.compression import SparseUpdate
from conftest import small_run


def test_feedback_single_step_example():
    # one descent step of size 0.1 along the constant gradient [1.0, 0.1]
    delta = -0.1 * np.array([1.0, 0.1])
    sent, m, g_raw = protocol.compress_with_feedback(delta, np.zeros(2), k=1)
    np.testing.assert_allclose(g_raw, [-0.1, -0.01], rtol=1e-15)
    assert sent.to_dict() == {0: -0.1}
    np.testing.assert_allclose(m, [0.0, -0.01], rtol=1e-15)


def test_feedback_accumulates_over_rounds():
    delta = -0.1 * np.array([1.0, 0.1])
    _, m1, _ = protocol.compress_with_feedback(delta, np.zeros(2), k=1)
    sent2, m2, g2 = protocol.compress_with_feedback(delta, m1, k=1)
    np.testing.assert_allclose(g2, [-0.1, -0.02], rtol=1e-15)
    assert sent2.to_dict() == {0: -0.1}
    np.testing.assert_allclose(m2, [0.0, -0.02], rtol=1e-15)


def test_lossless_k_leaves_no_residual():
    g = np.random.default_rng(0).normal(size=30)
    _, m, _ = protocol.compress_with_feedback(g, np.zeros(30), k=30)
    assert not m.any()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8]))
def test_conservation_is_exact(seed, s):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 200))
    delta = rng.normal(scale=10.0 ** rng.uniform(-6, 2), size=d)
    m = rng.normal(scale=10.0 ** rng.uniform(-6, 2), size=d)
    sent, m_new, g_raw = protocol.compress_with_feedback(delta, m, int(rng.integers(1, d + 1)), s)
    assert np.array_equal(sent.densify() + m_new, g_raw)


def test_client_round_matches_manual_training(tiny_task):
    arch, data = tiny_task
    w = learning.init_model(arch, 0)
    state = protocol.ClientState(1, w.copy(), np.zeros(arch.num_params), data.clients[1])
    sent, new, g_raw = protocol.client_round(arch, state, w, E=3, eta=0.1, k=7, round=4)
    manual = w.copy()
    for _ in range(3):
        manual -= 0.1 * learning.gradient(arch, manual, data.clients[1].X, data.clients[1].y)
    assert np.array_equal(g_raw, manual - w)
    assert (sent.round, sent.client_id, sent.k) == (4, 1, 7)
    assert np.array_equal(sent.densify() + new.m, g_raw)
    assert not state.m.any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_round_and_client(tiny_task):
    arch, data = tiny_task
    w = np.full(arch.num_params, 1e300)
    state = protocol.ClientState(2, w, np.zeros(arch.num_params), data.clients[2])
    with pytest.raises(protocol.DivergenceError) as exc:
        protocol.client_round(arch, state, w, E=2, eta=1e10, k=3, round=6)
    assert (exc.value.round, exc.value.client_id) == (6, 2)


def test_aggregate_examples():
    w = np.array([1.0, 2.0])
    ups = [SparseUpdate([0], [1.0], 2, client_id=0), SparseUpdate([0], [-1.0], 2, client_id=1)]
    assert np.array_equal(protocol.aggregate(ups, w, 2), w)
    g = np.array([0.5, -0.25])
    assert np.array_equal(protocol.aggregate([SparseUpdate([0, 1], g, 2)], w, 1), w + g)


def test_aggregate_matches_dense_oracle_in_any_order():
    rng = np.random.default_rng(1)
    d, N = 500, 50
    ups = []
    for i in range(N):
        idx = np.sort(rng.choice(d, 20, replace=False))
        ups.append(SparseUpdate(idx, rng.normal(size=20), d, round=3, client_id=i))
    w = rng.normal(size=d)
    oracle = w + sum(u.densify() for u in ups) / N
    got = protocol.aggregate(ups, w, N)
    assert np.max(np.abs(got - oracle)) <= 1e-12
    shuffled = [ups[i] for i in rng.permutation(N)]
    assert np.array_equal(protocol.aggregate(shuffled, w, N), got)


def test_aggregate_integrity_errors():
    u0 = SparseUpdate([0], [1.0], 3, client_id=0)
    u1 = SparseUpdate([0], [1.0], 3, client_id=1, round=2)
    with pytest.raises(protocol.BlockIntegrityError):
        protocol.aggregate([u0], np.zeros(3), 2)
    with pytest.raises(protocol.BlockIntegrityError):
        protocol.aggregate([u0, u0], np.zeros(3), 2)
    with pytest.raises(protocol.BlockIntegrityError):
        protocol.aggregate([u0, u1], np.zeros(3), 2)
    assert protocol.aggregate([u0], np.zeros(3), 2, allow_missing=True)[0] == 0.5


def _sim(arch, data, mode="analytic", k=5, lam=50.0, s=8, jitter=0.1, **kw):
    N = data.num_clients
    cfg = protocol.SystemConfig(N=N, M=N, E=2, eta=0.1, k=k, lam=lam, Y=100.0, s=s, mode=mode, **kw)
    env = timecost.NetworkEnv.homogeneous(1e5, N, N, arch.num_params, s=s, jitter=jitter)
    return protocol.Simulation(cfg, arch, data, env, rng=np.random.default_rng(0)), env


def test_analytic_round_charges_h_terms(tiny_task):
    arch, data = tiny_task
    sim, env = _sim(arch, data)
    rec = sim.run_round()
    t = timecost.step_durations(5, 50.0, env)
    assert (rec.tau_local, rec.tau_up, rec.tau_cross, rec.tau_mine, rec.tau_down, rec.tau_aggre) == \
        (t["local"], t["up"], t["cross"], t["mine"], t["down"], t["aggre"])
    assert rec.duration == pytest.approx(timecost.h(5, 50.0, env), rel=1e-15)


def test_stochastic_without_jitter_matches_analytic_traffic_terms(tiny_task):
    arch, data = tiny_task
    sim, env = _sim(arch, data, mode="stochastic", jitter=0.0)
    rec = sim.run_round()
    t = timecost.step_durations(5, 50.0, env)
    assert (rec.tau_up, rec.tau_cross, rec.tau_down) == (t["up"], t["cross"], t["down"])
    assert rec.fork_attempts >= 1


def test_models_synchronized_and_clock_monotone(tiny_task):
    arch, data = tiny_task
    sim, _ = _sim(arch, data, mode="stochastic")
    last = 0.0
    for _ in range(4):
        rec = sim.run_round()
        assert rec.cum_time > last
        last = rec.cum_time
        for c in sim.clients:
            assert np.array_equal(c.w, sim.clients[0].w) and np.array_equal(c.w, sim.w)
        assert min(rec.tau_local, rec.tau_up, rec.tau_cross, rec.tau_mine, rec.tau_down) >= 0


@pytest.mark.parametrize("mode", ["analytic", "stochastic"])
def test_runs_are_reproducible(tiny_task, mode):
    arch, data = tiny_task
    a = small_run(arch, data, mode=mode, Y=3.0)
    b = small_run(arch, data, mode=mode, Y=3.0)
    assert a.records == b.records and a.final_model_digest == b.final_model_digest


def test_budget_too_small_gives_zero_rounds(tiny_task):
    arch, data = tiny_task
    log = small_run(arch, data, Y=0.1)
    assert log.rounds == 0 and log.warnings
    assert log.final_accuracy == log.initial_accuracy


def test_doubling_budget_doubles_rounds(tiny_task):
    arch, data = tiny_task
    h = small_run(arch, data, Y=10.0).records[0].duration
    a = small_run(arch, data, Y=7.25 * h)
    b = small_run(arch, data, Y=14.5 * h)
    assert (a.rounds, b.rounds) == (7, 14)


def test_compression_buys_more_rounds(tiny_task):
    arch, data = tiny_task
    d = arch.num_params
    full = small_run(arch, data, k=d, lam=5.0, Y=3.0)
    comp = small_run(arch, data, k=max(1, d // 50), lam=5.0, Y=3.0)
    assert comp.rounds > full.rounds


def test_full_k_equals_plain_fedavg(tiny_task):
    arch, data = tiny_task
    d = arch.num_params
    log = small_run(arch, data, k=d, Y=1.0)
    w = learning.init_model(arch, 0)
    for _ in range(log.rounds):
        acc = np.zeros(d)
        for c in data.clients:
            local = w.copy()
            for _ in range(2):
                local -= 0.1 * learning.gradient(arch, local, c.X, c.y)
            acc += local - w
        w = w + acc / data.num_clients
    assert log.final_model_digest == chain.model_digest(w).hex()


def test_dropout_keeps_residuals_and_divides_by_n(tiny_task):
    arch, data = tiny_task
    sim, _ = _sim(arch, data, mode="stochastic", dropout=0.5)
    before = [c.m.copy() for c in sim.clients]
    w_prev = sim.w.copy()
    rec = sim.run_round()
    block = sim.ledger[-1]
    present = {u.client_id for u in block.updates}
    assert rec.n_updates == len(present) < data.num_clients or len(present) == data.num_clients
    for i, c in enumerate(sim.clients):
        if i not in present:
            assert np.array_equal(c.m, before[i])
    expected = protocol.aggregate(block.updates, w_prev, data.num_clients, allow_missing=True)
    assert np.array_equal(sim.w, expected)


def test_dropout_ledger_verifies(tiny_task):
    arch, data = tiny_task
    log = small_run(arch, data, Y=3.0, mode="stochastic", dropout=0.3)
    w = chain.verify_chain(log.ledger, protocol.replay_aggregate)
    assert chain.model_digest(w).hex() == log.final_model_digest


def test_real_pow_mode(tiny_task):
    arch, data = tiny_task
    log = small_run(arch, data, Y=1.0, mode="stochastic", real_pow=True, hash_rate=2000.0, lam=20.0)
    assert log.rounds >= 1
    chain.verify_chain(log.ledger, protocol.replay_aggregate)


def test_float32_wire_still_conserves(tiny_task):
    arch, data = tiny_task
    sim, _ = _sim(arch, data, s=4)
    sim.track_raw = True
    for _ in range(3):
        sim.run_round()
        for (i, g_raw), u in zip(sim.last_raw, sim.last_sent):
            assert np.array_equal(u.densify() + sim.clients[i].m, g_raw)
            assert np.array_equal(u.values, compression.quantize(u.values, 4))


def test_residual_norm_is_recorded(tiny_task):
    arch, data = tiny_task
    log = small_run(arch, data, k=2, Y=1.0)
    assert all(r.max_residual_norm2 > 0 for r in log.records)


def test_config_validation(tiny_task):
    arch, data = tiny_task
    with pytest.raises(ValueError):
        _sim(arch, data, k=0)
    with pytest.raises(ValueError):
        _sim(arch, data, s=3)
    cfg = protocol.SystemConfig(N=3, M=3, k=1)
    env = timecost.NetworkEnv.homogeneous(1e5, 4, 4, arch.num_params)
    with pytest.raises(ValueError):
        protocol.Simulation(cfg, arch, data, env)


def test_time_to_accuracy(tiny_task):
    arch, data = tiny_task
    log = small_run(arch, data, Y=2.0)
    best = max(r.test_acc for r in log.records)
    t, spent = log.time_to_accuracy(best)
    first = next(r for r in log.records if r.test_acc >= best)
    assert t == first.cum_time and spent > 0
    assert log.time_to_accuracy(2.0)[0] is None
