import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcflsim import convergence as cv, learning, protocol, timecost
from bcflsim.convergence import BoundCoefficients, ConvergenceError, ConvergenceParams

CIFAR_IID = ConvergenceParams(L=0.45, G2=0.15, Gamma2=0.00044, gap=2.30, C=0.15, E=5, N=50)


def reference_env():
    return timecost.NetworkEnv.from_link(50, 50, 122570)


def test_quadratic_smoothness_is_exact():
    L0 = 3.7
    rng = np.random.default_rng(0)
    w0, wE = rng.normal(size=6), rng.normal(size=6)
    p = cv.estimate_from_observations(w0, wE, [L0 * w0], L0 * wE, 0.5 * L0 * wE @ wE)
    assert p.L == pytest.approx(L0, rel=1e-14)
    assert p.G2 == pytest.approx(L0 ** 2 * w0 @ w0, rel=1e-14)
    assert p.Gamma2 == 0.0


def test_identical_clients_have_no_dissimilarity(tiny_task):
    arch, data = tiny_task
    same = [data.clients[0]] * 4
    w0 = learning.init_model(arch, 0)
    wE = w0 - 0.1 * learning.gradient(arch, w0, same[0].X, same[0].y)
    p = cv.estimate_params(arch, same, w0, wE)
    assert p.Gamma2 <= 1e-30
    assert p.gap == pytest.approx(learning.loss(arch, wE, same[0].X, same[0].y), rel=1e-12)


def test_degenerate_step():
    w = np.ones(3)
    with pytest.raises(ConvergenceError):
        cv.estimate_from_observations(w, w, [w], w, 1.0)


def test_cifar_row_coefficients():
    c = cv.bound_coefficients(CIFAR_IID)
    assert c.A == pytest.approx(54.85841356389542, rel=1e-12)
    assert c.A == pytest.approx(54.86, abs=5e-3)
    assert c.B == pytest.approx(0.054675, rel=1e-12)


def test_zero_numerators():
    p = ConvergenceParams(L=0.45, G2=0.15, Gamma2=0.0, gap=0.0)
    assert cv.bound_coefficients(p).A == 0.0


def test_zero_step_constant_rejected():
    with pytest.raises(ConvergenceError):
        cv.bound_coefficients(ConvergenceParams(L=1, G2=1, Gamma2=0, gap=1, C=0.0))
    with pytest.raises(ConvergenceError):
        ConvergenceParams(L=-1, G2=1, Gamma2=0, gap=1)


def test_variance_term():
    p = ConvergenceParams(L=2.0, G2=1, Gamma2=0, gap=0, C=0.5, E=4, N=2, b=10, sigma2=[1.0, 3.0])
    assert cv.bound_coefficients(p).A == pytest.approx(8 / 2 * 0.5 * 2.0 * 4.0 / (10 * 4), rel=1e-14)


def test_uncompressed_factor():
    assert cv.compression_factor(100, 100) == 1.0
    assert cv.compression_factor(50, 100, keep_three=False) == 16.0


def test_budget_scaling():
    only_a, only_b = BoundCoefficients(2.0, 0.0), BoundCoefficients(0.0, 2.0)
    for c, ratio in ((only_a, 0.5), (only_b, 0.25)):
        j1 = cv.bound_from_h(3.0, 10, 1000, c, 100.0)
        j4 = cv.bound_from_h(3.0, 10, 1000, c, 400.0)
        assert j4 == pytest.approx(ratio * j1, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 122570.0), st.floats(1e-3, 2.0), st.floats(1.0, 1e5))
def test_squared_objective_dual_path(k, lam, Y):
    env = reference_env()
    c = cv.bound_coefficients(CIFAR_IID)
    h = timecost.h_coefficients(env).h(k, lam)
    if not math.isfinite(h) or h > 1e100:
        return
    j = cv.bound_from_h(h, k, env.d, c, Y, keep_three=False)
    assert cv.objective_sq_from_h(h, k, env.d, c, Y) == pytest.approx(j * j, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(1.0, 122570.0), st.floats(0.05, 100.0), st.floats(1.0, 1e5))
def test_round_form_consistency(k, h, Y):
    c = cv.bound_coefficients(CIFAR_IID)
    assert cv.bound_from_h(h, k, 122570, c, Y) == pytest.approx(
        cv.rounds_bound(c, Y / h, k, 122570), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 122570), st.floats(1e-3, 1.0), st.floats(1.0, 1e4), st.floats(1.001, 10.0))
def test_bound_decreasing_in_budget(k, lam, Y, factor):
    env = reference_env()
    c = cv.bound_coefficients(CIFAR_IID)
    a, b = cv.bound_value(k, lam, env, c, Y), cv.bound_value(k, lam, env, c, Y * factor)
    if math.isfinite(a):
        assert b < a


def test_interior_minimizer_in_k():
    env = reference_env()
    c = cv.bound_coefficients(CIFAR_IID)
    ks = np.unique(np.geomspace(1, env.d, 400).astype(int))
    vals = [cv.bound_value(int(k), 0.4, env, c, 400.0) for k in ks]
    i = int(np.nanargmin(vals))
    assert 0 < i < len(ks) - 1


def test_theorem_bound_round_conversion():
    # T = R E local iterations and gamma = k / d give the round form exactly
    p = CIFAR_IID
    c = cv.bound_coefficients(p)
    R, k, d = 40, 2, 100
    assert cv.theorem_bound(p, R * p.E, k / d) == pytest.approx(cv.rounds_bound(c, R, k, d), rel=1e-12)
    with pytest.raises(ConvergenceError):
        cv.theorem_bound(p, 0, 0.5)


def test_step_size_check_warns():
    p = ConvergenceParams(L=10.0, G2=1, Gamma2=0, gap=1, C=0.15)
    with pytest.warns(UserWarning):
        assert not p.step_size_ok(1)
    assert p.step_size_ok(10 ** 6)


def test_gradient_diagnostic_examples():
    h = cv.GradientHistory()
    h.record(2.5)
    assert cv.sampled_gradient_norm(h) == 2.5
    g = np.random.default_rng(0).normal(size=(20, 5))
    base = cv.sampled_gradient_norm([float(v @ v) for v in g])
    doubled = cv.sampled_gradient_norm([float((2 * v) @ (2 * v)) for v in g])
    assert doubled == pytest.approx(4 * base, rel=1e-14)
    with pytest.raises(ConvergenceError):
        cv.sampled_gradient_norm(cv.GradientHistory())


def test_reservoir_is_bounded_and_uniform():
    h = cv.GradientHistory(capacity=500, seed=1)
    for i in range(20000):
        h.record(float(i))
    assert len(h) == 500 and h.seen == 20000
    assert abs(np.mean(h.values) - 9999.5) < 3 * 5773.5 / math.sqrt(500)


def test_residual_bound():
    assert cv.residual_bound(0.05, 1.0, 5, 2.0) == 0.0
    assert cv.residual_bound(0.1, 0.5, 2, 1.0) == pytest.approx(4 * 0.01 * 0.25 * 4 / 0.25)


def test_bound_check_on_small_run(caplog):
    """Two clients, d = 10, T = 50 local iterations; a violated bound is logged, not failed."""
    data = learning.generate_federated(2, 40, 2, 2, 4, seed=0, test_size=50)
    arch = learning.Architecture(4, (), 2)
    assert arch.num_params == 10
    E, eta, rounds = 5, 0.05, 10
    env = timecost.NetworkEnv.homogeneous(1e6, 2, 2, 10)
    hist = cv.GradientHistory()
    cfg = protocol.SystemConfig(N=2, M=2, E=E, eta=eta, k=5, lam=1.0, Y=1e9, s=8)
    sim = protocol.Simulation(cfg, arch, data, env, grad_history=hist)
    w0 = sim.w.copy()
    sim.run_round()
    wE = sim.w.copy()
    for _ in range(rounds - 1):
        sim.run_round()
    T = rounds * E
    assert len(hist) == 2 * T
    p = cv.estimate_params(arch, data.clients, w0, wE, C=eta * math.sqrt(T), E=E)
    measured = cv.sampled_gradient_norm(hist)
    bound = cv.theorem_bound(p, T, 0.5)
    assert math.isfinite(measured) and math.isfinite(bound)
    if measured > bound:
        logging.getLogger(__name__).warning("model misfit: %g > bound %g", measured, bound)


def test_desk_scale_constants_plausible():
    from bcflsim import config, experiments
    cfg = config.ExperimentConfig()
    arch, data = experiments.build_task(cfg)
    env = experiments.build_env(cfg, arch.num_params)
    p = experiments.probe_params(cfg, arch, data, env, learning.init_model(arch, cfg.seed))
    # same order of magnitude as the reference CIFAR IID estimates for L and the gap
    assert 0.045 <= p.L <= 4.5
    assert 0.23 <= p.gap <= 23.0
    assert p.sigma2 == [0.0] * cfg.N
