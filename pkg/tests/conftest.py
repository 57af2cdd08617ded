import numpy as np
import pytest

from bcflsim import kernels, learning


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


@pytest.fixture
def tiny_task():
    data = learning.generate_federated(N=4, per_client=20, labels_per_client=3, label_count=4,
                                       feature_dim=5, seed=3, test_size=50)
    arch = learning.Architecture(5, (6,), 4)
    return arch, data


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def small_run(arch, data, k=5, lam=50.0, Y=2.0, mode="analytic", seed=0, s=8, dropout=0.0,
              stream=0, **kw):
    """Short experiment on the tiny task; returns the ExperimentLog."""
    from bcflsim import protocol, timecost

    N = data.num_clients
    cfg = protocol.SystemConfig(N=N, M=N, E=2, eta=0.1, k=k, lam=lam, Y=Y, s=s, seed=seed,
                                mode=mode, dropout=dropout, **kw)
    env = timecost.NetworkEnv.homogeneous(1e5, N, N, arch.num_params, s=s, tau_local=0.2)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
    return protocol.run_experiment(cfg, arch, data, env, rng=rng)
