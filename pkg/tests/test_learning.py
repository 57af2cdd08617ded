import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcflsim import learning
from bcflsim.learning import Architecture


def central_diff(f, w, eps=1e-6):
    g = np.zeros_like(w)
    for i in range(w.shape[0]):
        e = np.zeros_like(w)
        e[i] = eps
        g[i] = (f(w + e) - f(w - e)) / (2 * eps)
    return g


def test_param_count():
    assert Architecture(4, (3,), 2).num_params == 4 * 3 + 3 + 3 * 2 + 2 == 23


def test_softmax_regression_has_no_hidden_layer():
    assert Architecture(4, (), 3).num_params == 15


@pytest.mark.parametrize("bad", [dict(input_dim=0), dict(input_dim=3, hidden_widths=(0,)),
                                 dict(input_dim=3, num_classes=1),
                                 dict(input_dim=3, activation="gelu")])
def test_invalid_architecture(bad):
    with pytest.raises(learning.ArchitectureError):
        Architecture(**bad)


def test_init_deterministic_and_seed_dependent():
    arch = Architecture(2, (2,), 2)
    assert arch.num_params == 12
    a, b = learning.init_model(arch, 7), learning.init_model(arch, 7)
    assert np.array_equal(a, b)
    assert not np.array_equal(learning.init_model(arch, 1), learning.init_model(arch, 2))


def test_init_scale():
    arch = Architecture(16, (8,), 3)
    w = learning.init_model(arch, 0)
    (W1, b1), (W2, b2) = arch.unpack(w)
    assert np.all(np.abs(W1) <= 0.25) and np.all(np.abs(b1) <= 0.25)
    assert np.all(np.abs(W2) <= 1 / math.sqrt(8))


@pytest.mark.parametrize("classes", [2, 10])
def test_uniform_model_loss(classes):
    arch = Architecture(3, (4,), classes)
    X = np.random.default_rng(0).normal(size=(7, 3))
    y = np.arange(7) % classes
    assert learning.loss(arch, np.zeros(arch.num_params), X, y) == pytest.approx(math.log(classes), abs=1e-12)


def test_duplicated_samples_same_loss_and_gradient():
    arch = Architecture(3, (4,), 3)
    rng = np.random.default_rng(1)
    w = learning.init_model(arch, 1)
    X, y = rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
    X2, y2 = np.vstack([X, X]), np.concatenate([y, y])
    l1, g1 = learning.loss_and_gradient(arch, w, X, y)
    l2, g2 = learning.loss_and_gradient(arch, w, X2, y2)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_label_out_of_range():
    arch = Architecture(2, (), 2)
    with pytest.raises(learning.DataError):
        learning.loss(arch, np.zeros(arch.num_params), np.zeros((1, 2)), np.array([2]))
    with pytest.raises(learning.DataError):
        learning.loss(arch, np.zeros(arch.num_params), np.zeros((0, 2)), np.array([], dtype=int))


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradient_matches_finite_differences(activation):
    arch = Architecture(4, (5,), 3, activation)
    rng = np.random.default_rng(2)
    w = learning.init_model(arch, 2)
    X, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    g = learning.gradient(arch, w, X, y)
    fd = central_diff(lambda v: learning.loss(arch, v, X, y), w)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_gradient_vanishes_at_softmax_regression_optimum():
    arch = Architecture(2, (), 2)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    y = (X[:, 0] + 0.8 * rng.normal(size=40) > 0).astype(int)  # noisy, so a finite optimum exists
    w = np.zeros(arch.num_params)
    for _ in range(20000):
        w -= 1.0 * learning.gradient(arch, w, X, y)
    assert np.linalg.norm(learning.gradient(arch, w, X, y)) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_nonnegative_and_finite(seed):
    rng = np.random.default_rng(seed)
    arch = Architecture(3, (4,), 3)
    w = rng.normal(scale=5.0, size=arch.num_params)
    X, y = rng.normal(size=(4, 3)), rng.integers(0, 3, 4)
    v = learning.loss(arch, w, X, y)
    assert math.isfinite(v) and v >= 0


def test_generate_iid():
    data = learning.generate_federated(5, 60, 10, 10, 4, seed=0)
    assert data.iid and data.num_clients == 5
    for c in data.clients:
        assert len(np.unique(c.y)) == 10


def test_generate_non_iid_label_subsets():
    data = learning.generate_federated(8, 30, 5, 10, 4, seed=0)
    assert not data.iid
    for c, labels in zip(data.clients, data.client_labels):
        assert len(np.unique(c.y)) <= 5
        assert set(np.unique(c.y)) <= set(labels)


def test_generate_deterministic():
    a = learning.generate_federated(3, 10, 2, 4, 3, seed=9)
    b = learning.generate_federated(3, 10, 2, 4, 3, seed=9)
    for ca, cb in zip(a.clients, b.clients):
        assert np.array_equal(ca.X, cb.X) and np.array_equal(ca.y, cb.y)


def test_clients_draw_without_replacement():
    data = learning.generate_federated(4, 25, 10, 10, 3, seed=1)
    rows = np.vstack([c.X for c in data.clients])
    assert np.unique(rows, axis=0).shape[0] == rows.shape[0]


def test_impossible_partition():
    with pytest.raises(learning.ConfigError):
        learning.generate_federated(4, 30, 2, 4, 3, seed=0, pool_per_label=20)
    with pytest.raises(learning.ConfigError):
        learning.generate_federated(2, 5, 5, 4, 3, seed=0)


def test_csv_ingestion(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "d.csv"
    X = rng.normal(size=(100, 3))
    y = rng.integers(0, 3, 100)
    with open(path, "w") as fh:
        fh.write("a,b,c,label\n")
        for row, label in zip(X, y):
            fh.write(",".join(repr(float(v)) for v in row) + f",{label}\n")
    X2, y2 = learning.load_csv(path)
    assert np.array_equal(X2, X) and np.array_equal(y2, y)
    data = learning.federated_from_csv(path, N=4, per_client=15, labels_per_client=3, seed=0)
    assert data.num_clients == 4 and data.label_count == 3 and len(data.test) == 20


def test_csv_rejects_bad_labels(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1.0,2.0,0.5\n")
    with pytest.raises(learning.DataError):
        learning.load_csv(path)
