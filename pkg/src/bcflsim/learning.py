"""Desk-scale classifier, federated data generation and loss/gradient evaluation.

Parameters are kept as one flat float64 vector. Layer ``l`` occupies a weight
block of shape ``(in, out)`` stored row-major, followed by its bias of length
``out``. ``hidden_widths=()`` gives plain softmax regression.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class ArchitectureError(ValueError):
    pass


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_widths: tuple = (64,)
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ArchitectureError(f"zero-width layer in {self}")
        if self.num_classes < 2:
            raise ArchitectureError("num_classes must be at least 2")
        if self.activation not in ("relu", "tanh"):
            raise ArchitectureError(f"unknown activation {self.activation!r}")

    @property
    def layer_shapes(self):
        widths = (self.input_dim, *self.hidden_widths, self.num_classes)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self):
        return sum(i * o + o for i, o in self.layer_shapes)

    def unpack(self, params):
        """Views ``[(W, b), ...]`` into ``params``."""
        params = np.asarray(params)
        if params.shape != (self.num_params,):
            raise DataError(f"expected {self.num_params} parameters, got {params.shape}")
        layers = []
        pos = 0
        for i, o in self.layer_shapes:
            W = params[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = params[pos:pos + o]
            pos += o
            layers.append((W, b))
        return layers


def init_model(arch, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    chunks = []
    for i, o in arch.layer_shapes:
        bound = 1.0 / np.sqrt(i)
        chunks.append(rng.uniform(-bound, bound, size=i * o))
        chunks.append(rng.uniform(-bound, bound, size=o))
    return np.concatenate(chunks)


def _check_labels(arch, y):
    if y.size == 0:
        raise DataError("empty sample set")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise DataError(f"label out of range [0, {arch.num_classes})")


def _forward(arch, params, X):
    acts = [X]
    layers = arch.unpack(params)
    h = X
    for W, b in layers[:-1]:
        z = h @ W + b
        h = np.maximum(z, 0.0) if arch.activation == "relu" else np.tanh(z)
        acts.append(h)
    W, b = layers[-1]
    logits = h @ W + b
    return acts, logits


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(arch, params, X, y):
    """Mean softmax cross-entropy over the samples."""
    y = np.asarray(y)
    _check_labels(arch, y)
    _, logits = _forward(arch, params, X)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(y.shape[0]), y].mean())


def loss_and_gradient(arch, params, X, y):
    y = np.asarray(y)
    _check_labels(arch, y)
    n = y.shape[0]
    acts, logits = _forward(arch, params, X)
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    layers = arch.unpack(params)
    grads = [None] * (2 * len(layers))
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        h = acts[l]
        grads[2 * l] = (h.T @ delta).ravel()
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ W.T
            if arch.activation == "relu":
                delta = delta * (h > 0)
            else:
                delta = delta * (1.0 - h * h)
    return value, np.concatenate(grads)


def gradient(arch, params, X, y):
    return loss_and_gradient(arch, params, X, y)[1]


def accuracy(arch, params, X, y):
    _, logits = _forward(arch, params, X)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


@dataclass
class ClientData:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.y.shape[0]

    def batch(self, indices):
        return ClientData(self.X[indices], self.y[indices])


@dataclass
class FederatedDataset:
    clients: list
    test: ClientData
    label_count: int
    iid: bool = False
    client_labels: list = field(default_factory=list)

    @property
    def feature_dim(self):
        return self.test.X.shape[1]

    @property
    def num_clients(self):
        return len(self.clients)


def partition_samples(X, y, N, per_client, labels_per_client, label_count, rng):
    """Split a labelled pool over ``N`` clients without replacement.

    With ``labels_per_client == label_count`` every client draws uniformly
    from the whole pool. Otherwise each client picks a random label subset of
    that size and draws only samples carrying those labels.
    """
    if not 1 <= labels_per_client <= label_count:
        raise ConfigError("labels_per_client must lie in [1, label_count]")
    y = np.asarray(y)
    available = np.ones(y.shape[0], dtype=bool)
    clients, subsets = [], []
    for i in range(N):
        if labels_per_client == label_count:
            labels = np.arange(label_count)
            pool = np.flatnonzero(available)
        else:
            labels = np.sort(rng.choice(label_count, size=labels_per_client, replace=False))
            pool = np.flatnonzero(available & np.isin(y, labels))
        if pool.shape[0] < per_client:
            raise ConfigError(
                f"client {i} needs {per_client} samples but only {pool.shape[0]} remain "
                f"for labels {labels.tolist()}"
            )
        pick = np.sort(rng.choice(pool, size=per_client, replace=False))
        available[pick] = False
        clients.append(ClientData(X[pick], y[pick]))
        subsets.append(labels.tolist())
    return clients, subsets


def generate_federated(N, per_client, labels_per_client, label_count, feature_dim, seed,
                       test_size=1000, pool_per_label=None, separation=1.0):
    """Gaussian class clusters partitioned over ``N`` clients.

    Class means are drawn from ``N(0, separation^2 I)`` and samples add unit
    Gaussian noise. Training samples come from a finite pool of
    ``pool_per_label`` samples per class (default: enough for any partition);
    the test set is drawn separately, so it never overlaps training data.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(label_count, feature_dim))
    if pool_per_label is None:
        pool_per_label = N * per_client
    y_pool = np.repeat(np.arange(label_count), pool_per_label)
    X_pool = means[y_pool] + rng.normal(size=(y_pool.shape[0], feature_dim))
    clients, subsets = partition_samples(
        X_pool, y_pool, N, per_client, labels_per_client, label_count, rng
    )
    y_test = rng.integers(0, label_count, size=test_size)
    X_test = means[y_test] + rng.normal(size=(test_size, feature_dim))
    return FederatedDataset(
        clients=clients,
        test=ClientData(X_test, y_test),
        label_count=label_count,
        iid=labels_per_client == label_count,
        client_labels=subsets,
    )


def load_csv(path):
    """Read ``feature_1, ..., feature_n, label`` rows; a non-numeric first row is a header."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if lineno == 0:
                    continue
                raise DataError(f"{path}:{lineno + 1}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: no samples")
    data = np.asarray(rows)
    labels = data[:, -1]
    if np.any(labels != np.round(labels)) or labels.min() < 0:
        raise DataError(f"{path}: labels must be nonnegative integers")
    return data[:, :-1], labels.astype(np.int64)


def federated_from_csv(path, N, per_client, labels_per_client, seed, test_fraction=0.2):
    X, y = load_csv(path)
    label_count = int(y.max()) + 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(y.shape[0])
    n_test = max(1, int(round(test_fraction * y.shape[0])))
    test_idx, train_idx = order[:n_test], order[n_test:]
    clients, subsets = partition_samples(
        X[train_idx], y[train_idx], N, per_client, labels_per_client, label_count, rng
    )
    return FederatedDataset(
        clients=clients,
        test=ClientData(X[test_idx], y[test_idx]),
        label_count=label_count,
        iid=labels_per_client == label_count,
        client_labels=subsets,
    )
