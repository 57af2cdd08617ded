"""Convergence-bound constants and the accuracy objective J(k, lam).

Constants are estimated from one global iteration: a secant smoothness
estimate between ``w0`` and ``w_E``, gradient-norm and dissimilarity bounds
from client gradients at ``w0``, and the loss at ``w_E`` as the optimality gap
(the optimum is taken to be 0).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import learning
from .timecost import h as round_time


class ConvergenceError(ValueError):
    pass


@dataclass
class ConvergenceParams:
    L: float
    G2: float
    Gamma2: float
    gap: float
    C: float = 0.15
    E: int = 5
    N: int = 50
    b: float = 1.0
    sigma2: list = field(default_factory=list)

    def __post_init__(self):
        vals = [self.L, self.G2, self.Gamma2, self.gap, self.C, *self.sigma2]
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ConvergenceError("convergence constants must be finite and nonnegative")
        if self.E < 1 or self.N < 1 or self.b <= 0:
            raise ConvergenceError("need E >= 1, N >= 1, b > 0")

    def step_size_ok(self, T):
        """Whether eta = C / sqrt(T) respects eta <= 1 / (16 L); warns if not."""
        if T < 1:
            raise ConvergenceError("T must be at least 1")
        ok = self.L == 0 or self.C / math.sqrt(T) <= 1.0 / (16.0 * self.L)
        if not ok:
            warnings.warn(
                f"eta = C/sqrt(T) = {self.C / math.sqrt(T):.4g} exceeds 1/(16L) = {1 / (16 * self.L):.4g}",
                stacklevel=2,
            )
        return ok

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class BoundCoefficients:
    A: float
    B: float


def estimate_from_observations(w0, w_E, client_grads_w0, grad_wE, loss_wE, C=0.15, E=5, b=1.0,
                               sigma2=None):
    """Constants from raw first-round observations.

    ``client_grads_w0`` is an ``(N, d)`` array of local gradients at ``w0``;
    the global gradient is their uniform mean. ``grad_wE`` and ``loss_wE``
    are the global gradient and loss at ``w_E``.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    w_E = np.asarray(w_E, dtype=np.float64)
    G = np.atleast_2d(np.asarray(client_grads_w0, dtype=np.float64))
    step = float(np.linalg.norm(w_E - w0))
    if step == 0.0:
        raise ConvergenceError("w_E equals w0; smoothness cannot be estimated")
    g0 = G.mean(axis=0)
    L = float(np.linalg.norm(np.asarray(grad_wE) - g0)) / step
    G2 = float(np.max(np.einsum("ij,ij->i", G, G)))
    dev = G - g0
    Gamma2 = float(np.max(np.einsum("ij,ij->i", dev, dev)))
    N = G.shape[0]
    return ConvergenceParams(
        L=L, G2=G2, Gamma2=Gamma2, gap=float(loss_wE), C=C, E=E, N=N, b=b,
        sigma2=list(sigma2) if sigma2 is not None else [0.0] * N,
    )


def estimate_params(arch, clients, w0, w_E, C=0.15, E=5, b=1.0):
    """Estimate constants for a model trained on ``clients`` (full batch, sigma = 0)."""
    grads = []
    for c in clients:
        grads.append(learning.gradient(arch, w0, c.X, c.y))
    loss_E = 0.0
    grad_E = np.zeros_like(w0)
    for c in clients:
        l, g = learning.loss_and_gradient(arch, w_E, c.X, c.y)
        loss_E += l
        grad_E += g
    n = len(clients)
    return estimate_from_observations(w0, w_E, np.array(grads), grad_E / n, loss_E / n, C, E, b)


def bound_coefficients(p):
    """``(Lambda_A, Lambda_B)`` of the round-count bound."""
    if p.C <= 0:
        raise ConvergenceError("C must be positive")
    variance = p.C * p.L * sum(p.sigma2) / (p.b * p.N ** 2)
    A = 8.0 / math.sqrt(p.E) * (p.gap / p.C + 2.0 * p.C * p.L * p.Gamma2 + variance)
    B = 16.0 * p.C ** 2 * p.L ** 2 * p.G2 * p.E
    return BoundCoefficients(A, B)


def theorem_bound(p, T, gamma):
    """Bound on the mean squared gradient norm after ``T`` local iterations."""
    if T <= 0 or not 0 < gamma <= 1:
        raise ConvergenceError("need T > 0 and 0 < gamma <= 1")
    if p.C <= 0:
        raise ConvergenceError("C must be positive")
    variance = p.C * p.L * sum(p.sigma2) / (p.b * p.N ** 2)
    first = (p.gap / p.C + 2.0 * p.C * p.L * p.Gamma2 + variance) * 8.0 / math.sqrt(T)
    second = (4.0 / gamma ** 2 - 3.0) * 16.0 * p.C ** 2 * p.L ** 2 * p.G2 * p.E ** 2 / T
    return first + second


def compression_factor(k, d, keep_three=True):
    return 4.0 * d * d / (k * k) - (3.0 if keep_three else 0.0)


def rounds_bound(coeffs, R, k, d, keep_three=True):
    """The bound written in global rounds ``R``."""
    if R <= 0:
        raise ConvergenceError("R must be positive")
    return coeffs.A / math.sqrt(R) + coeffs.B * compression_factor(k, d, keep_three) / R


def bound_from_h(h, k, d, coeffs, Y, keep_three=True):
    if Y <= 0 or h <= 0:
        raise ConvergenceError("need Y > 0 and h > 0")
    return coeffs.A * math.sqrt(h / Y) + coeffs.B * compression_factor(k, d, keep_three) * h / Y


def bound_value(k, lam, env, coeffs, Y, keep_three=True):
    """J(k, lam) for a time budget ``Y``; ``keep_three=False`` gives the simplified form."""
    return bound_from_h(round_time(k, lam, env), k, env.d, coeffs, Y, keep_three)


def objective_sq_from_h(h, k, d, coeffs, Y):
    """Three-term expansion of J^2 (simplified form, without the -3)."""
    A, B = coeffs.A, coeffs.B
    return (A * A * h / Y
            + 16.0 * B * B * d ** 4 / (Y * Y) * (h / (k * k)) ** 2
            + 8.0 * A * B * d * d / Y ** 1.5 * (h / k ** (4.0 / 3.0)) ** 1.5)


def objective_sq(k, lam, env, coeffs, Y):
    return objective_sq_from_h(round_time(k, lam, env), k, env.d, coeffs, Y)


def residual_bound(eta, gamma, E, G2):
    """Bound on the expected squared norm of a client's compensation vector."""
    if not 0 < gamma <= 1:
        raise ConvergenceError("gamma must lie in (0, 1]")
    return 4.0 * eta ** 2 * (1.0 - gamma) ** 2 * E ** 2 * G2 / gamma ** 2


class GradientHistory:
    """Reservoir sample of squared gradient norms along a training run."""

    def __init__(self, capacity=100_000, seed=0):
        if capacity < 1:
            raise ConvergenceError("capacity must be positive")
        self.capacity = capacity
        self.seen = 0
        self.values = []
        self._rng = np.random.default_rng(seed)

    def record(self, norm2):
        self.seen += 1
        if len(self.values) < self.capacity:
            self.values.append(float(norm2))
        else:
            j = int(self._rng.integers(0, self.seen))
            if j < self.capacity:
                self.values[j] = float(norm2)

    def __len__(self):
        return len(self.values)


def sampled_gradient_norm(history):
    """Mean of the recorded squared gradient norms."""
    vals = history.values if isinstance(history, GradientHistory) else list(history)
    if not vals:
        raise ConvergenceError("empty gradient history")
    return float(np.mean(vals))
