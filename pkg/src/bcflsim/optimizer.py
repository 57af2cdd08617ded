"""Choose (k, lam) by alternating 1-D minimization of J^2.

J^2 is convex in k for fixed lam and in lam for fixed k, so each half-step
is a golden-section search. Searches run on log k and log lam and the
objective is evaluated as log J^2: ``exp(Lambda_F * k)`` overflows float64
long before k reaches d on realistic networks, while its logarithm does not.
Minimizers are unchanged by either transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .convergence import BoundCoefficients
from .timecost import ParameterError, h_coefficients

INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
LAMBDA_BOUNDS = (1e-4, 100.0)


class ObjectiveError(FloatingPointError):
    def __init__(self, k, lam, value):
        super().__init__(f"non-finite objective {value} at k={k}, lam={lam}")
        self.k, self.lam = k, lam


def minimize_1d_convex(f, lo, hi, tol=1e-8, max_iter=500):
    """Golden-section search for the minimizer of a unimodal ``f`` on ``[lo, hi]``."""
    if not lo < hi:
        raise ParameterError(f"empty interval [{lo}, {hi}]")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    a, b = lo, hi
    c = b - INVPHI * (b - a)
    e = a + INVPHI * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + INVPHI * (b - a)
            fe = f(e)
    best_x, best_f = (c, fc) if fc <= fe else (e, fe)
    # boundary optima are only approached, so check the ends explicitly
    for x in (lo, hi):
        fx = f(x)
        if fx < best_f:
            best_x, best_f = x, fx
    return best_x


@dataclass(frozen=True)
class Objective:
    """J^2(k, lam) in its three-term form, built from round-time coefficients."""

    coeffs: BoundCoefficients
    hc: object  # timecost.HCoefficients
    d: int
    Y: float
    lam_bounds: tuple = LAMBDA_BOUNDS

    @classmethod
    def from_env(cls, env, coeffs, Y, lam_bounds=LAMBDA_BOUNDS):
        if Y <= 0:
            raise ParameterError("Y must be positive")
        lo, hi = lam_bounds
        if not 0 < lo < hi:
            raise ParameterError("lam bounds must satisfy 0 < lo < hi")
        return cls(coeffs, h_coefficients(env), env.d, float(Y), tuple(lam_bounds))

    def log_h(self, k, lam):
        hc = self.hc
        k = np.asarray(k, dtype=np.float64)
        lam = np.asarray(lam, dtype=np.float64)
        linear = np.log(hc.tau_fixed + hc.lambda_T * k)
        grow = hc.fork_per_lambda * lam * k + np.log(1.0 / lam + hc.lambda_P * k)
        return np.logaddexp(linear, grow)

    def log_value(self, k, lam):
        """log J^2, finite wherever k > 0 and lam > 0."""
        A, B = self.coeffs.A, self.coeffs.B
        lh = self.log_h(k, lam)
        lk = np.log(np.asarray(k, dtype=np.float64))
        ld, lY = math.log(self.d), math.log(self.Y)
        with np.errstate(divide="ignore"):
            la, lb = np.log(A), np.log(B)
        terms = [
            2 * la + lh - lY,
            math.log(16.0) + 2 * lb + 4 * ld - 2 * lY + 2 * (lh - 2 * lk),
            math.log(8.0) + la + lb + 2 * ld - 1.5 * lY + 1.5 * lh - 2 * lk,
        ]
        out = np.logaddexp(np.logaddexp(terms[0], terms[1]), terms[2])
        return float(out) if np.ndim(out) == 0 else out

    def __call__(self, k, lam):
        with np.errstate(over="ignore"):
            v = np.exp(self.log_value(k, lam))
        return float(v) if np.ndim(v) == 0 else v



def _checked_log(obj, k, lam):
    v = obj.log_value(k, lam)
    if not math.isfinite(v):
        raise ObjectiveError(k, lam, v)
    return v


@dataclass
class AcsSolution:
    k_star_real: float
    k_star_int: int
    lambda_star: float
    objective: float
    objective_int: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)  # (k, lam, J^2) after each half-step

    def to_dict(self):
        return {
            "k_star_real": self.k_star_real,
            "k_star_int": self.k_star_int,
            "lambda_star": self.lambda_star,
            "objective": self.objective,
            "objective_int": self.objective_int,
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": [list(t) for t in self.trace],
        }


def best_integer_k(obj, k_real, lam):
    lo = max(1, min(obj.d, math.floor(k_real)))
    hi = max(1, min(obj.d, math.ceil(k_real)))
    return lo if obj.log_value(lo, lam) <= obj.log_value(hi, lam) else hi


def acs_solve(obj, init=None, tol=1e-8, max_iters=100, search_tol=1e-10):
    """Alternate Convex Search; every accepted half-step does not raise J^2.

    ``obj`` needs ``log_value(k, lam)``, ``__call__``, ``d`` and ``lam_bounds``.
    Stops when a full sweep changes J^2 by at most ``tol`` relative.
    """
    lam_lo, lam_hi = obj.lam_bounds
    if init is None:
        init = (max(1.0, 0.01 * obj.d), min(max(1.0, lam_lo), lam_hi))
    k0, lam0 = init
    if not (1 <= k0 <= obj.d and lam_lo <= lam0 <= lam_hi):
        raise ParameterError(f"initial point {init} outside the feasible box")
    x, y = math.log(k0), math.log(lam0)
    xlo, xhi = 0.0, math.log(obj.d)
    ylo, yhi = math.log(lam_lo), math.log(lam_hi)
    f = lambda a, b: _checked_log(obj, math.exp(a), math.exp(b))  # noqa: E731

    cur = f(x, y)
    trace = [(math.exp(x), math.exp(y), math.exp(cur))]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        start = cur
        nx = minimize_1d_convex(lambda a: f(a, y), xlo, xhi, search_tol)
        fx = f(nx, y)
        if fx <= cur:
            x, cur = nx, fx
        trace.append((math.exp(x), math.exp(y), math.exp(cur)))
        ny = minimize_1d_convex(lambda b: f(x, b), ylo, yhi, search_tol)
        fy = f(x, ny)
        if fy <= cur:
            y, cur = ny, fy
        trace.append((math.exp(x), math.exp(y), math.exp(cur)))
        if abs(math.expm1(cur - start)) <= tol:
            converged = True
            break
    k_real = min(max(math.exp(x), 1.0), float(obj.d))
    lam = min(max(math.exp(y), lam_lo), lam_hi)
    k_int = best_integer_k(obj, k_real, lam)
    return AcsSolution(
        k_star_real=k_real, k_star_int=int(k_int), lambda_star=lam,
        objective=obj(k_real, lam), objective_int=obj(k_int, lam),
        iterations=it, converged=converged, trace=trace,
    )


def reoptimize_on_env_change(previous, obj, tol=1e-8, max_iters=100):
    """Warm-start ACS from a previous solution on an updated objective."""
    lam_lo, lam_hi = obj.lam_bounds
    k0 = min(max(previous.k_star_real, 1.0), obj.d)
    lam0 = min(max(previous.lambda_star, lam_lo), lam_hi)
    return acs_solve(obj, init=(k0, lam0), tol=tol, max_iters=max_iters)


def optimal_lambda(obj, k, search_tol=1e-10):
    """Best block rate for a fixed ``k``."""
    lo, hi = obj.lam_bounds
    y = minimize_1d_convex(lambda b: _checked_log(obj, k, math.exp(b)),
                           math.log(lo), math.log(hi), search_tol)
    return min(max(math.exp(y), lo), hi)


def log_grid(obj, nk=200, nl=200):
    """Log-spaced k in [1, d] and lam over the box."""
    ks = np.geomspace(1.0, obj.d, nk)
    lams = np.geomspace(*obj.lam_bounds, nl)
    return ks, lams


def grid_search(obj, ks, lams):
    """Exhaustive evaluation; returns ``(k, lam, J^2, table)``, table[i, j] = J^2(ks[i], lams[j])."""
    K, Lm = np.meshgrid(ks, lams, indexing="ij")
    logs = obj.log_value(K, Lm)
    i, j = np.unravel_index(np.argmin(logs), logs.shape)
    with np.errstate(over="ignore"):
        table = np.exp(logs)
    return float(ks[i]), float(lams[j]), float(np.exp(logs[i, j])), table


@dataclass
class ConvexityReport:
    min_along_k: float
    min_along_lambda: float
    worst_k: tuple
    worst_lambda: tuple
    checked: int
    skipped: int
    tolerance: float

    @property
    def convex(self):
        return min(self.min_along_k, self.min_along_lambda) >= -self.tolerance

    def to_dict(self):
        return {**self.__dict__, "convex": self.convex}


def _second_differences(x, F):
    """Second divided differences of F along axis 0 on a possibly uneven grid."""
    x = np.asarray(x, dtype=np.float64)[:, None]
    h1 = x[1:-1] - x[:-2]
    h2 = x[2:] - x[1:-1]
    with np.errstate(invalid="ignore", over="ignore"):
        return 2.0 * ((F[2:] - F[1:-1]) / h2 - (F[1:-1] - F[:-2]) / h1) / (h1 + h2)


def convexity_report(f, ks, lams, tol=1e-9):
    """Check J^2 (or any ``f(k, lam)``) for convexity along each axis of a grid.

    Triples touching a non-finite value (overflow far from the optimum) are
    skipped and counted rather than compared.
    """
    ks = np.asarray(ks, dtype=np.float64)
    lams = np.asarray(lams, dtype=np.float64)
    if ks.size < 3 or lams.size < 3:
        raise ParameterError("convexity check needs at least 3 points per axis")
    K, Lm = np.meshgrid(ks, lams, indexing="ij")
    with np.errstate(over="ignore"):
        F = np.asarray(f(K, Lm), dtype=np.float64)
    dk = _second_differences(ks, F)
    dl = _second_differences(lams, F.T)
    results = []
    skipped = 0
    for D, axis in ((dk, "k"), (dl, "lambda")):
        ok = np.isfinite(D)
        skipped += int(np.sum(~ok))
        if ok.any():
            masked = np.where(ok, D, np.inf)
            idx = np.unravel_index(np.argmin(masked), D.shape)
            if axis == "k":
                at = (float(ks[idx[0] + 1]), float(lams[idx[1]]))
            else:
                at = (float(ks[idx[1]]), float(lams[idx[0] + 1]))
            results.append((float(masked[idx]), at, int(ok.sum())))
        else:
            results.append((float("inf"), (float("nan"), float("nan")), 0))
    return ConvexityReport(
        min_along_k=results[0][0], min_along_lambda=results[1][0],
        worst_k=results[0][1], worst_lambda=results[1][1],
        checked=results[0][2] + results[1][2], skipped=skipped, tolerance=tol,
    )
