"""Klyshko heralding efficiencies and the power/length noise model.

With pair rate ~ P**2 L, Raman noise ~ P L and leaked pump ~ P in the
herald arm, the measured heralding efficiency is

    eta_K = eta_S * P**2 L / (P**2 L + beta P L + alpha P)

``alpha`` (mW m) and ``beta`` (mW) are the noise-to-pair ratios of the
pump-leak and Raman terms.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ConvergenceError, DegenerateDataError, StatisticsError

PARAM_NAMES = ("eta_S", "alpha", "beta")
DATASET_SCHEMA = "hpl-klyshko/1"


def estimate_klyshko(n_hs: int, n_h: int) -> tuple[float, float]:
    """Heralding efficiency N_HS / N_H with its binomial standard error."""
    if n_h <= 0:
        raise StatisticsError("no herald detections; Klyshko efficiency undefined")
    if not 0 <= n_hs <= n_h:
        raise ConfigError(f"coincidences ({n_hs}) must lie between 0 and heralds ({n_h})")
    eta = n_hs / n_h
    return eta, math.sqrt(eta * (1.0 - eta) / n_h)


def model_eta(P, L, eta_S: float, alpha: float, beta: float):
    P = np.asarray(P, dtype=float)
    L = np.asarray(L, dtype=float)
    if np.any(P <= 0) or np.any(L <= 0):
        raise ConfigError("pump power and fiber length must be positive")
    pair = P * P * L
    out = eta_S * pair / (pair + beta * P * L + alpha * P)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KlyshkoPoint:
    pump_power: float
    fiber_length: float
    detector: str
    eta_k: float
    sigma: float


@dataclass(frozen=True)
class KlyshkoDataset:
    points: tuple[KlyshkoPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        for pt in self.points:
            if not 0 <= pt.eta_k <= 1:
                raise ConfigError(f"eta_K={pt.eta_k} outside [0, 1]")
            if not pt.sigma > 0:
                raise ConfigError("every point needs a positive sigma")
            if pt.pump_power <= 0 or pt.fiber_length <= 0:
                raise ConfigError("powers and lengths must be positive")

    @classmethod
    def from_arrays(cls, P, L, eta, sigma, detector="A") -> "KlyshkoDataset":
        P, L, eta, sigma = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (P, L, eta, sigma)))
        return cls(tuple(KlyshkoPoint(float(p), float(l), detector, float(e), float(s))
                         for p, l, e, s in zip(P.ravel(), L.ravel(), eta.ravel(), sigma.ravel())))

    def arrays(self):
        P = np.array([pt.pump_power for pt in self.points])
        L = np.array([pt.fiber_length for pt in self.points])
        eta = np.array([pt.eta_k for pt in self.points])
        sigma = np.array([pt.sigma for pt in self.points])
        return P, L, eta, sigma

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        buf.write(f"#schema={DATASET_SCHEMA}{header}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["power_mw", "length_m", "detector", "eta_k", "sigma"])
        for pt in self.points:
            writer.writerow([repr(pt.pump_power), repr(pt.fiber_length), pt.detector,
                             repr(pt.eta_k), repr(pt.sigma)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "KlyshkoDataset":
        lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
        try:
            return cls(tuple(KlyshkoPoint(float(r["power_mw"]), float(r["length_m"]), r["detector"],
                                          float(r["eta_k"]), float(r["sigma"]))
                             for r in csv.DictReader(lines)))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"malformed Klyshko dataset: {exc}") from None


@dataclass(frozen=True)
class KlyshkoFitResult:
    eta_S: float
    alpha: float
    beta: float
    residual_norm: float
    parameter_covariance: np.ndarray
    n_iterations: int = 0
    active_bounds: tuple[str, ...] = ()
    weighted: bool = True

    @property
    def params(self) -> np.ndarray:
        return np.array([self.eta_S, self.alpha, self.beta])

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.parameter_covariance), 0.0, None))

    def confidence_interval(self, name: str, z: float = 1.96) -> tuple[float, float]:
        """Symmetric normal interval from the final linearisation."""
        i = PARAM_NAMES.index(name)
        value, err = self.params[i], self.stderr[i]
        return value - z * err, value + z * err

    def to_json(self) -> dict:
        return {
            "eta_S": self.eta_S,
            "alpha": self.alpha,
            "beta": self.beta,
            "stderr": dict(zip(PARAM_NAMES, self.stderr.tolist())),
            "confidence_95": {n: list(self.confidence_interval(n)) for n in PARAM_NAMES},
            "residual_norm": self.residual_norm,
            "parameter_covariance": self.parameter_covariance.tolist(),
            "n_iterations": self.n_iterations,
            "active_bounds": list(self.active_bounds),
            "weighted": self.weighted,
        }


LOWER = np.array([0.0, 0.0, 0.0])
UPPER = np.array([1.0, np.inf, np.inf])


def _check_identifiable(P, L):
    if len(P) < len(PARAM_NAMES) + 1:
        raise DegenerateDataError(f"need at least 4 points to fit 3 parameters, got {len(P)}")
    if len(np.unique(P)) < 2:
        raise DegenerateDataError("all points share one pump power; pair and noise terms are degenerate")
    if len(np.unique(L)) < 2:
        raise DegenerateDataError("all points share one fiber length; Raman and pump-leak terms are degenerate")


class _Problem:
    def __init__(self, P, L, eta, w):
        self.P, self.L, self.eta, self.sw = P, L, eta, np.sqrt(w)

    def residual(self, theta):
        return self.sw * (model_eta(self.P, self.L, *theta) - self.eta)

    def jacobian(self, theta):
        J = np.empty((len(self.P), 3))
        for j in range(3):
            h = 1e-6 * max(abs(theta[j]), 1e-3 if j == 0 else 1.0)
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            J[:, j] = (self.residual(up) - self.residual(dn)) / (2 * h)
        return J


def _free_mask(theta, grad):
    at_lo = (theta <= LOWER) & (grad > 0)
    at_hi = (theta >= UPPER) & (grad < 0)
    return ~(at_lo | at_hi)


def _levenberg_marquardt(problem: _Problem, theta0, max_iter=500, xtol=1e-12, ftol=1e-15):
    """Projected Levenberg-Marquardt with Marquardt diagonal scaling.

    Parameters pinned at a bound with the gradient pointing outward are
    frozen for the step. Returns (theta, n_iterations).
    """
    theta = np.clip(np.asarray(theta0, dtype=float), LOWER, UPPER)
    r = problem.residual(theta)
    cost = r @ r
    lam = 1e-3
    for it in range(1, max_iter + 1):
        J = problem.jacobian(theta)
        g = J.T @ r
        free = _free_mask(theta, g)
        if not free.any():
            return theta, it
        A = J[:, free].T @ J[:, free]
        d = np.maximum(np.diag(A), 1e-300)
        while True:
            try:
                step_f = np.linalg.solve(A + lam * np.diag(d), -g[free])
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            step = np.zeros(3)
            step[free] = step_f
            trial = np.clip(theta + step, LOWER, UPPER)
            actual = trial - theta
            small = np.linalg.norm(actual / (np.abs(theta) + 1e-8)) <= xtol
            r_new = problem.residual(trial)
            cost_new = r_new @ r_new
            if cost_new <= cost:
                converged = small or (cost - cost_new) <= ftol * cost or cost_new == 0.0
                theta, r, cost = trial, r_new, cost_new
                lam = max(lam / 10, 1e-12)
                if converged:
                    return theta, it
                break
            if small:
                return theta, it
            lam *= 10
            if lam > 1e16:
                return theta, it
    raise ConvergenceError(f"Klyshko fit did not converge in {max_iter} iterations")


def _starts(eta):
    eta0 = float(min(1.0, max(np.max(eta), 1e-3)))
    alphas = np.concatenate([[0.0], np.logspace(0, 4, 4)])
    betas = np.concatenate([[0.0], np.logspace(-2, 2, 4)])
    for a, b in product(alphas, betas):
        yield np.array([eta0, a, b])


def fit_klyshko(dataset: KlyshkoDataset, weighted: bool = True, x0: Sequence[float] | None = None,
                max_iter: int = 500) -> KlyshkoFitResult:
    """Weighted least-squares fit of (eta_S, alpha, beta), all non-negative, eta_S <= 1.

    Without ``x0`` a grid of (alpha, beta) starts is tried and the lowest
    residual kept. Weights are 1/sigma**2; the covariance is the inverse
    of the weighted normal matrix at the solution, so it reflects the
    quoted sigmas. Unweighted fits scale it by the residual variance.
    """
    P, L, eta, sigma = dataset.arrays()
    _check_identifiable(P, L)
    w = 1.0 / sigma**2 if weighted else np.ones_like(eta)
    problem = _Problem(P, L, eta, w)

    starts = [np.asarray(x0, dtype=float)] if x0 is not None else list(_starts(eta))
    best = None
    failures = 0
    for start in starts:
        try:
            theta, n_it = _levenberg_marquardt(problem, start, max_iter=max_iter)
        except ConvergenceError:
            failures += 1
            continue
        r = problem.residual(theta)
        cost = float(r @ r)
        if best is None or cost < best[0]:
            best = (cost, theta, n_it)
    if best is None:
        raise ConvergenceError(f"all {failures} fit starts failed to converge")
    cost, theta, n_it = best

    J = problem.jacobian(theta)
    cov = np.linalg.pinv(J.T @ J)
    if not weighted:
        dof = max(len(eta) - 3, 1)
        cov = cov * cost / dof
    grad = J.T @ problem.residual(theta)
    pinned = ~_free_mask(theta, grad) | (theta <= LOWER) | (theta >= UPPER)
    active = tuple(n for n, a in zip(PARAM_NAMES, pinned) if a)
    return KlyshkoFitResult(float(theta[0]), float(theta[1]), float(theta[2]), math.sqrt(cost),
                            cov, n_it, active, weighted)


def noise_budget(fit: KlyshkoFitResult, P: float, L: float) -> tuple[float, float, float]:
    """Shares of pair, Raman and pump-leak terms in the herald-arm rate."""
    terms = np.array([P * P * L, fit.beta * P * L, fit.alpha * P])
    frac = terms / terms.sum()
    return float(frac[0]), float(frac[1]), float(frac[2])


def model_rows(fit: KlyshkoFitResult, dataset: KlyshkoDataset) -> list[tuple]:
    P, L, eta, _ = dataset.arrays()
    model = model_eta(P, L, fit.eta_S, fit.alpha, fit.beta)
    return [(float(p), float(l), pt.detector, float(e), float(m), float(e - m))
            for p, l, e, m, pt in zip(P, L, eta, np.atleast_1d(model), dataset.points)]


def dataset_from_points(points: Iterable[KlyshkoPoint]) -> KlyshkoDataset:
    return KlyshkoDataset(tuple(sorted(points, key=lambda p: (p.pump_power, p.fiber_length, p.detector))))
