"""Photon-number reconstruction by linear inversion of the click matrix.

The estimate is unconstrained: p_n can come out negative under statistical
or systematic error, and the vacuum term is closed as
``p_0 = 1 - sum_{n>=1} p_n``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .coincidence import ClickFrequencies
from .detector_bank import ConditionalProbMatrix, DetectorBankConfig, build_conditional_matrix
from .errors import ConfigError

SINGULAR_DIAGONAL = 1e-12


@dataclass(frozen=True)
class NumberDistributionEstimate:
    p: np.ndarray
    covariance: np.ndarray
    provenance: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_max(self) -> int:
        return len(self.p) - 1

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_json(self) -> dict:
        return {
            "p": [float(v) for v in self.p],
            "sigma": [float(v) for v in self.sigma],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "provenance": dict(self.provenance),
        }

    def csv_rows(self) -> list[tuple[int, float, float]]:
        return [(n, float(p), float(s)) for n, (p, s) in enumerate(zip(self.p, self.sigma))]


def _as_clicks(clicks, n_max: int, covariance=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(clicks, ClickFrequencies):
        q, cov = clicks.truncated(n_max)
    else:
        q = np.asarray(clicks, dtype=float)
        cov = np.zeros((len(q), len(q)))
    if covariance is not None:
        cov = np.asarray(covariance, dtype=float)
    if q.shape != (n_max,) or cov.shape != (n_max, n_max):
        raise ConfigError(f"click vector must have {n_max} entries (q_1..q_{n_max})")
    return q, cov


def invert_clicks(clicks: ClickFrequencies | Sequence[float], matrix: ConditionalProbMatrix,
                  covariance=None, provenance: Mapping[str, Any] | None = None) -> NumberDistributionEstimate:
    """Solve ``M p = q`` by back-substitution and propagate the covariance.

    ``clicks`` is either a :class:`ClickFrequencies` (q_0..q_m with its
    multinomial covariance) or a plain vector q_1..q_nmax, in which case
    the covariance defaults to zero. An explicit ``covariance`` overrides
    either.
    """
    M = matrix.matrix
    n_max = matrix.n_max
    if np.any(np.diag(M) < SINGULAR_DIAGONAL):
        raise ConfigError("conditional matrix is singular; a detector has zero efficiency")
    q, cov_q = _as_clicks(clicks, n_max, covariance)

    p_pos = solve_triangular(M, q, lower=False)
    # Cov(p) = M^-1 Cov(q) M^-T via two triangular solves
    left = solve_triangular(M, cov_q, lower=False)
    cov_pos = solve_triangular(M, left.T, lower=False).T
    cov_pos = 0.5 * (cov_pos + cov_pos.T)

    # p_0 = 1 - sum(p_pos) is affine in p_pos: embed with the row (-1, ..., -1)
    closure = np.vstack([-np.ones(n_max), np.eye(n_max)])
    p = np.concatenate([[1.0 - p_pos.sum()], p_pos])
    cov = closure @ cov_pos @ closure.T
    meta = {"efficiencies": "tracer"}
    meta.update(provenance or {})
    return NumberDistributionEstimate(p, cov, meta)


def infer_noise_free(clicks: ClickFrequencies | Sequence[float], bank: DetectorBankConfig,
                     klyshko_etas: Mapping[str, float] | Sequence[float], n_max: int | None = None,
                     per_path: bool = False, covariance=None) -> NumberDistributionEstimate:
    """Invert with Klyshko heralding efficiencies in place of tracer efficiencies.

    A Klyshko efficiency measured on a single signal detector includes that
    detector's split fraction, so by default each value is divided by
    ``R_i`` to give the path efficiency used in the matrix. Pass
    ``per_path=True`` when the values are already path efficiencies, e.g.
    from a fitted efficiency model.
    """
    if isinstance(klyshko_etas, Mapping):
        missing = set(bank.labels) - set(klyshko_etas)
        if missing:
            raise ConfigError(f"no Klyshko efficiency for detectors {sorted(missing)}")
        etas = np.array([float(klyshko_etas[l]) for l in bank.labels])
    else:
        etas = np.asarray(klyshko_etas, dtype=float)
        if etas.shape != (bank.m,):
            raise ConfigError(f"expected {bank.m} Klyshko efficiencies, got {etas.shape}")
    if np.any(etas <= 0) or np.any(etas > 1):
        raise ConfigError(f"Klyshko efficiencies must lie in (0, 1], got {etas.tolist()}")
    if per_path:
        path = etas
    else:
        R = bank.split_fractions
        if np.any(R <= 0):
            raise ConfigError("cannot normalise Klyshko efficiency of a detector with zero split")
        path = etas / R
        if np.any(path > 1 + 1e-12):
            raise ConfigError(f"Klyshko efficiency exceeds split fraction: path efficiencies {path.tolist()}")
        path = np.minimum(path, 1.0)
    rebuilt = bank.with_efficiencies(path)
    matrix = build_conditional_matrix(rebuilt, n_max)
    return invert_clicks(clicks, matrix, covariance,
                         provenance={"efficiencies": "klyshko",
                                     "path_efficiencies": dict(zip(bank.labels, path.tolist()))})


def systematic_band(clicks: ClickFrequencies | Sequence[float], bank: DetectorBankConfig,
                    delta: float = 0.05, n_max: int | None = None) -> np.ndarray:
    """Half-range of p over a +/- ``delta`` shift of every path efficiency.

    Shifts are absolute (0.36 +/- 0.05) and clipped to (0, 1].
    """
    estimates = []
    for sign in (-1.0, 1.0):
        eff = np.clip(bank.efficiencies + sign * delta, 1e-9, 1.0)
        estimates.append(invert_clicks(clicks, build_conditional_matrix(bank.with_efficiencies(eff), n_max)).p)
    return 0.5 * np.abs(estimates[1] - estimates[0])


def noise_equivalent_efficiency(eta_S: float, mu_pair: float, mu_noise: float) -> float:
    """Klyshko efficiency when independent noise dilutes herald clicks."""
    if mu_pair + mu_noise <= 0:
        raise ZeroDivisionError("mean pair and noise counts are both zero")
    return eta_S * mu_pair / (mu_pair + mu_noise)
