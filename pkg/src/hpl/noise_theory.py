"""Analytic model of heralding with independent herald-channel noise.

A herald click comes from the pair process with probability ``eta_r``.
Conditioning on ``k_r`` herald clicks then mixes the noise-free conditional
signal distributions with binomial weights, which has the same form as
sending the noise-free heralded signal through a loss channel of
transmission ``eta_r``. ``check_noise_loss_equivalence`` evaluates both
sides by separate code paths.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import ConfigError
from .source_model import JointPhotonDistribution


@dataclass(frozen=True)
class HeraldNoiseParams:
    eta_r: float

    def __post_init__(self):
        if not 0 <= self.eta_r <= 1:
            raise ConfigError(f"eta_r must lie in [0, 1], got {self.eta_r!r}")

    @property
    def rho_loss(self) -> float:
        return 1.0 - self.eta_r


def _eta(params) -> float:
    return params.eta_r if isinstance(params, HeraldNoiseParams) else HeraldNoiseParams(float(params)).eta_r


def conditional_signal(joint: JointPhotonDistribution, n_s: int, n_r: int) -> float:
    """Noise-free P(n_s | n_r) = P_rs(n_s, n_r) / P_r(n_r)."""
    if not 0 <= n_r <= joint.n_max:
        raise ConfigError(f"n_r={n_r} outside the table")
    marginal = joint.herald_marginal()[n_r]
    if marginal <= 0:
        raise ConfigError(f"herald photon number {n_r} has zero probability")
    if not 0 <= n_s <= joint.n_max:
        return 0.0
    return float(joint.table[n_s, n_r] / marginal)


def herald_origin_binomial(m: int, k: int, params) -> float:
    """Probability that ``m`` of ``k`` herald clicks come from the pair process."""
    if not 0 <= m <= k:
        raise ConfigError(f"need 0 <= m <= k, got m={m}, k={k}")
    eta = _eta(params)
    return comb(k, m) * eta**m * (1.0 - eta) ** (k - m)


def noisy_herald_distribution(joint: JointPhotonDistribution, params, k_r: int):
    """Signal distribution over n_s = 0..n_max given ``k_r`` herald clicks.

    Terms whose herald photon number has zero probability are dropped and
    the remaining binomial weights renormalised; their indices are returned
    as the second element.
    """
    marginal = joint.herald_marginal()
    weights, dropped = [], []
    for m in range(k_r + 1):
        if m <= joint.n_max and marginal[m] > 0:
            weights.append((m, herald_origin_binomial(m, k_r, params)))
        else:
            dropped.append(m)
    total = sum(w for _, w in weights)
    if total <= 0:
        raise ConfigError(f"no admissible herald origin for k_r={k_r}")
    dist = np.zeros(joint.n_max + 1)
    for m, w in weights:
        dist += (w / total) * joint.table[:, m] / marginal[m]
    return dist, tuple(dropped)


def noisy_herald_conditional(joint: JointPhotonDistribution, params, n_s: int, k_r: int) -> float:
    dist, _ = noisy_herald_distribution(joint, params, k_r)
    return float(dist[n_s]) if 0 <= n_s < len(dist) else 0.0


def lossy_signal_conditional(joint: JointPhotonDistribution, rho_loss: float, n: int, k: int) -> float:
    """Noise-free heralding on ``k`` photons, signal thinned by loss ``rho_loss``.

    Each signal photon survives independently with probability ``1 - rho_loss``.
    """
    if not 0 <= rho_loss <= 1:
        raise ConfigError(f"rho_loss must lie in [0, 1], got {rho_loss!r}")
    if n < 0:
        return 0.0
    keep = 1.0 - rho_loss
    total = 0.0
    for m in range(n, joint.n_max + 1):
        total += comb(m, n) * keep**n * rho_loss ** (m - n) * conditional_signal(joint, m, k)
    return total


def equivalence_table(joint: JointPhotonDistribution, eta_r: float, n_max: int):
    """Rows (k_r, n_s, noisy-herald value, lossy-signal value, |difference|)."""
    if not joint.is_diagonal():
        raise ConfigError("the noise/loss equivalence is only checked for perfectly correlated pairs")
    if n_max > joint.n_max:
        raise ConfigError(f"n_max={n_max} exceeds the joint table size {joint.n_max}")
    params = HeraldNoiseParams(eta_r)
    marginal = joint.herald_marginal()
    rows = []
    for k_r in range(n_max + 1):
        if marginal[k_r] <= 0:
            continue
        noisy, _ = noisy_herald_distribution(joint, params, k_r)
        for n_s in range(n_max + 1):
            lossy = lossy_signal_conditional(joint, params.rho_loss, n_s, k_r)
            rows.append((k_r, n_s, float(noisy[n_s]), lossy, abs(float(noisy[n_s]) - lossy)))
    return rows


def check_noise_loss_equivalence(joint: JointPhotonDistribution, eta_r: float, n_max: int) -> float:
    """Largest |noisy-herald - lossy-signal| over all (n_s, k_r) <= n_max."""
    return max(row[4] for row in equivalence_table(joint, eta_r, n_max))
