"""Per-pulse photon statistics of a pulsed SFWM pair source with herald noise.

Pair creation and noise-photon creation are independent processes. Mean
counts per pulse scale as

    pairs       g   * P**2 * L
    Raman       c_R * P * L
    pump leak   c_P * P

with P the average pump power in mW and L the fiber length in m.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.stats import poisson

from .errors import ConfigError

PAIR_FAMILIES = ("thermal", "poissonian")
TAIL_TOLERANCE = 1e-6
LOW_GAIN_WARN = 0.2


@dataclass(frozen=True)
class SourceParams:
    pump_power: float
    fiber_length: float
    pair_gain: float
    raman_coeff: float = 0.0
    pumpleak_coeff: float = 0.0
    pair_family: str = "thermal"
    n_max: int = 3
    signal_noise_mean: float = 0.0

    def __post_init__(self):
        if not self.pump_power > 0 or not self.fiber_length > 0:
            raise ConfigError("pump_power and fiber_length must be positive")
        for name in ("pair_gain", "raman_coeff", "pumpleak_coeff", "signal_noise_mean"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a finite non-negative number, got {value!r}")
        if self.pair_family not in PAIR_FAMILIES:
            raise ConfigError(f"pair_family must be one of {PAIR_FAMILIES}, got {self.pair_family!r}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ConfigError(f"n_max must be an integer >= 1, got {self.n_max!r}")
        mu_pair = self.pair_gain * self.pump_power**2 * self.fiber_length
        if mu_pair > LOW_GAIN_WARN:
            warnings.warn(
                f"mean pairs per pulse {mu_pair:.3g} is outside the low-gain regime",
                RuntimeWarning,
                stacklevel=3,
            )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SourceParams":
        try:
            return cls(
                pump_power=float(data["pump_power_mw"]),
                fiber_length=float(data["fiber_length_m"]),
                pair_gain=float(data["pair_gain"]),
                raman_coeff=float(data.get("raman_coeff", 0.0)),
                pumpleak_coeff=float(data.get("pumpleak_coeff", 0.0)),
                pair_family=str(data.get("pair_family", "thermal")),
                n_max=int(data.get("n_max", 3)),
                signal_noise_mean=float(data.get("signal_noise_mean", 0.0)),
            )
        except KeyError as exc:
            raise ConfigError(f"source section is missing key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value in source section: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "pump_power_mw": self.pump_power,
            "fiber_length_m": self.fiber_length,
            "pair_gain": self.pair_gain,
            "raman_coeff": self.raman_coeff,
            "pumpleak_coeff": self.pumpleak_coeff,
            "pair_family": self.pair_family,
            "n_max": self.n_max,
            "signal_noise_mean": self.signal_noise_mean,
        }

    def replace(self, **changes) -> "SourceParams":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return SourceParams(**values)


@dataclass(frozen=True)
class JointPhotonDistribution:
    """Truncated joint table ``table[n_s, n_r]`` of signal/idler photon numbers."""

    table: np.ndarray
    truncation_deficit: float = 0.0

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        if table.ndim != 2 or table.shape[0] != table.shape[1] or table.shape[0] < 2:
            raise ConfigError("joint table must be square with n_max >= 1")
        if np.any(table < 0):
            raise ConfigError("joint table has negative entries")
        if abs(table.sum() - 1.0) > 1e-12:
            raise ConfigError(f"joint table sums to {table.sum()!r}, not 1")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def n_max(self) -> int:
        return self.table.shape[0] - 1

    def herald_marginal(self) -> np.ndarray:
        """P_r(n_r), summed over the signal index."""
        return self.table.sum(axis=0)

    def signal_marginal(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def is_diagonal(self) -> bool:
        return not np.any(self.table - np.diag(np.diag(self.table)))


def pair_number_pmf(mu: float, family: str, n_max: int) -> np.ndarray:
    """Untruncated pair-number probabilities P(0..n_max)."""
    n = np.arange(n_max + 1)
    if family == "thermal":
        return mu**n / (1.0 + mu) ** (n + 1)
    if family == "poissonian":
        return poisson.pmf(n, mu) if mu > 0 else (n == 0).astype(float)
    raise ConfigError(f"unknown pair family {family!r}")


def noise_means(params: SourceParams) -> tuple[float, float, float]:
    """Mean pairs, herald Raman photons and leaked pump photons per pulse."""
    P, L = params.pump_power, params.fiber_length
    return (params.pair_gain * P * P * L, params.raman_coeff * P * L, params.pumpleak_coeff * P)


def diagonal_joint(mu: float, family: str = "thermal", n_max: int = 3) -> JointPhotonDistribution:
    """Joint table of a noise-free pair source with mean ``mu`` pairs per pulse.

    The tail beyond ``n_max`` is removed by renormalisation and reported as
    ``truncation_deficit``. A tail above ``TAIL_TOLERANCE`` is rejected.
    """
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    if mu < 0:
        raise ConfigError("mean pair number must be non-negative")
    pmf = pair_number_pmf(mu, family, n_max)
    deficit = max(0.0, 1.0 - float(pmf.sum()))
    if deficit > TAIL_TOLERANCE:
        raise ConfigError(f"probability beyond n_max={n_max} is {deficit:.3g}; increase n_max")
    return JointPhotonDistribution(np.diag(pmf / pmf.sum()), truncation_deficit=deficit)


def build_sfwm_joint(params: SourceParams) -> JointPhotonDistribution:
    """Noise-free joint distribution: perfectly correlated pairs on the diagonal."""
    return diagonal_joint(noise_means(params)[0], params.pair_family, params.n_max)


@dataclass(frozen=True)
class PulseEvent:
    n_pairs: int
    n_herald_noise: int
    n_signal_noise: int = field(default=0)

    def __post_init__(self):
        if min(self.n_pairs, self.n_herald_noise, self.n_signal_noise) < 0:
            raise ValueError("photon numbers must be non-negative")

    @property
    def n_signal(self) -> int:
        return self.n_pairs + self.n_signal_noise

    @property
    def n_herald(self) -> int:
        return self.n_pairs + self.n_herald_noise


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for work unit ``index`` under a base ``seed``.

    Streams depend only on (seed, index), so any partition of work units
    over workers reproduces the same draws.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def sample_pairs(mu: float, family: str, rng: np.random.Generator, size=None):
    if family == "thermal":
        # numpy's geometric counts trials up to the first success (>= 1)
        return rng.geometric(1.0 / (1.0 + mu), size=size) - 1
    return rng.poisson(mu, size=size)


def sample_pulses(params: SourceParams, rng: np.random.Generator, size: int):
    """Vectorised draw of ``size`` pulses: (n_pairs, n_herald_noise, n_signal_noise)."""
    mu_pair, mu_raman, mu_pump = noise_means(params)
    pairs = sample_pairs(mu_pair, params.pair_family, rng, size)
    herald_noise = rng.poisson(mu_raman + mu_pump, size)
    if params.signal_noise_mean > 0:
        signal_noise = rng.poisson(params.signal_noise_mean, size)
    else:
        signal_noise = np.zeros(size, dtype=np.int64)
    return pairs.astype(np.int64), herald_noise.astype(np.int64), signal_noise.astype(np.int64)


def sample_pulse(params: SourceParams, rng: np.random.Generator) -> PulseEvent:
    pairs, herald_noise, signal_noise = sample_pulses(params, rng, 1)
    return PulseEvent(int(pairs[0]), int(herald_noise[0]), int(signal_noise[0]))


def _pmf_until_tail(mu: float, family: str, tail: float) -> np.ndarray:
    n_max = 1
    while True:
        pmf = pair_number_pmf(mu, family, n_max)
        if 1.0 - pmf.sum() < tail or n_max >= 200:
            return pmf
        n_max *= 2


class SparsePulseSampler:
    """Draws only the pulses that carry at least one photon.

    Tallies do not depend on pulse order, so a block of ``size`` pulses is
    sampled as a binomial number of non-empty pulses, each drawn from the
    tabulated joint of (pairs, herald noise, signal noise) given not-all-zero.
    The table is cut where the remaining tail falls below ``tail``.
    """

    def __init__(self, params: SourceParams, tail: float = 1e-17):
        mu_pair, mu_raman, mu_pump = noise_means(params)
        pairs = _pmf_until_tail(mu_pair, params.pair_family, tail)
        herald = _pmf_until_tail(mu_raman + mu_pump, "poissonian", tail)
        signal = _pmf_until_tail(params.signal_noise_mean, "poissonian", tail)
        joint = pairs[:, None, None] * herald[None, :, None] * signal[None, None, :]
        self.shape = joint.shape
        self.p_empty = float(pairs[0] * herald[0] * signal[0])
        flat = joint.ravel()[1:]
        total = flat.sum()
        self._cdf = np.cumsum(flat / total) if total > 0 else np.ones_like(flat)
        if self._cdf.size:
            self._cdf[-1] = 1.0

    def sample(self, rng: np.random.Generator, size: int):
        """(n_empty, pairs, herald_noise, signal_noise) for the non-empty pulses."""
        n_full = int(rng.binomial(size, 1.0 - self.p_empty)) if self.p_empty < 1 else 0
        flat = np.searchsorted(self._cdf, rng.random(n_full), side="right") + 1
        pairs, herald, signal = np.unravel_index(flat, self.shape)
        return size - n_full, pairs.astype(np.int64), herald.astype(np.int64), signal.astype(np.int64)
