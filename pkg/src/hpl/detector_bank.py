"""Spatially multiplexed banks of thresholding detectors.

Detector ``i`` receives a fraction ``R_i`` of the light and detects an
arriving photon with probability ``eta_i``; a photon therefore produces a
detection at ``i`` with probability ``w_i = R_i * eta_i``. Click patterns
are stored as bit masks, bit ``i`` set when detector ``i`` fired.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError

_LABEL_RE = re.compile(r"^[A-Za-z0-9_]+$")


@dataclass(frozen=True)
class Detector:
    label: str
    split_fraction: float
    efficiency: float


@dataclass(frozen=True)
class DetectorBankConfig:
    detectors: tuple[Detector, ...]

    def __post_init__(self):
        detectors = tuple(self.detectors)
        object.__setattr__(self, "detectors", detectors)
        if not detectors:
            raise ConfigError("a detector bank needs at least one detector")
        labels = [d.label for d in detectors]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate detector labels in {labels}")
        for d in detectors:
            if not _LABEL_RE.match(d.label):
                raise ConfigError(f"detector label {d.label!r} must be alphanumeric")
            if not 0 <= d.split_fraction <= 1:
                raise ConfigError(f"split fraction of {d.label} outside [0, 1]")
            if not 0 <= d.efficiency <= 1:
                raise ConfigError(f"efficiency of {d.label} outside [0, 1]")
        if sum(d.split_fraction for d in detectors) > 1 + 1e-12:
            raise ConfigError("split fractions sum to more than 1")

    @classmethod
    def from_arrays(cls, split_fractions: Sequence[float], efficiencies, labels=None):
        m = len(split_fractions)
        if np.ndim(efficiencies) == 0:
            efficiencies = [float(efficiencies)] * m
        if labels is None:
            labels = [chr(ord("A") + i) for i in range(m)]
        return cls(tuple(Detector(str(l), float(r), float(e))
                         for l, r, e in zip(labels, split_fractions, efficiencies, strict=True)))

    @classmethod
    def from_list(cls, entries: Iterable[Mapping]) -> "DetectorBankConfig":
        try:
            return cls(tuple(Detector(str(e["label"]), float(e["split_fraction"]), float(e["efficiency"]))
                             for e in entries))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed detector entry: {exc}") from None

    def to_list(self) -> list[dict]:
        return [{"label": d.label, "split_fraction": d.split_fraction, "efficiency": d.efficiency}
                for d in self.detectors]

    @property
    def m(self) -> int:
        return len(self.detectors)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(d.label for d in self.detectors)

    @property
    def split_fractions(self) -> np.ndarray:
        return np.array([d.split_fraction for d in self.detectors])

    @property
    def efficiencies(self) -> np.ndarray:
        return np.array([d.efficiency for d in self.detectors])

    @property
    def weights(self) -> np.ndarray:
        """Per-photon detection probability at each detector, ``R_i * eta_i``."""
        return self.split_fractions * self.efficiencies

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ConfigError(f"unknown detector label {label!r}; bank has {self.labels}") from None

    def with_efficiencies(self, efficiencies: Sequence[float]) -> "DetectorBankConfig":
        return DetectorBankConfig(tuple(Detector(d.label, d.split_fraction, float(e))
                                        for d, e in zip(self.detectors, efficiencies, strict=True)))

    def mask(self, labels: Iterable[str]) -> int:
        out = 0
        for label in labels:
            out |= 1 << self.index(label)
        return out

    def pattern_labels(self, mask: int) -> tuple[str, ...]:
        return tuple(l for i, l in enumerate(self.labels) if mask >> i & 1)


def _miss_all(weights: np.ndarray, idx: Sequence[int], n: int) -> float:
    # probability that none of the n photons is detected at any detector in idx
    return max(0.0, 1.0 - float(sum(weights[i] for i in idx))) ** n


def _prob_set_indices(weights: np.ndarray, idx: Sequence[int], n: int) -> float:
    total = 0.0
    for size in range(len(idx) + 1):
        sign = -1.0 if size % 2 else 1.0
        for sub in combinations(idx, size):
            total += sign * _miss_all(weights, sub, n)
    return total


def prob_set_clicks(config: DetectorBankConfig, subset: Iterable[str], n: int) -> float:
    """Probability that every detector in ``subset`` clicks for ``n`` photons.

    Other detectors may or may not click.
    """
    labels = list(subset)
    if not labels:
        raise ConfigError("subset must be non-empty")
    if n < 0:
        raise ConfigError("photon number must be non-negative")
    idx = sorted({config.index(l) for l in labels})
    return _prob_set_indices(config.weights, idx, n)


def prob_exactly_k(config: DetectorBankConfig, k: int, n: int) -> float:
    """Probability that exactly ``k`` detectors, whichever they are, click for ``n`` photons.

    Built from the all-of-set probabilities,
    ``P(k|n) = sum_{j>=k} (-1)**(j-k) C(j, k) sum_{|S|=j} Pset(S|n)``,
    which for three detectors is the familiar
    ``P(1|n) = sum Pset(i) - 2 sum Pset(ij) + 3 Pset(ABC)`` and so on.
    ``k = 0`` gives the probability that no detector fires.
    """
    m = config.m
    if not 0 <= k <= m:
        raise ConfigError(f"k={k} outside 0..{m}")
    if n < 0:
        raise ConfigError("photon number must be non-negative")
    w = config.weights
    if k == 0:
        return _miss_all(w, range(m), n)
    if k > n:
        return 0.0
    total = 0.0
    for j in range(k, m + 1):
        coeff = (-1) ** (j - k) * comb(j, k)
        total += coeff * sum(_prob_set_indices(w, s, n) for s in combinations(range(m), j))
    return total


@dataclass(frozen=True)
class ConditionalProbMatrix:
    """Upper-triangular ``matrix[k-1, n-1] = P(k|n)`` for ``1 <= k, n <= n_max``."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def n_max(self) -> int:
        return self.matrix.shape[0]

    def entry(self, k: int, n: int) -> float:
        return float(self.matrix[k - 1, n - 1])

    def forward(self, p: np.ndarray) -> np.ndarray:
        """Click probabilities q_1..q_nmax for photon probabilities p_1..p_nmax."""
        return self.matrix @ np.asarray(p, dtype=float)


def build_conditional_matrix(config: DetectorBankConfig, n_max: int | None = None) -> ConditionalProbMatrix:
    if n_max is None:
        n_max = config.m
    if n_max < 1:
        raise ConfigError("n_max must be >= 1")
    if n_max > config.m:
        raise ConfigError(
            f"n_max={n_max} exceeds the {config.m} detectors of the bank; "
            "photon numbers above the detector count are not resolvable"
        )
    matrix = np.zeros((n_max, n_max))
    for n in range(1, n_max + 1):
        for k in range(1, n + 1):
            matrix[k - 1, n - 1] = prob_exactly_k(config, k, n)
    return ConditionalProbMatrix(matrix)


def route_photons(weights: np.ndarray, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Click masks for many pulses, ``counts[j]`` photons in pulse ``j``.

    Each photon lands on detector ``i`` and is detected with probability
    ``weights[i]``; otherwise it is lost.
    """
    counts = np.asarray(counts, dtype=np.int64)
    masks = np.zeros(counts.shape, dtype=np.int64)
    cum = np.cumsum(weights)
    bits = np.append(1 << np.arange(len(weights), dtype=np.int64), 0)
    active = np.flatnonzero(counts)
    photon = 0
    while active.size:
        landing = np.searchsorted(cum, rng.random(active.size), side="right")
        masks[active] |= bits[landing]
        photon += 1
        active = active[counts[active] > photon]
    return masks


def threshold_detect(config: DetectorBankConfig, n: int, rng: np.random.Generator) -> frozenset[str]:
    """Labels of the detectors that fire when ``n`` photons enter the bank."""
    mask = int(route_photons(config.weights, np.array([n]), rng)[0])
    return frozenset(config.pattern_labels(mask))
