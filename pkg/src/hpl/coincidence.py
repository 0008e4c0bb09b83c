"""Monte Carlo coincidence counting for a heralded pair source.

Every pulse draws pair and noise photon numbers, routes herald-arm photons
through the herald bank and signal-arm photons through the signal bank, and
tallies the joint (herald pattern, signal pattern). This is the software
stand-in for an FPGA that records all singles and coincidences.

Pulses are processed in fixed-size blocks; block ``b`` draws from
``substream(seed, b)``, so the tally does not depend on how blocks are
distributed over worker processes.
"""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .detector_bank import DetectorBankConfig, route_photons
from .errors import ConfigError, StatisticsError
from .source_model import SourceParams, SparsePulseSampler, substream

BLOCK_SIZE = 1 << 20
_PHOTON_KEY = 1 << 20
COUNTS_SCHEMA = "hpl-counts/1"
_NONE = "-"


@dataclass(frozen=True)
class ExperimentScenario:
    source: SourceParams
    herald_bank: DetectorBankConfig
    signal_bank: DetectorBankConfig
    n_pulses: int
    seed: int = 0

    def __post_init__(self):
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise ConfigError(f"n_pulses must be a positive integer, got {self.n_pulses!r}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentScenario":
        try:
            return cls(
                source=SourceParams.from_dict(data["source"]),
                herald_bank=DetectorBankConfig.from_list(data["herald_bank"]),
                signal_bank=DetectorBankConfig.from_list(data["signal_bank"]),
                n_pulses=int(data["n_pulses"]),
                seed=int(data.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"scenario is missing key {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_dict(),
            "herald_bank": self.herald_bank.to_list(),
            "signal_bank": self.signal_bank.to_list(),
            "n_pulses": self.n_pulses,
            "seed": self.seed,
        }

    def replace(self, **changes) -> "ExperimentScenario":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(changes)
        return ExperimentScenario(**values)


@dataclass(frozen=True)
class CoincidenceCounts:
    """Tallies keyed by (herald mask, signal mask).

    ``photon_tallies`` keeps the pre-detection truth, keyed by (herald
    photons, signal photons), for validating the detection layer.
    """

    n_pulses: int
    herald_labels: tuple[str, ...]
    signal_labels: tuple[str, ...]
    tallies: Mapping[tuple[int, int], int]
    photon_tallies: Mapping[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        total = sum(self.tallies.values())
        if total != self.n_pulses:
            raise ValueError(f"tallies sum to {total}, expected {self.n_pulses}")
        if any(v < 0 for v in self.tallies.values()):
            raise ValueError("negative tally")

    def __add__(self, other: "CoincidenceCounts") -> "CoincidenceCounts":
        if (self.herald_labels, self.signal_labels) != (other.herald_labels, other.signal_labels):
            raise ValueError("cannot merge counts from different detector banks")
        tallies = Counter(self.tallies)
        tallies.update(other.tallies)
        photons = Counter(self.photon_tallies)
        photons.update(other.photon_tallies)
        return CoincidenceCounts(self.n_pulses + other.n_pulses, self.herald_labels,
                                 self.signal_labels, dict(tallies), dict(photons))

    @property
    def m_herald(self) -> int:
        return len(self.herald_labels)

    @property
    def m_signal(self) -> int:
        return len(self.signal_labels)

    def herald_click_histogram(self) -> dict[int, int]:
        hist: Counter = Counter()
        for (h, _), c in self.tallies.items():
            hist[h.bit_count()] += c
        return dict(hist)

    # --- serialisation -------------------------------------------------

    def _pattern(self, labels, mask: int) -> str:
        names = [l for i, l in enumerate(labels) if mask >> i & 1]
        return "+".join(names) if names else _NONE

    @staticmethod
    def _mask(labels, text: str) -> int:
        if text == _NONE:
            return 0
        mask = 0
        for name in text.split("+"):
            try:
                mask |= 1 << labels.index(name)
            except ValueError:
                raise ConfigError(f"unknown detector {name!r} in counts file") from None
        return mask

    def to_csv(self, provenance: Mapping[str, Any] | None = None) -> str:
        meta = {"herald": "|".join(self.herald_labels), "signal": "|".join(self.signal_labels)}
        meta.update({k: str(v) for k, v in (provenance or {}).items()})
        buf = io.StringIO()
        buf.write(f"#schema={COUNTS_SCHEMA};" + ";".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["herald_pattern", "signal_pattern", "count"])
        for (h, s) in sorted(self.tallies):
            if self.tallies[(h, s)]:
                writer.writerow([self._pattern(self.herald_labels, h),
                                 self._pattern(self.signal_labels, s), self.tallies[(h, s)]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, photon_tallies=None) -> "CoincidenceCounts":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#schema="):
            raise ConfigError("counts file lacks a '#schema=' header line")
        meta = dict(item.split("=", 1) for item in lines[0][1:].split(";"))
        if meta["schema"] != COUNTS_SCHEMA:
            raise ConfigError(f"unsupported counts schema {meta['schema']!r}")
        herald = tuple(meta["herald"].split("|"))
        signal = tuple(meta["signal"].split("|"))
        reader = csv.DictReader(lines[1:])
        tallies: Counter = Counter()
        for row in reader:
            key = (cls._mask(herald, row["herald_pattern"]), cls._mask(signal, row["signal_pattern"]))
            tallies[key] += int(row["count"])
        photons = {}
        for n_h, n_s, c in photon_tallies or ():
            photons[(int(n_h), int(n_s))] = int(c)
        return cls(sum(tallies.values()), herald, signal, dict(tallies), photons)

    def photon_tally_rows(self) -> list[list[int]]:
        return [[h, s, c] for (h, s), c in sorted(self.photon_tallies.items())]


def _simulate_block(scenario: ExperimentScenario, sampler: SparsePulseSampler, block: int, size: int):
    rng = substream(scenario.seed, block)
    n_empty, pairs, herald_noise, signal_noise = sampler.sample(rng, size)
    n_herald = pairs + herald_noise
    n_signal = pairs + signal_noise
    h_mask = route_photons(scenario.herald_bank.weights, n_herald, rng)
    s_mask = route_photons(scenario.signal_bank.weights, n_signal, rng)
    m_s = scenario.signal_bank.m
    joint = np.bincount((h_mask << m_s) | s_mask, minlength=1 << (scenario.herald_bank.m + m_s))
    joint[0] += n_empty
    tallies = {(int(key) >> m_s, int(key) & ((1 << m_s) - 1)): int(joint[key])
               for key in np.flatnonzero(joint)}
    keys, freq = np.unique(n_herald * _PHOTON_KEY + n_signal, return_counts=True)
    photons = {(int(k) // _PHOTON_KEY, int(k) % _PHOTON_KEY): int(c) for k, c in zip(keys, freq)}
    if n_empty:
        photons[(0, 0)] = photons.get((0, 0), 0) + n_empty
    return tallies, photons


def simulate_blocks(scenario: ExperimentScenario, blocks, block_size: int = BLOCK_SIZE) -> CoincidenceCounts:
    """Tally the given block indices of ``scenario``.

    Block ``b`` covers pulses ``[b * block_size, (b + 1) * block_size)``,
    clipped to ``n_pulses``. Tallies of disjoint block sets add up to the
    tally of their union.
    """
    tallies: Counter = Counter()
    photons: Counter = Counter()
    sampler = SparsePulseSampler(scenario.source)
    n = 0
    for block in blocks:
        size = min(block_size, scenario.n_pulses - block * block_size)
        if size <= 0:
            raise ValueError(f"block {block} lies beyond n_pulses")
        t, p = _simulate_block(scenario, sampler, block, size)
        tallies.update(t)
        photons.update(p)
        n += size
    return CoincidenceCounts(n, scenario.herald_bank.labels, scenario.signal_bank.labels,
                             dict(tallies), dict(photons))


def run_experiment(scenario: ExperimentScenario, workers: int = 1,
                   block_size: int = BLOCK_SIZE) -> CoincidenceCounts:
    """Simulate ``scenario.n_pulses`` pulses and tally the click patterns.

    The result is identical for any ``workers`` value; only ``block_size``
    and the seed determine the random streams.
    """
    n_blocks = -(-scenario.n_pulses // block_size)
    workers = max(1, min(int(workers), n_blocks))
    if workers == 1:
        return simulate_blocks(scenario, range(n_blocks), block_size)
    shares = [range(i, n_blocks, workers) for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(simulate_blocks, [scenario] * workers, shares, [block_size] * workers))
    return sum(parts[1:], parts[0])


@dataclass(frozen=True)
class ClickFrequencies:
    """Observed exactly-k click frequencies ``q[0..m]`` with their covariance."""

    q: np.ndarray
    covariance: np.ndarray
    n_trials: int

    def truncated(self, n_max: int) -> tuple[np.ndarray, np.ndarray]:
        """(q_1..q_nmax, covariance block) as consumed by the inversion."""
        return self.q[1:n_max + 1].copy(), self.covariance[1:n_max + 1, 1:n_max + 1].copy()


def multinomial_covariance(q: np.ndarray, n: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return (np.diag(q) - np.outer(q, q)) / n


def _herald_selected(counts: CoincidenceCounts, herald_condition: int, mode: str):
    if mode not in ("exact", "at_least"):
        raise ConfigError(f"herald mode must be 'exact' or 'at_least', got {mode!r}")
    if not 0 <= herald_condition <= counts.m_herald:
        raise ConfigError(f"herald condition {herald_condition} outside 0..{counts.m_herald}")
    for (h, s), c in counts.tallies.items():
        k = h.bit_count()
        if k == herald_condition or (mode == "at_least" and k > herald_condition):
            yield s, c


def extract_exact_k(counts: CoincidenceCounts, herald_condition: int,
                    mode: str = "exact") -> ClickFrequencies:
    """Signal click-number frequencies for pulses meeting the herald condition.

    With ``mode="exact"`` the herald bank must show exactly
    ``herald_condition`` clicks, with ``"at_least"`` that many or more.
    """
    k_counts = np.zeros(counts.m_signal + 1, dtype=np.int64)
    for s, c in _herald_selected(counts, herald_condition, mode):
        k_counts[s.bit_count()] += c
    total = int(k_counts.sum())
    if total == 0:
        raise StatisticsError(f"no pulses with {herald_condition} herald clicks ({mode})")
    q = k_counts / total
    return ClickFrequencies(q, multinomial_covariance(q, total), total)


def klyshko_counts(counts: CoincidenceCounts, herald_label: str, signal_label: str) -> tuple[int, int]:
    """(N_H, N_HS) for one herald and one signal detector, ignoring all others."""
    if herald_label not in counts.herald_labels:
        raise ConfigError(f"unknown herald detector {herald_label!r}")
    if signal_label not in counts.signal_labels:
        raise ConfigError(f"unknown signal detector {signal_label!r}")
    hb = 1 << counts.herald_labels.index(herald_label)
    sb = 1 << counts.signal_labels.index(signal_label)
    n_h = n_hs = 0
    for (h, s), c in counts.tallies.items():
        if h & hb:
            n_h += c
            if s & sb:
                n_hs += c
    return n_h, n_hs


def signal_photon_frequencies(counts: CoincidenceCounts, n_herald: int) -> tuple[np.ndarray, int]:
    """Pre-detection signal photon-number frequencies given ``n_herald`` herald photons."""
    selected = {s: c for (h, s), c in counts.photon_tallies.items() if h == n_herald}
    total = sum(selected.values())
    if total == 0:
        raise StatisticsError(f"no pulses with {n_herald} herald photons")
    freq = np.zeros(max(selected) + 1)
    for s, c in selected.items():
        freq[s] = c / total
    return freq, total


def sidecar(counts: CoincidenceCounts, scenario: ExperimentScenario, config_hash: str) -> dict:
    return {
        "schema": COUNTS_SCHEMA,
        "config_hash": config_hash,
        "seed": scenario.seed,
        "n_pulses": counts.n_pulses,
        "scenario": scenario.to_dict(),
        "photon_tallies": counts.photon_tally_rows(),
    }


def dumps_sidecar(data: Mapping) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
