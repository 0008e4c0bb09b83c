import math

import numpy as np
import pytest

from hpl.coincidence import (
    CoincidenceCounts,
    ExperimentScenario,
    extract_exact_k,
    klyshko_counts,
    run_experiment,
    signal_photon_frequencies,
    simulate_blocks,
)
from hpl.detector_bank import DetectorBankConfig, prob_exactly_k
from hpl.errors import ConfigError, StatisticsError
from hpl.source_model import SourceParams, pair_number_pmf

P, L = 20.0, 20.0


def source(mu_pair, mu_noise=0.0, family="poissonian"):
    return SourceParams(P, L, mu_pair / (P * P * L), pumpleak_coeff=mu_noise / P, pair_family=family)


def scenario(mu_pair, mu_noise=0.0, n=10**5, seed=1, herald_eta=0.12, signal=None, family="poissonian"):
    herald = DetectorBankConfig.from_arrays([0.5, 0.5], herald_eta, ["H1", "H2"])
    signal = signal or DetectorBankConfig.from_arrays([0.30, 0.35, 0.35], 0.36)
    return ExperimentScenario(source(mu_pair, mu_noise, family), herald, signal, n, seed)


def forward_q(bank, pmf):
    """Exactly-k click probabilities for photon-number pmf (k = 0..m)."""
    return np.array([sum(prob_exactly_k(bank, k, n) * p for n, p in enumerate(pmf))
                     for k in range(bank.m + 1)])


class TestRun:
    def test_dark_source(self):
        counts = run_experiment(scenario(0.0, 0.0, n=5000))
        assert counts.tallies == {(0, 0): 5000}

    def test_herald_click_implies_signal(self):
        lossless = DetectorBankConfig.from_arrays([0.30, 0.35, 0.35], 1.0)
        counts = run_experiment(scenario(0.05, 0.0, n=200_000, herald_eta=1.0, signal=lossless))
        heralded = {k: c for k, c in counts.tallies.items() if k[0]}
        assert heralded
        assert all(s != 0 for (h, s) in heralded)
        assert all(n_s >= 1 for (n_h, n_s) in counts.photon_tallies if n_h >= 1)

    def test_worker_count_invariance(self):
        sc = scenario(0.1, 0.1, n=300_000, seed=9)
        one = run_experiment(sc, workers=1, block_size=1 << 16)
        two = run_experiment(sc, workers=2, block_size=1 << 16)
        assert one == two
        assert run_experiment(sc, workers=1, block_size=1 << 16) == one

    def test_merge_equals_single_run(self):
        sc = scenario(0.1, 0.05, n=5 * 4096, seed=4)
        full = run_experiment(sc, block_size=4096)
        a = simulate_blocks(sc, [0, 3], 4096)
        b = simulate_blocks(sc, [1], 4096)
        c = simulate_blocks(sc, [2, 4], 4096)
        assert a + b + c == full
        assert (a + b) + c == a + (b + c)
        assert c + a + b == full

    def test_partial_last_block(self):
        sc = scenario(0.1, n=10_000)
        assert run_experiment(sc, block_size=4096).n_pulses == 10_000

    def test_merge_rejects_other_banks(self):
        a = run_experiment(scenario(0.1, n=100))
        other = ExperimentScenario(source(0.1), DetectorBankConfig.from_arrays([1.0], 0.1, ["X"]),
                                   DetectorBankConfig.from_arrays([1.0], 0.1), 100)
        with pytest.raises(ValueError):
            a + run_experiment(other)

    def test_counts_invariants(self):
        with pytest.raises(ValueError):
            CoincidenceCounts(3, ("H",), ("A",), {(0, 0): 2})
        with pytest.raises(ValueError):
            CoincidenceCounts(0, ("H",), ("A",), {(0, 0): 1, (1, 0): -1})

    def test_double_herald_two_photon_fraction(self):
        # equal pair and noise rates: two photons in a quarter of double heralds
        counts = run_experiment(scenario(0.05, 0.05, n=10**6, seed=3))
        freq, total = signal_photon_frequencies(counts, 2)
        assert abs(freq[2] - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / total)


class TestExtract:
    def make(self, tallies, m_h=2, m_s=3):
        return CoincidenceCounts(sum(tallies.values()), ("H1", "H2")[:m_h], ("A", "B", "C")[:m_s], tallies)

    def test_all_empty(self):
        clicks = extract_exact_k(self.make({(0, 0): 50}), 0)
        np.testing.assert_array_equal(clicks.q, [1, 0, 0, 0])
        assert np.all(clicks.covariance == 0)

    def test_singletons(self):
        clicks = extract_exact_k(self.make({(1, 0b001): 7, (1, 0b010): 7, (1, 0b100): 7}), 1)
        np.testing.assert_array_equal(clicks.q, [0, 1, 0, 0])

    def test_exact_and_at_least(self):
        counts = self.make({(0, 0): 10, (1, 1): 4, (3, 3): 2, (3, 7): 1})
        assert extract_exact_k(counts, 1).n_trials == 4
        assert extract_exact_k(counts, 2).n_trials == 3
        assert extract_exact_k(counts, 1, mode="at_least").n_trials == 7
        q = extract_exact_k(counts, 1, mode="at_least").q
        np.testing.assert_allclose(q, [0, 4 / 7, 2 / 7, 1 / 7])
        assert q.sum() == 1.0

    def test_empty_condition(self):
        with pytest.raises(StatisticsError):
            extract_exact_k(self.make({(0, 0): 10}), 2)
        with pytest.raises(ConfigError):
            extract_exact_k(self.make({(0, 0): 10}), 5)

    def test_multinomial_covariance(self):
        clicks = extract_exact_k(self.make({(0, 0): 60, (0, 1): 30, (0, 3): 10}), 0)
        q = np.array([0.6, 0.3, 0.1, 0.0])
        np.testing.assert_allclose(clicks.covariance, (np.diag(q) - np.outer(q, q)) / 100)
        np.testing.assert_allclose(clicks.covariance.sum(axis=0), 0, atol=1e-18)

    def test_frequencies_sum_to_one(self):
        counts = run_experiment(scenario(0.1, 0.1, n=200_000, seed=5))
        for k in range(3):
            assert extract_exact_k(counts, k).q.sum() == pytest.approx(1.0, abs=1e-15)

    def test_unheralded_matches_forward_model(self):
        sc = scenario(0.05, 0.02, n=10**6, seed=11)
        counts = run_experiment(sc)
        clicks = extract_exact_k(counts, 0, mode="at_least")
        expected = forward_q(sc.signal_bank, pair_number_pmf(0.05, "poissonian", 30))
        sigma = np.sqrt(np.diag(clicks.covariance))
        sigma_exp = np.sqrt(expected * (1 - expected) / clicks.n_trials)
        assert np.all(np.abs(clicks.q - expected) <= 3 * np.maximum(sigma, sigma_exp))

    def test_noise_lowers_two_click_share(self):
        quiet = extract_exact_k(run_experiment(scenario(0.1, 0.0, n=2 * 10**7, seed=6, herald_eta=0.5)), 2)
        noisy = extract_exact_k(run_experiment(scenario(0.1, 0.1, n=2 * 10**7, seed=6, herald_eta=0.5)), 2)
        assert quiet.q[2] / quiet.q[1] > noisy.q[2] / noisy.q[1]


class TestKlyshkoCounts:
    def test_lossless_single_detectors(self):
        herald = DetectorBankConfig.from_arrays([1.0], 1.0, ["H"])
        signal = DetectorBankConfig.from_arrays([1.0], 1.0, ["S"])
        counts = run_experiment(ExperimentScenario(source(0.05), herald, signal, 50_000))
        n_h, n_hs = klyshko_counts(counts, "H", "S")
        assert n_h > 0 and n_hs == n_h

    def test_subset(self):
        counts = run_experiment(scenario(0.1, 0.1, n=100_000))
        for h in ("H1", "H2"):
            for s in "ABC":
                n_h, n_hs = klyshko_counts(counts, h, s)
                assert 0 <= n_hs <= n_h

    def test_noise_free_ratio_is_path_efficiency(self):
        sc = scenario(0.01, 0.0, n=10**6, seed=8, herald_eta=0.5)
        counts = run_experiment(sc)
        n_h, n_hs = klyshko_counts(counts, "H1", "B")
        w = sc.signal_bank.weights[1]
        assert abs(n_hs / n_h - w) <= 3 * math.sqrt(w * (1 - w) / n_h)

    def test_unknown_label(self):
        counts = run_experiment(scenario(0.1, n=100))
        with pytest.raises(ConfigError):
            klyshko_counts(counts, "H9", "A")
        with pytest.raises(ConfigError):
            klyshko_counts(counts, "H1", "Z")


class TestSerialisation:
    def test_csv_round_trip(self):
        counts = run_experiment(scenario(0.1, 0.1, n=50_000))
        text = counts.to_csv({"config_hash": "abc", "seed": 1})
        assert text.startswith("#schema=hpl-counts/1;")
        assert "config_hash=abc" in text.splitlines()[0]
        back = CoincidenceCounts.from_csv(text, counts.photon_tally_rows())
        assert back == counts

    def test_bad_header(self):
        with pytest.raises(ConfigError):
            CoincidenceCounts.from_csv("herald_pattern,signal_pattern,count\n")

    def test_scenario_dict_round_trip(self):
        sc = scenario(0.1, 0.1)
        assert ExperimentScenario.from_dict(sc.to_dict()) == sc
        with pytest.raises(ConfigError):
            sc.replace(n_pulses=0)
