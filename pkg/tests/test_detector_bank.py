import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import enumerate_clicks
from hpl.detector_bank import (
    DetectorBankConfig,
    build_conditional_matrix,
    prob_exactly_k,
    prob_set_clicks,
    route_photons,
    threshold_detect,
)
from hpl.errors import ConfigError


def random_bank(rng, m=3, lossless=False):
    R = rng.dirichlet(np.ones(m + (0 if lossless else 1)))[:m]
    eta = np.ones(m) if lossless else rng.uniform(0.05, 1.0, m)
    return DetectorBankConfig.from_arrays(R, eta)


def expanded_matrix(R, eta, n):
    """Three-detector matrix elements written out term by term."""
    a, b, c = (R[i] * eta[i] for i in range(3))
    single = lambda x: 1 - (1 - x) ** n
    pair = lambda x, y: 1 - (1 - x) ** n - (1 - y) ** n + (1 - x - y) ** n
    triple = (1 - (1 - a) ** n - (1 - b) ** n - (1 - c) ** n
              + (1 - a - b) ** n + (1 - a - c) ** n + (1 - b - c) ** n
              - (1 - a - b - c) ** n)
    pairs = pair(a, b) + pair(a, c) + pair(b, c)
    p1 = single(a) + single(b) + single(c) - 2 * pairs + 3 * triple
    p2 = pairs - 3 * triple
    return p1, p2, triple


bank_strategy = st.integers(1, 5).flatmap(lambda m: st.tuples(
    st.lists(st.floats(0.0, 1.0), min_size=m + 1, max_size=m + 1).filter(lambda v: sum(v) > 0),
    st.lists(st.floats(0.0, 1.0), min_size=m, max_size=m),
))


def bank_from(draw):
    raw, eta = draw
    R = np.array(raw[:-1]) / sum(raw)
    return DetectorBankConfig.from_arrays(R, eta)


class TestSetProbabilities:
    def test_no_photons(self, reference_signal_bank):
        for size in (1, 2, 3):
            for subset in itertools.combinations("ABC", size):
                assert prob_set_clicks(reference_signal_bank, subset, 0) == 0.0

    def test_single_detector(self):
        bank = DetectorBankConfig.from_arrays([1.0], [0.5])
        assert prob_set_clicks(bank, ["A"], 2) == pytest.approx(0.75, abs=1e-15)

    def test_all_three_of_three(self):
        bank = DetectorBankConfig.from_arrays([1 / 3] * 3, 1.0)
        assert prob_set_clicks(bank, "ABC", 3) == pytest.approx(2 / 9, abs=1e-15)
        table = enumerate_clicks(bank.weights, 3)
        assert table[frozenset({0, 1, 2})] == pytest.approx(6 / 27, abs=1e-15)

    def test_matches_enumeration(self, rng):
        for _ in range(20):
            bank = random_bank(rng)
            for n in range(4):
                table = enumerate_clicks(bank.weights, n)
                for size in (1, 2, 3):
                    for subset in itertools.combinations(range(3), size):
                        brute = sum(p for hit, p in table.items() if set(subset) <= hit)
                        labels = [bank.labels[i] for i in subset]
                        assert prob_set_clicks(bank, labels, n) == pytest.approx(brute, abs=1e-12)

    def test_errors(self, reference_signal_bank):
        with pytest.raises(ConfigError):
            prob_set_clicks(reference_signal_bank, ["Z"], 1)
        with pytest.raises(ConfigError):
            prob_set_clicks(reference_signal_bank, [], 1)
        with pytest.raises(ConfigError):
            prob_set_clicks(reference_signal_bank, ["A"], -1)

    @given(bank_strategy, st.integers(0, 6))
    def test_monotone_in_subset_size(self, draw, n):
        bank = bank_from(draw)
        labels = bank.labels
        for size in range(1, len(labels)):
            for subset in itertools.combinations(labels, size):
                for extra in set(labels) - set(subset):
                    assert (prob_set_clicks(bank, subset + (extra,), n)
                            <= prob_set_clicks(bank, subset, n) + 1e-12)

    def test_label_permutation(self, rng):
        bank = random_bank(rng, m=4)
        perm = [2, 0, 3, 1]
        shuffled = DetectorBankConfig(tuple(bank.detectors[i] for i in perm))
        for n in range(5):
            for k in range(5):
                assert prob_exactly_k(shuffled, k, n) == pytest.approx(prob_exactly_k(bank, k, n), abs=1e-14)
            assert prob_set_clicks(shuffled, ["A", "C"], n) == pytest.approx(prob_set_clicks(bank, ["A", "C"], n))


class TestExactlyK:
    def test_more_clicks_than_photons(self, reference_signal_bank):
        assert prob_exactly_k(reference_signal_bank, 3, 2) == 0.0
        assert prob_exactly_k(reference_signal_bank, 2, 1) == 0.0

    def test_three_of_three(self):
        bank = DetectorBankConfig.from_arrays([1 / 3] * 3, 1.0)
        assert prob_exactly_k(bank, 3, 3) == pytest.approx(2 / 9, abs=1e-15)

    def test_single_photon(self, reference_signal_bank):
        s = reference_signal_bank.weights.sum()
        assert prob_exactly_k(reference_signal_bank, 1, 1) == pytest.approx(s, abs=1e-15)

    def test_closed_form_expansion(self, rng):
        for _ in range(20):
            bank = random_bank(rng)
            for n in range(6):
                p1, p2, p3 = expanded_matrix(bank.split_fractions, bank.efficiencies, n)
                assert prob_exactly_k(bank, 1, n) == pytest.approx(p1, abs=1e-13)
                assert prob_exactly_k(bank, 2, n) == pytest.approx(p2, abs=1e-13)
                assert prob_exactly_k(bank, 3, n) == pytest.approx(p3, abs=1e-13)

    def test_matches_enumeration(self, rng):
        for _ in range(20):
            bank = random_bank(rng)
            for n in range(4):
                table = enumerate_clicks(bank.weights, n)
                for k in range(4):
                    brute = sum(p for hit, p in table.items() if len(hit) == k)
                    assert prob_exactly_k(bank, k, n) == pytest.approx(brute, abs=1e-12)

    @given(bank_strategy, st.integers(0, 8))
    def test_normalised(self, draw, n):
        bank = bank_from(draw)
        total = sum(prob_exactly_k(bank, k, n) for k in range(bank.m + 1))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_k_out_of_range(self, reference_signal_bank):
        with pytest.raises(ConfigError):
            prob_exactly_k(reference_signal_bank, 4, 4)


class TestMatrix:
    def test_lossless_columns_sum_to_one(self, rng):
        bank = random_bank(rng, lossless=True)
        M = build_conditional_matrix(bank).matrix
        np.testing.assert_allclose(M.sum(axis=0), 1.0, atol=1e-12)

    def test_reference_bank_termwise(self, reference_signal_bank):
        M = build_conditional_matrix(reference_signal_bank)
        assert M.n_max == 3
        for n in range(1, 4):
            for k in range(1, 4):
                assert M.entry(k, n) == prob_exactly_k(reference_signal_bank, k, n)
        assert np.all(np.tril(M.matrix, -1) == 0)
        assert np.all(np.diag(M.matrix) > 0)
        assert np.all(M.matrix.sum(axis=0) <= 1)

    def test_under_multiplexed(self, reference_signal_bank):
        with pytest.raises(ConfigError, match="exceeds"):
            build_conditional_matrix(reference_signal_bank, 4)

    def test_monte_carlo(self, reference_signal_bank, rng):
        M = build_conditional_matrix(reference_signal_bank).matrix
        N = 10**6
        for n in (1, 2, 3):
            masks = route_photons(reference_signal_bank.weights, np.full(N, n), rng)
            k = np.array([bin(x).count("1") for x in range(8)])[masks]
            for kk in range(1, 4):
                f = np.mean(k == kk)
                expected = M[kk - 1, n - 1]
                assert abs(f - expected) <= 3 * np.sqrt(expected * (1 - expected) / N) + 1e-12


class TestThresholdDetect:
    def test_no_photons(self, reference_signal_bank, rng):
        assert threshold_detect(reference_signal_bank, 0, rng) == frozenset()

    def test_blind_detectors(self, rng):
        bank = DetectorBankConfig.from_arrays([0.3, 0.35, 0.35], 0.0)
        assert all(threshold_detect(bank, 5, rng) == frozenset() for _ in range(100))

    def test_pattern_frequency(self, reference_signal_bank, rng):
        n, N = 3, 10**6
        masks = route_photons(reference_signal_bank.weights, np.full(N, n), rng)
        target = reference_signal_bank.mask(["A", "B"])
        freq = np.mean(masks == target)
        # exactly {A, B}: both A and B fire, C does not
        w = reference_signal_bank.weights
        exact = (1 - w[2]) ** n - (1 - w[0] - w[2]) ** n - (1 - w[1] - w[2]) ** n + (1 - w.sum()) ** n
        brute = enumerate_clicks(w, n)[frozenset({0, 1})]
        assert exact == pytest.approx(brute, abs=1e-14)
        assert abs(freq - exact) <= 3 * np.sqrt(exact * (1 - exact) / N)

    def test_returns_labels(self, rng):
        bank = DetectorBankConfig.from_arrays([1.0], [1.0], labels=["X"])
        assert threshold_detect(bank, 1, rng) == frozenset({"X"})


class TestConfig:
    @pytest.mark.parametrize("entries", [
        [{"label": "A", "split_fraction": 0.7, "efficiency": 0.5},
         {"label": "B", "split_fraction": 0.7, "efficiency": 0.5}],
        [{"label": "A", "split_fraction": 0.5, "efficiency": 1.5}],
        [{"label": "A", "split_fraction": -0.1, "efficiency": 0.5}],
        [{"label": "A", "split_fraction": 0.5, "efficiency": 0.5},
         {"label": "A", "split_fraction": 0.5, "efficiency": 0.5}],
        [{"label": "A+B", "split_fraction": 0.5, "efficiency": 0.5}],
        [],
    ])
    def test_invalid(self, entries):
        with pytest.raises(ConfigError):
            DetectorBankConfig.from_list(entries)

    def test_round_trip(self, reference_signal_bank):
        assert DetectorBankConfig.from_list(reference_signal_bank.to_list()) == reference_signal_bank

    def test_presplit_loss_allowed(self):
        bank = DetectorBankConfig.from_arrays([0.2, 0.3], [1.0, 1.0])
        assert prob_exactly_k(bank, 0, 1) == pytest.approx(0.5)
