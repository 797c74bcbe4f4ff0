"""Verification-suite machinery tests (small-scale; full scale runs in the
acceptance module)."""

import numpy as np
import pytest

from bandshare.demand import DemandSpec
from bandshare.engine import BuyerSpec, Scenario
from bandshare.verify import (
    balance_suite,
    expected_utilities_rb,
    monotonicity_suite,
    natural_suite,
    run_suite,
)


class TestNaturalSuite:
    def test_passes_with_exactly_one_expected_failure(self):
        report = natural_suite(seed=3)
        assert report.passed
        assert sum("expected failure" in line for line in report.lines) == 1
        assert sum("VIOLATION" in line for line in report.lines) == 0
        assert "witness" in next(l for l in report.lines if "cliff" in l)


class TestMonotonicitySuite:
    def test_small_sweep_passes(self):
        report = monotonicity_suite(seed=5, n_scenarios=2, n_pairs=6)
        assert report.passed
        assert "0 violations" in report.lines[-1]


class TestBalanceSuite:
    def test_small_run_passes(self):
        report = balance_suite(seed=4, n_pools=60)
        assert report.passed


class TestRunSuite:
    def test_unknown_suite(self):
        with pytest.raises(ValueError, match="unknown suite"):
            run_suite("vibes")

    def test_dispatch(self):
        assert run_suite("balance", seed=4, n_pools=20).name == "balance"


class TestConditionedEstimator:
    def test_uncontested_buyer_utility_is_exactly_value_times_bytes(self):
        """With no competition and r = 0, utility conditioned on the coin is
        v*x for every bid: the rebate exactly cancels the bid dependence."""
        scenario = Scenario(
            buyers=(BuyerSpec("solo", 3.0, DemandSpec.constant(4.0), 1, 30),),
            capacity=10.0,
            mechanism="bks",
            mu=0.2,
            horizon=30,
        )
        utilities = expected_utilities_rb(scenario, "solo", [1.0, 3.0, 7.0], 50, seed=1)
        expected = 3.0 * 4.0 * 30
        for arr in utilities.values():
            np.testing.assert_allclose(arr, expected, rtol=1e-12)

    def test_requires_resampling_mechanism(self):
        scenario = Scenario(
            buyers=(BuyerSpec("solo", 3.0, DemandSpec.constant(4.0), 1, 10),),
            capacity=10.0,
            mechanism="vmm",
            horizon=10,
        )
        with pytest.raises(ValueError):
            expected_utilities_rb(scenario, "solo", [3.0], 5, seed=0)
