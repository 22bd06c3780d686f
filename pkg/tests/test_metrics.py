import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfm_lab import metrics
from sfm_lab.errors import ConfigError
from sfm_lab.metrics import EnsembleBatch, crps_ensemble, evaluate, mae, rmse, ssr, write_report


def crps_quadrature(members, obs):
    """Independent oracle: integrate (F(y) - 1[y >= obs])^2 over y.

    The empirical CDF makes the integrand piecewise constant, so the
    integral is an exact sum over segments between sorted breakpoints.
    """
    members = np.sort(np.asarray(members, dtype=np.float64))
    m = members.size
    points = np.unique(np.concatenate([members, [float(obs)]]))
    total = 0.0
    for lo, hi in zip(points[:-1], points[1:]):
        mid = 0.5 * (lo + hi)
        cdf = np.sum(members <= mid) / m
        heaviside = 1.0 if mid >= obs else 0.0
        total += (cdf - heaviside) ** 2 * (hi - lo)
    # tails: below min(points) F=0/I=0; above max F=1/I=1 -> zero integrand
    return total


class TestRmseMae:
    def test_exact_prediction(self):
        x = np.ones((3, 4))
        assert rmse(x, x) == 0.0
        assert mae(x, x) == 0.0

    def test_constant_offset(self):
        truth = np.zeros((5, 5))
        assert rmse(np.full((5, 5), 3.0), truth) == pytest.approx(3.0)
        pred = np.tile([2.0, -2.0], (5, 13))[:, :5]
        assert mae(pred[:5, :5], truth) == pytest.approx(2.0)

    def test_against_float64_accumulation(self, rng):
        a = rng.standard_normal((40, 40)).astype(np.float32)
        b = rng.standard_normal((40, 40)).astype(np.float32)
        brute = np.sqrt(
            sum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        )
        assert rmse(a, b) == pytest.approx(brute, rel=1e-6)
        brute_mae = sum(abs(float(x) - float(y)) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert mae(a, b) == pytest.approx(brute_mae, rel=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            rmse(np.zeros((0,)), np.zeros((0,)))

    def test_rmse_at_least_mae(self, rng):
        a = rng.standard_normal((30, 30))
        b = rng.standard_normal((30, 30))
        assert rmse(a, b) >= mae(a, b)


class TestCrps:
    def test_members_equal_obs(self):
        assert crps_ensemble(np.zeros((4, 10)), np.zeros(10)) == 0.0

    def test_single_member_equals_mae(self, rng):
        member = rng.standard_normal((1, 17))
        obs = rng.standard_normal(17)
        assert crps_ensemble(member, obs) == pytest.approx(mae(member[0], obs), abs=0)

    def test_two_member_hand_example(self):
        # members {0, 1}, obs 0.5: energy form gives 0.5 - 0.25 = 0.25
        assert crps_ensemble(np.array([[0.0], [1.0]]), np.array([0.5])) == pytest.approx(0.25)

    def test_matches_quadrature_oracle(self, rng):
        for _ in range(60):
            m = rng.integers(1, 5)
            members = rng.standard_normal(m) * rng.uniform(0.5, 3)
            obs = rng.standard_normal() * 2
            energy = crps_ensemble(members[:, None], np.array([obs]))
            assert energy == pytest.approx(crps_quadrature(members, obs), abs=1e-8)

    def test_upper_bounded_by_member_mae(self, rng):
        members = rng.standard_normal((8, 50))
        obs = rng.standard_normal(50)
        assert crps_ensemble(members, obs) <= np.mean(np.abs(members - obs)) + 1e-12

    def test_permutation_invariance(self, rng):
        members = rng.standard_normal((6, 20))
        obs = rng.standard_normal(20)
        base = crps_ensemble(members, obs)
        shuffled = members[rng.permutation(6)]
        assert crps_ensemble(shuffled, obs) == pytest.approx(base, abs=1e-12)

    def test_unbiased_variant_larger_spread_term(self, rng):
        members = rng.standard_normal((4, 30))
        obs = rng.standard_normal(30)
        assert crps_ensemble(members, obs, biased=False) <= crps_ensemble(members, obs)

    @given(
        st.lists(st.integers(min_value=-5, max_value=5), min_size=1, max_size=4),
        st.integers(min_value=-5, max_value=5),
    )
    @settings(max_examples=200, deadline=None)
    def test_nonnegative_zero_iff_exact_and_quadrature(self, member_vals, obs):
        members = np.asarray(member_vals, dtype=np.float64)[:, None]
        value = crps_ensemble(members, np.array([float(obs)]))
        assert value >= -1e-12
        if all(v == obs for v in member_vals):
            assert value == pytest.approx(0.0, abs=1e-12)
        elif len(set(member_vals)) == 1:
            assert value > 0
        # bounded integer ensembles: energy form == exact CDF-integral quadrature
        assert value == pytest.approx(crps_quadrature(member_vals, obs), abs=1e-8)


class TestSsr:
    def test_iid_gaussian_is_calibrated(self, rng):
        truth = rng.standard_normal(4000)
        members = truth[None] + 0.7 * rng.standard_normal((64, 4000))
        assert ssr(members, truth) == pytest.approx(1.0, abs=0.05)

    def test_identical_members_zero_spread(self):
        members = np.tile(np.arange(5.0), (3, 1))
        assert ssr(members, np.zeros(5)) == 0.0

    def test_plus_minus_c_closed_form(self):
        truth = np.zeros(100)
        c = 1.7
        members = np.stack([truth + c, truth - c])
        # spread = c*sqrt(2) under m-1 normalization, member rmse = c
        assert ssr(members, truth) == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_single_member_rejected(self):
        with pytest.raises(ConfigError):
            ssr(np.zeros((1, 5)), np.zeros(5))


class TestEnsembleBatch:
    def test_shape_validation(self, rng):
        with pytest.raises(ConfigError):
            EnsembleBatch(rng.standard_normal((3, 1, 4, 4)), rng.standard_normal((1, 5, 5)))
        EnsembleBatch(rng.standard_normal((3, 1, 4, 4)), rng.standard_normal((1, 4, 4)))


class TestEvaluate:
    def make_samples(self, rng, n=6, m=5, c=1, hw=16):
        truth = rng.standard_normal((n, c, hw, hw))
        members = truth[:, None] + 0.5 * rng.standard_normal((n, m, c, hw, hw))
        return members, truth

    def test_truth_replica_scores_zero(self, rng):
        truth = rng.standard_normal((4, 1, 8, 8))
        members = np.repeat(truth[:, None], 3, axis=1)
        report = evaluate(members, truth, ["zeta_h"], "sfm")
        row = report.scores["zeta_h"]
        # the mean of m identical members differs from them only by rounding
        assert row["rmse"] == pytest.approx(0.0, abs=1e-12)
        assert row["mae"] == pytest.approx(0.0, abs=1e-12)
        assert row["crps"] == pytest.approx(0.0, abs=1e-12)
        assert row["ssr"] == pytest.approx(0.0, abs=1e-12)

    def test_crps_bounded_by_member_mae(self, rng):
        members, truth = self.make_samples(rng)
        report = evaluate(members, truth, ["zeta_h"], "sfm")
        member_mae = np.mean(np.abs(members - truth[:, None]))
        assert report.scores["zeta_h"]["crps"] <= member_mae

    def test_deterministic_single_member(self, rng):
        members, truth = self.make_samples(rng, m=1)
        report = evaluate(members, truth, ["zeta_h"], "regression")
        assert report.scores["zeta_h"]["ssr"] is None
        assert report.scores["zeta_h"]["crps"] == pytest.approx(
            report.scores["zeta_h"]["mae"]
        )

    def test_report_files_schema(self, tmp_path, rng):
        members, truth = self.make_samples(rng)
        report = evaluate(members, truth, ["zeta_h"], "cfm")
        csv_path, json_path, spectra_path = write_report(report, tmp_path)
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["variable", "metric", "scheme", "value"]
        metrics_seen = [r[1] for r in rows[1:]]
        assert metrics_seen == ["rmse", "crps", "mae", "ssr"]
        assert all(r[0] == "zeta_h" and r[2] == "cfm" for r in rows[1:])
        with open(spectra_path) as fh:
            srows = list(csv.reader(fh))
        assert srows[0] == ["k_bin", "power", "series"]
        series = {r[2] for r in srows[1:]}
        assert series == {"zeta_h/truth", "zeta_h/cfm"}

    def test_coverage_mismatch_rejected(self, rng):
        members, truth = self.make_samples(rng)
        with pytest.raises(ConfigError):
            evaluate(members[:, :, :, :8], truth, ["zeta_h"], "sfm")
