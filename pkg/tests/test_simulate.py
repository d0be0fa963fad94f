import math

import numpy as np
import pytest

from jointrisk.basis import SplineBasis
from jointrisk.hazard import LinkSpec, SurvivalParams, cumulative_hazard
from jointrisk.simulate import (
    SimConfig, calibrate_offset, simulate_cohort, simulate_event_time,
    write_truth_csv,
)
from jointrisk.trajectory import LinearAgeDesign

from conftest import SIM_BASIS, TRUE_B_COV, TRUE_BETA, sim_config

DESIGN = LinearAgeDesign()
WIDE_FLAT = SplineBasis(degree=0, interior_knots=(), boundary=(40.0, 140.0))


class Subject:
    def __init__(self, t0=45.0, age0=45.0, manuf=1):
        self.t0 = t0
        self.age0 = age0
        self.manuf = manuf
        self.extras = {}


def flat_params(log_lambda, link=None):
    return SurvivalParams(basis=WIDE_FLAT, gamma_h0=np.array([log_lambda]),
                          link=link or LinkSpec("value", alpha1=0.0))


class TestSimulateEventTime:
    def test_constant_hazard_inverse_transform(self):
        # lambda constant: T - t0 must equal -log(u) / lambda
        lam = 0.3
        params = flat_params(math.log(lam))
        subject = Subject()
        rng = np.random.default_rng(0)
        for u in rng.uniform(0.001, 0.999, 200):
            t = simulate_event_time(params, DESIGN, np.zeros(4), np.zeros(2),
                                    subject, float(u))
            assert t - subject.t0 == pytest.approx(-math.log(u) / lam,
                                                   abs=1e-6)

    def test_plug_back_recovers_target(self):
        # general hazard: H(t0, T*) must return -log(u)
        link = LinkSpec("value", alpha1=0.08)
        params = flat_params(-4.0, link=link)
        beta = np.array([2.0, 0.03, 0.0, 0.1])
        b = np.array([0.4, 0.01])
        subject = Subject()
        rng = np.random.default_rng(1)
        for u in rng.uniform(0.01, 0.9, 50):
            t = simulate_event_time(params, DESIGN, beta, b, subject, float(u))
            if math.isinf(t):
                continue
            got = cumulative_hazard(params, DESIGN, beta, b, subject,
                                    subject.t0, t)
            assert got == pytest.approx(-math.log(u), abs=1e-6)

    def test_u_one_gives_entry(self):
        params = flat_params(0.0)
        assert simulate_event_time(params, DESIGN, np.zeros(4), np.zeros(2),
                                   Subject(), 1.0) == Subject().t0

    def test_no_event_sentinel(self):
        params = flat_params(-30.0)
        t = simulate_event_time(params, DESIGN, np.zeros(4), np.zeros(2),
                                Subject(), 0.5)
        assert math.isinf(t)


class TestSimulateCohort:
    def test_fixed_seed_bit_identical(self):
        a = simulate_cohort(sim_config(40, seed=3))
        b = simulate_cohort(sim_config(40, seed=3))
        assert len(a.cohort) == len(b.cohort)
        for sa, sb in zip(a.cohort.subjects, b.cohort.subjects):
            assert sa.subject_id == sb.subject_id
            np.testing.assert_array_equal(sa.times, sb.times)
            np.testing.assert_array_equal(sa.y, sb.y)
            assert sa.event_age == sb.event_age
        np.testing.assert_array_equal(a.b_true, b.b_true)
        np.testing.assert_array_equal(a.true_event_age, b.true_event_age)

    def test_different_seed_differs(self):
        a = simulate_cohort(sim_config(20, seed=4))
        b = simulate_cohort(sim_config(20, seed=5))
        assert not np.array_equal(a.b_true, b.b_true)

    def test_noise_free_measurements_on_the_line(self):
        sim = simulate_cohort(sim_config(25, seed=6, sigma_eps=0.0))
        for i, s in enumerate(sim.cohort.subjects):
            b = sim.b_true[i]
            expected = (TRUE_BETA[0] + TRUE_BETA[1] * s.times
                        + TRUE_BETA[2] * s.age0 + TRUE_BETA[3] * s.manuf
                        + b[0] + b[1] * s.times)
            np.testing.assert_allclose(s.y, expected, atol=1e-10)

    def test_cohort_invariants(self):
        config = sim_config(150, seed=8)
        sim = simulate_cohort(config)
        lo, hi = config.entry_age_range
        for i, s in enumerate(sim.cohort.subjects):
            assert lo <= s.t0 <= hi
            assert s.times.size >= 2
            assert s.times.size <= config.max_visits
            assert np.all(np.diff(s.times) > 0)
            assert s.times[0] == s.t0
            # no prevalent cases: follow-up always reaches the second visit
            assert s.event_age >= s.times[1] - 1e-12
            assert np.all(s.times <= s.event_age + 1e-9)
            assert s.times[-1] <= config.basis.boundary[1]
            if s.event_indicator:
                assert s.event_age == pytest.approx(sim.true_event_age[i])
            else:
                assert s.event_age == pytest.approx(sim.censor_age[i])
        assert 0 < sim.cohort.n_events < len(sim.cohort)

    def test_zero_alpha_breaks_association(self):
        # with no link, the random effects must not predict events
        link = LinkSpec("value_slope", alpha1=0.0, alpha2=0.0)
        sim = simulate_cohort(sim_config(
            1000, seed=9, link=link,
            gamma_h0=np.full(SIM_BASIS.size, -3.2)))
        d = np.array([s.event_indicator for s in sim.cohort.subjects])
        assert 0.05 < d.mean() < 0.95
        r = np.corrcoef(sim.b_true[:, 0], d)[0, 1]
        assert abs(r) < 0.08

    def test_event_fraction_monotone_in_alpha(self):
        # the trajectory value is positive, so a stronger value link raises
        # every hazard and with it the event fraction
        fracs = []
        for a1 in (0.0, 0.3):
            link = LinkSpec("value_slope", alpha1=a1, alpha2=0.0)
            sim = simulate_cohort(sim_config(
                400, seed=10, link=link,
                gamma_h0=np.full(SIM_BASIS.size, -4.5)))
            fracs.append(sim.cohort.n_events / 400)
        assert fracs[1] > fracs[0]


class TestCalibrateOffset:
    @pytest.mark.slow
    def test_hits_target_fraction(self):
        config = sim_config(200, seed=12, target_event_fraction=0.3)
        offset = calibrate_offset(config, n_pilot=100)
        assert np.isfinite(offset)
        sim = simulate_cohort(config)
        achieved = sim.cohort.n_events / len(sim.cohort)
        assert abs(achieved - 0.3) <= 0.05

    def test_unattainable_target_warns(self):
        # baseline so hot that even the lowest probed offset saturates
        config = sim_config(20, seed=13, target_event_fraction=0.05,
                            gamma_h0=np.full(SIM_BASIS.size, 10.0))
        with pytest.warns(UserWarning, match="unattainable"):
            offset = calibrate_offset(config, n_pilot=20)
        assert offset == 0.0


class TestConfigValidation:
    def test_bad_sizes(self):
        with pytest.raises(ValueError, match="at least one subject"):
            sim_config(0)
        with pytest.raises(ValueError, match="nonnegative"):
            sim_config(10, sigma_eps=-1.0)


class TestTruthCSV:
    def test_round_numbers(self, tmp_path):
        sim = simulate_cohort(sim_config(12, seed=14))
        path = tmp_path / "truth.csv"
        write_truth_csv(sim, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "subject_id,b0,b1,true_event_age,censor_age"
        assert len(lines) == 13
        first = lines[1].split(",")
        assert first[0] == "sim000000"
        assert float(first[1]) == sim.b_true[0, 0]
