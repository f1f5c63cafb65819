import numpy as np
import pytest

from nett.analysis import (
    ConvergenceReport,
    NonconvexFamily,
    QuadraticFamily,
    RateFunction,
    RateReport,
    absolute_bregman,
    convergence_experiment,
    fit_slope,
    modulus_total_nonlinearity,
    rate_bound,
    rate_experiment,
)
from nett.regularizers import FunctionalRegularizer, WeightedLq
from nett.rng import SeededRng
from nett.solver import AlphaRule, tikhonov_dense_oracle

square = FunctionalRegularizer(lambda x: float(np.sum(x * x)), lambda x: 2 * x, "square")
neg_square = FunctionalRegularizer(lambda x: -float(np.sum(x * x)), lambda x: -2 * x, "neg_square")


def _affine(a):
    return FunctionalRegularizer(lambda x: float(a @ x) + 3.0, lambda x: a.copy(), "affine")


class TestBregman:
    def test_quadratic(self):
        assert absolute_bregman(square, np.array([3.0]), np.array([1.0])) == 4.0

    def test_nonconvex_sign(self):
        assert absolute_bregman(neg_square, np.array([2.0]), np.array([0.0])) == 4.0

    def test_identity(self):
        x = SeededRng(0).normal(4)
        assert absolute_bregman(WeightedLq(1.5), x, x) == 0.0


class TestModulus:
    def test_quadratic_is_t_squared(self):
        x = SeededRng(1).normal(6)
        est = modulus_total_nonlinearity(square, x, 0.3, 20, SeededRng(2))
        assert est == pytest.approx(0.09, rel=1e-12)

    def test_affine_is_zero(self):
        a = SeededRng(3).normal(5)
        x = SeededRng(4).normal(5)
        for t in (0.1, 1.0, 10.0):
            assert modulus_total_nonlinearity(_affine(a), x, t, 10, SeededRng(5)) == pytest.approx(0.0, abs=1e-12)

    def test_lq_positive_away_from_zero(self):
        rng = SeededRng(6)
        x = rng.uniform(10, 0.5, 2.0) * np.where(rng.uniform(10) < 0.5, -1, 1)
        est = modulus_total_nonlinearity(WeightedLq(1.5), x, 0.1, 500, SeededRng(7))
        assert est > 0

    def test_monotone_in_samples(self):
        x = np.full(8, 0.7)
        # the first 10 directions of the 1000-sample run are the same stream
        small = modulus_total_nonlinearity(WeightedLq(1.5), x, 0.2, 10, SeededRng(8))
        large = modulus_total_nonlinearity(WeightedLq(1.5), x, 0.2, 1000, SeededRng(8))
        assert large <= small

    def test_invalid(self):
        with pytest.raises(ValueError):
            modulus_total_nonlinearity(square, np.zeros(2), 0.0, 5, SeededRng(0))


class TestRateBound:
    def test_sqrt_hand_value(self):
        assert abs(rate_bound(RateFunction("sqrt"), 0.01, 0.1) - 0.225) <= 1e-12

    def test_linear_exact_penalization(self):
        rf = RateFunction("linear")
        assert rate_bound(rf, 0.01, 0.5) == pytest.approx(0.01 / 0.5 + 0.01, rel=1e-14)
        assert rate_bound(rf, 0.01, 2.0) == float("inf")

    def test_bounded_along_matched_rule(self):
        rf = RateFunction("sqrt")
        ratios = [rate_bound(rf, d, d / rf(d)) / rf(d) for d in 10.0 ** -np.arange(2, 9)]
        assert max(ratios) <= 3.0
        assert np.ptp(ratios) <= 1e-9

    def test_conjugate_against_numeric_sup(self):
        rf = RateFunction("power", C=2.0, gamma=0.3)
        s = np.linspace(0, 5, 2_000_001)
        for v in (0.2, 0.7):
            numeric = np.max(v * s - rf.inverse(s))
            assert rf.conjugate_of_inverse(v) == pytest.approx(numeric, rel=1e-6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            rate_bound(RateFunction(), 0.0, 0.1)
        with pytest.raises(ValueError):
            rate_bound(RateFunction(), 0.1, 0.1, tau=0.5)
        with pytest.raises(ValueError):
            RateFunction("power", gamma=1.5)


class TestRates:
    deltas = 10.0 ** -np.arange(1, 6)

    def test_fit_slope(self):
        d = np.array([1e-1, 1e-2, 1e-3])
        assert fit_slope(d, 3 * d**0.5) == pytest.approx(0.5, abs=1e-12)

    def test_quadratic_bregman_and_norm(self):
        fam = QuadraticFamily(seed=0)
        rule = AlphaRule("proportional_delta", 1.0)
        breg = rate_experiment(fam, rule, self.deltas, "bregman", tolerance=0.2)
        norm = rate_experiment(fam, rule, self.deltas, "norm", tolerance=0.15)
        assert breg.passed, breg.fitted_slope
        assert norm.passed, norm.fitted_slope

    def test_quadratic_x_plus_satisfies_source_condition(self):
        fam = QuadraticFamily(seed=1)
        assert np.allclose(fam.regularizer.gradient(fam.x_plus), fam.operator.adjoint(fam.xi), atol=1e-14)

    def test_nonconvex_source_condition(self):
        fam = NonconvexFamily(seed=0)
        lhs = fam.regularizer.gradient(fam.x_plus)
        assert np.allclose(lhs, fam.operator.adjoint(fam.xi), atol=1e-9)

    def test_nonconvex_solve_is_stationary(self):
        fam = NonconvexFamily(seed=1)
        y = fam.y + 0.1 * fam.noise_direction
        x = fam.solve(y, 0.1)
        op = fam.operator
        grad = op.adjoint(op.apply(x) - y) + 0.1 * fam.regularizer.gradient(x)
        assert np.linalg.norm(grad) <= 1e-10

    def test_report_csv(self, tmp_path):
        rep = RateReport(self.deltas, self.deltas, self.deltas, 1.0, 1.0, 0.2)
        rep.to_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "delta,alpha,error" and len(lines) == 7
        assert lines[-1].endswith("pass")
        with pytest.raises(ValueError):
            RateReport(self.deltas[::-1], self.deltas, self.deltas, 1.0, 1.0, 0.2)


class TestConvergence:
    def test_errors_and_gaps_decrease(self):
        fam = QuadraticFamily(seed=2)
        rep = convergence_experiment(fam, AlphaRule("proportional_delta", 1.0), 10.0 ** -np.arange(1, 6))
        assert isinstance(rep, ConvergenceReport)
        assert rep.eventually_decreasing and rep.contracted
        assert np.all(np.diff(rep.reg_gaps[1:]) < 0)

    def test_exact_data_limit_is_minimum_norm(self):
        fam = QuadraticFamily(n=30, seed=3)
        target = tikhonov_dense_oracle(fam.operator, fam.y, 1e-12)
        errs = [np.linalg.norm(fam.solve(fam.y, a) - target) for a in 10.0 ** -np.arange(2, 11, 2)]
        assert all(b < a for a, b in zip(errs, errs[1:]))
        assert errs[-1] <= 1e-4
