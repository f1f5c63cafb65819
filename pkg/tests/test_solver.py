import numpy as np
import pytest

from nett.analysis import RateFunction
from nett.operators import DenseOperator
from nett.regularizers import FunctionalRegularizer, WeightedLq
from nett.rng import SeededRng
from nett.solver import (
    AlphaRule,
    NettProblem,
    SolveConfig,
    SolverDiverged,
    choose_alpha,
    nett_minimize,
    tikhonov_dense_oracle,
    write_trace_csv,
)


def _instance(seed, n=20):
    rng = SeededRng(seed)
    a = rng.normal((n, n)) / np.sqrt(n)
    return DenseOperator(a), rng.normal(n)


def _rel(x, ref):
    return np.linalg.norm(x - ref) / np.linalg.norm(ref)


class TestIteration:
    def test_one_step_by_hand(self):
        problem = NettProblem(DenseOperator([[1.0]]), [1.0], WeightedLq(2.0), alpha=1.0)
        res = nett_minimize(problem, SolveConfig(step_sizes=0.1, max_iter=1, snapshots=(0, 1)))
        assert res.x[0] == pytest.approx(0.08, abs=1e-15)
        assert res.snapshots[0][0] == 0.0
        assert res.data_term[0] == pytest.approx(0.5 * 0.92**2, rel=1e-14)
        assert res.reg_term[0] == pytest.approx(0.08**2, rel=1e-14)

    def test_least_squares_without_regularizer(self):
        op, y = _instance(1, n=12)
        lip = np.linalg.norm(op.entries, 2) ** 2
        reg = FunctionalRegularizer(lambda x: np.nan, lambda x: np.full_like(x, np.nan))
        res = nett_minimize(NettProblem(op, y, reg, 0.0), SolveConfig(1.0 / lip, 20000))
        grad = op.adjoint(op.apply(res.x) - y)
        assert np.linalg.norm(grad) <= 1e-8

    def test_incremental_fixed_point_is_shifted_tikhonov(self):
        # x = (1 - 2 s a)(x - s A^T (A x - y))  <=>  (A^T A + 2 a / (1 - 2 s a)) x = A^T y
        op, y = _instance(2)
        alpha = 0.3
        s = 1.0 / (np.linalg.norm(op.entries, 2) ** 2 + 2 * alpha)
        res = nett_minimize(NettProblem(op, y, WeightedLq(2.0), alpha), SolveConfig(s, 5000))
        shifted = tikhonov_dense_oracle(op, y, alpha / (1 - 2 * s * alpha))
        assert _rel(res.x, shifted) <= 1e-10

    def test_incremental_bias_shrinks_with_step(self):
        op, y = _instance(3)
        alpha = 0.3
        exact = tikhonov_dense_oracle(op, y, alpha)
        errs = []
        for s in (0.2, 0.1, 0.05):
            x = tikhonov_dense_oracle(op, y, alpha / (1 - 2 * s * alpha))
            errs.append(_rel(x, exact))
        assert errs[0] > errs[1] > errs[2]

    def test_simultaneous_matches_oracle(self):
        for seed in range(3):
            op, y = _instance(seed)
            alpha = 0.3
            s = 1.0 / (np.linalg.norm(op.entries, 2) ** 2 + 2 * alpha)
            res = nett_minimize(NettProblem(op, y, WeightedLq(2.0), alpha),
                                SolveConfig(s, 5000, scheme="simultaneous"))
            assert _rel(res.x, tikhonov_dense_oracle(op, y, alpha)) <= 1e-6

    def test_step_sequence_and_snapshots(self):
        op, y = _instance(4, n=5)
        steps = 0.5 / np.arange(1, 11)
        res = nett_minimize(NettProblem(op, y, WeightedLq(2.0), 0.1),
                            SolveConfig(steps, 10, record_every=5, snapshots=(3,)))
        assert sorted(res.snapshots) == [3, 5, 10]
        assert np.array_equal(res.snapshots[10], res.x)
        assert res.objective.shape == (10,)

    def test_divergence(self):
        op, y = _instance(5, n=5)
        with pytest.raises(SolverDiverged, match="iteration"):
            nett_minimize(NettProblem(op, y, WeightedLq(2.0), 0.1), SolveConfig(1e3, 500))

    def test_validation(self):
        op, y = _instance(5, n=5)
        with pytest.raises(ValueError):
            NettProblem(op, np.zeros(4), WeightedLq(2.0), 0.1)
        with pytest.raises(ValueError):
            NettProblem(op, y, WeightedLq(2.0), -1.0)
        with pytest.raises(ValueError):
            SolveConfig(step_sizes=[0.1, 0.1], max_iter=5)
        with pytest.raises(ValueError):
            SolveConfig(step_sizes=-1.0)
        with pytest.raises(ValueError):
            SolveConfig(scheme="newton")

    def test_trace_csv(self, tmp_path):
        problem = NettProblem(DenseOperator([[1.0]]), [1.0], WeightedLq(2.0), alpha=1.0)
        res = nett_minimize(problem, SolveConfig(step_sizes=0.1, max_iter=3))
        write_trace_csv(tmp_path / "t.csv", res)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "iter,data_term,reg_term,objective"
        assert len(lines) == 4
        assert float(lines[1].split(",")[2]) == pytest.approx(0.0064, rel=1e-12)


class TestOracle:
    def test_identity_hand(self):
        x = tikhonov_dense_oracle(DenseOperator(np.eye(2)), np.array([1.0, 0.0]), 0.5)
        assert np.allclose(x, [0.5, 0.0], atol=1e-15)

    def test_norm_decreases_with_alpha(self):
        op, y = _instance(6, n=8)
        norms = [np.linalg.norm(tikhonov_dense_oracle(op, y, a)) for a in (0.01, 0.1, 1, 10, 100)]
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_residual(self):
        rng = SeededRng(7)
        a, y = rng.normal((5, 5)), rng.normal(5)
        x = tikhonov_dense_oracle(a, y, 0.2)
        assert np.max(np.abs((a.T @ a + 0.4 * np.eye(5)) @ x - a.T @ y)) <= 1e-10


class TestAlphaRule:
    def test_proportional(self):
        assert choose_alpha(AlphaRule("proportional_delta", 1.0), 1e-3) == 1e-3

    def test_rate_matched(self):
        rule = AlphaRule("rate_matched", 1.0, RateFunction("sqrt"))
        assert choose_alpha(rule, 1e-4) == pytest.approx(1e-2, rel=1e-14)

    def test_admissible_sequence(self):
        deltas = 10.0 ** -np.arange(1, 9)
        for rule in (AlphaRule("proportional_delta", 1.0), AlphaRule("rate_matched", 1.0, RateFunction("sqrt"))):
            alphas = np.array([choose_alpha(rule, d) for d in deltas])
            assert np.all(np.diff(alphas) < 0)
            if rule.kind == "rate_matched":
                assert np.all(np.diff(deltas / alphas) < 0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            AlphaRule("rate_matched")
        with pytest.raises(ValueError):
            choose_alpha(AlphaRule(), 0.0)
