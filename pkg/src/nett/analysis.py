"""Bregman-distance diagnostics and convergence-rate experiments.

The experiments run on small dense problems whose ground truth ``x_plus``
is built to satisfy the source condition ``grad R(x_plus) = F^T xi``; data
noise is scaled to norm exactly ``delta``.  Only the fitted log-log slopes
are observable; the constants in the rate estimates are not.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from .grid import inner_product
from .operators import DenseOperator
from .regularizers import NonconvexLq, WeightedLq, random_tanh_features
from .rng import SeededRng
from .solver import (
    NettProblem,
    SolveConfig,
    choose_alpha,
    nett_minimize,
    tikhonov_dense_oracle,
)

__all__ = [
    "RateFunction",
    "RateReport",
    "ConvergenceReport",
    "absolute_bregman",
    "modulus_total_nonlinearity",
    "rate_bound",
    "fit_slope",
    "QuadraticFamily",
    "NonconvexFamily",
    "rate_experiment",
    "convergence_experiment",
]


@dataclass(frozen=True)
class RateFunction:
    """Index function ``C * t**gamma``.

    ``kind`` is ``'sqrt'`` (gamma 1/2), ``'linear'`` (gamma 1) or
    ``'power'`` (user supplied gamma in (0, 1]).  Concave, continuous,
    strictly increasing and zero at zero for every admissible parameter.
    """

    kind: str = "sqrt"
    C: float = 1.0
    gamma: float = None

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        g = {"sqrt": 0.5, "linear": 1.0}.get(self.kind, self.gamma)
        if self.kind not in ("sqrt", "linear", "power"):
            raise ValueError(f"unknown rate function kind {self.kind!r}")
        if g is None or not 0 < g <= 1:
            raise ValueError("power kind needs gamma in (0, 1]")
        object.__setattr__(self, "gamma", float(g))

    def __call__(self, t):
        return self.C * np.power(t, self.gamma)

    def inverse(self, s):
        return np.power(s / self.C, 1.0 / self.gamma)

    def conjugate_of_inverse(self, v):
        """Fenchel conjugate ``sup_{s >= 0} (v s - inverse(s))``.

        For ``gamma < 1`` the maximizer is ``s* = (gamma v C**(1/gamma))**(gamma/(1-gamma))``
        and the value ``(1 - gamma) v s*``; for ``gamma == 1`` the conjugate
        is 0 for ``v <= 1/C`` and ``+inf`` otherwise.
        """
        if v <= 0:
            return 0.0
        g = self.gamma
        if g == 1.0:
            return 0.0 if v <= 1.0 / self.C else float("inf")
        s_star = (g * v * self.C ** (1.0 / g)) ** (g / (1.0 - g))
        return (1.0 - g) * v * s_star


def rate_bound(rf, delta, alpha, tau=1.0):
    """``delta/alpha + rf(tau delta) + conj(tau alpha) / (tau alpha)``."""
    if not (delta > 0 and alpha > 0):
        raise ValueError("delta and alpha must be positive")
    if tau < 1:
        raise ValueError("tau must be >= 1")
    conj = rf.conjugate_of_inverse(tau * alpha)
    if np.isinf(conj):
        return float("inf")
    return delta / alpha + float(rf(tau * delta)) + conj / (tau * alpha)


def absolute_bregman(reg, x_tilde, x):
    """``|R(x~) - R(x) - <R'(x), x~ - x>|``."""
    x = np.asarray(x, dtype=np.float64)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    lin = inner_product(reg.gradient(x), x_tilde - x)
    return abs(reg.value(x_tilde) - reg.value(x) - lin)


def modulus_total_nonlinearity(reg, x, t, n_samples, rng):
    """Monte-Carlo estimate of ``inf {B(x~, x) : ||x~ - x|| = t}``.

    Minimum over ``n_samples`` random unit directions.  This is an upper
    bound on the true infimum, not a certificate.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    x = np.asarray(x, dtype=np.float64)
    best = np.inf
    for _ in range(n_samples):
        u = rng.unit_vector(x.shape)
        best = min(best, absolute_bregman(reg, x + t * u, x))
    return float(best)


def fit_slope(deltas, errors):
    """Least-squares slope of ``log(error)`` against ``log(delta)``."""
    return float(np.polyfit(np.log(deltas), np.log(errors), 1)[0])


@dataclass
class RateReport:
    deltas: np.ndarray
    alphas: np.ndarray
    errors: np.ndarray
    fitted_slope: float
    expected_slope: float
    tolerance: float
    measure: str = "bregman"

    def __post_init__(self):
        d = np.asarray(self.deltas)
        if np.any(d <= 0) or np.any(np.diff(d) >= 0):
            raise ValueError("deltas must be positive and strictly decreasing")

    @property
    def passed(self):
        return abs(self.fitted_slope - self.expected_slope) <= self.tolerance

    def to_csv(self, path):
        lines = ["delta,alpha,error"]
        lines += [f"{float(d)!r},{float(a)!r},{float(e)!r}"
                  for d, a, e in zip(self.deltas, self.alphas, self.errors)]
        lines.append(
            f"# fitted_slope={self.fitted_slope:.6f},expected={self.expected_slope},"
            f"tolerance={self.tolerance},measure={self.measure},"
            f"{'pass' if self.passed else 'fail'}"
        )
        Path(path).write_text("\n".join(lines) + "\n")


def _ill_conditioned(n, sigma_min, rng):
    u, _ = np.linalg.qr(rng.normal((n, n)))
    v, _ = np.linalg.qr(rng.normal((n, n)))
    sigma = np.logspace(0, np.log10(sigma_min), n)
    return (u * sigma) @ v.T


class QuadraticFamily:
    """Dense ill-conditioned ``F`` and ``R(x) = ||x||**2``.

    Singular values are log-spaced in ``[sigma_min, 1]``; the ground truth
    is ``x_plus = F^T xi / 2`` so that ``R'(x_plus) = F^T xi``.
    """

    name = "quad"

    def __init__(self, n=40, sigma_min=1e-3, seed=0):
        rng = SeededRng(seed)
        self.operator = DenseOperator(_ill_conditioned(n, sigma_min, rng))
        self.regularizer = WeightedLq(q=2.0)
        self.xi = rng.normal(n)
        self.x_plus = self.operator.adjoint(self.xi) / 2
        self.y = self.operator.apply(self.x_plus)
        self.noise_direction = rng.unit_vector(n)

    def solve(self, y_delta, alpha):
        return tikhonov_dense_oracle(self.operator, y_delta, alpha)


class NonconvexFamily:
    """Dense ill-conditioned ``F`` with the tanh-perturbed l^q regularizer.

    ``phi_l(x) = x_l + c tanh(<b_l, x>)``.  The ground truth solves
    ``R'(x_plus) = F^T xi`` (Newton-type root finding), which is the source
    condition.  Regularized solutions are computed by full gradient steps
    (the ``simultaneous`` scheme, whose fixed points are exact stationary
    points), warm-started at the quadratic (``c = 0``) solution.
    """

    name = "nclq"

    def __init__(self, n=20, c=0.1, q=2.0, sigma_min=1e-3, seed=0, xi_scale=1.0,
                 min_iter=2000, max_iter=400_000, contraction_target=1e-9):
        rng = SeededRng(seed)
        self.operator = DenseOperator(_ill_conditioned(n, sigma_min, rng))
        a, b = random_tanh_features(n, n, seed + 1)
        self.regularizer = NonconvexLq(a, b, c=c, q=q)
        self.quadratic = NonconvexLq(a, b, c=0.0, q=q)
        self.xi = xi_scale * rng.normal(n)
        target = self.operator.adjoint(self.xi)
        start = target / 2
        sol = scipy.optimize.root(lambda x: self.regularizer.gradient(x) - target, start, tol=1e-13)
        residual = np.linalg.norm(self.regularizer.gradient(sol.x) - target)
        if residual > 1e-9 * (1 + np.linalg.norm(target)):
            raise RuntimeError(f"source-condition root finding failed: {sol.message}")
        self.x_plus = sol.x
        self.y = self.operator.apply(self.x_plus)
        self.noise_direction = rng.unit_vector(n)
        self.c, self.q = c, q
        self.min_iter, self.max_iter = min_iter, max_iter
        self.contraction_target = contraction_target
        self.last_trace = None

    def solve(self, y_delta, alpha):
        op = self.operator
        lip = np.linalg.norm(op.entries, 2) ** 2
        b_norm = np.linalg.norm(self.regularizer.b, 2)
        reg_lip = 2 * (1 + self.c * b_norm) ** 2 + 4 * self.c * b_norm
        step = 0.9 / (lip + alpha * reg_lip)
        # slowest mode contracts by (1 - step * 2 alpha (1 - c ||b||)^2) per iteration
        mu = 2 * alpha * max(1 - self.c * b_norm, 0.1) ** 2
        iters = int(np.clip(np.log(self.contraction_target) / np.log1p(-step * mu),
                            self.min_iter, self.max_iter))
        x0 = tikhonov_dense_oracle(op, y_delta, alpha) if self.q == 2 else None
        problem = NettProblem(op, y_delta, self.regularizer, alpha)
        res = nett_minimize(problem, SolveConfig(step_sizes=step, max_iter=iters, initial=x0,
                                                 scheme="simultaneous"))
        self.last_trace = res.objective
        return res.x


def _noisy_data(family, delta):
    return family.y + delta * family.noise_direction


def _measure(family, x, kind, q=2.0):
    if kind == "bregman":
        return absolute_bregman(family.regularizer, x, family.x_plus)
    if kind == "norm":
        return float(np.linalg.norm(x - family.x_plus))
    if kind == "norm_q":
        return float(np.linalg.norm(x - family.x_plus) ** q)
    raise ValueError(f"unknown error measure {kind!r}")


EXPECTED_SLOPES = {"bregman": 1.0, "norm": 0.5, "norm_q": 1.0}


def rate_experiment(family, rule, deltas, error_measure="bregman", tolerance=0.2, expected=None):
    """Solve for each noise level, measure the error against ``x_plus`` and
    fit the log-log slope."""
    deltas = np.asarray(deltas, dtype=np.float64)
    alphas, errors = [], []
    for delta in deltas:
        alpha = choose_alpha(rule, delta)
        try:
            x = family.solve(_noisy_data(family, delta), alpha)
        except Exception as exc:
            raise RuntimeError(f"solve failed at delta={delta:g}: {exc}") from exc
        alphas.append(alpha)
        errors.append(_measure(family, x, error_measure))
    errors = np.array(errors)
    return RateReport(
        deltas=deltas,
        alphas=np.array(alphas),
        errors=errors,
        fitted_slope=fit_slope(deltas, errors),
        expected_slope=EXPECTED_SLOPES[error_measure] if expected is None else expected,
        tolerance=tolerance,
        measure=error_measure,
    )


@dataclass
class ConvergenceReport:
    deltas: np.ndarray
    alphas: np.ndarray
    errors: np.ndarray
    reg_gaps: np.ndarray
    notes: list = field(default_factory=list)

    @property
    def eventually_decreasing(self):
        return bool(np.all(np.diff(self.errors[1:]) < 0))

    @property
    def contracted(self):
        return bool(self.errors[-1] < self.errors[0] / 5)


def convergence_experiment(family, rule, deltas):
    """Norm errors and regularizer gaps ``|R(x) - R(x_plus)|`` along a
    decreasing noise sequence with an admissible parameter rule."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(np.diff(deltas) >= 0):
        raise ValueError("deltas must be strictly decreasing")
    alphas, errors, gaps = [], [], []
    r_plus = family.regularizer.value(family.x_plus)
    for delta in deltas:
        alpha = choose_alpha(rule, delta)
        x = family.solve(_noisy_data(family, delta), alpha)
        alphas.append(alpha)
        errors.append(float(np.linalg.norm(x - family.x_plus)))
        gaps.append(abs(family.regularizer.value(x) - r_plus))
    return ConvergenceReport(deltas, np.array(alphas), np.array(errors), np.array(gaps))
