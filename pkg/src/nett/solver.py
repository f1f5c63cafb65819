"""Incremental gradient descent for the NETT functional.

Minimizes ``T(x) = 0.5 * ||F(x) - y||**2 + alpha * R(x)`` by alternating a
gradient step on the data term with a (sub)gradient step on the
regularizer::

    xbar_i = x_{i-1} - s_i * F'(x_{i-1})^* (F(x_{i-1}) - y)
    x_i    = xbar_i  - s_i * alpha * grad R(xbar_i)
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

__all__ = [
    "NettProblem",
    "SolveConfig",
    "SolveResult",
    "AlphaRule",
    "SolverDiverged",
    "nett_minimize",
    "tikhonov_dense_oracle",
    "choose_alpha",
    "write_trace_csv",
]


class SolverDiverged(RuntimeError):
    pass


@dataclass
class NettProblem:
    """``operator``, noisy ``data``, ``regularizer`` and weight ``alpha``."""

    operator: object
    data: np.ndarray
    regularizer: object
    alpha: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.data.shape != tuple(self.operator.range_shape):
            raise ValueError(
                f"data shape {self.data.shape} does not match operator range {self.operator.range_shape}"
            )

    def data_term(self, x):
        return _half_norm_sq(self.operator, self.operator.apply(x) - self.data)

    def objective(self, x):
        return self.data_term(x) + self.alpha * self.regularizer.value(x)


@dataclass
class SolveConfig:
    """Step sizes (a constant or one per iteration), iteration budget,
    initial iterate (zero by default) and snapshot schedule.

    ``scheme='incremental'`` is the two-step iteration above.  With a
    constant step its fixed point is biased by a term of order ``s * alpha``
    (for ``R = ||x||**2`` it is the minimizer for ``alpha / (1 - 2 s alpha)``).
    ``scheme='simultaneous'`` takes one gradient step on the whole functional,
    ``x_i = x_{i-1} - s_i (F'^*(F x_{i-1} - y) + alpha grad R(x_{i-1}))``,
    whose fixed points are exactly the stationary points.
    """

    step_sizes: object = 1.0
    max_iter: int = 100
    initial: np.ndarray = None
    record_every: int = 0
    snapshots: tuple = ()
    scheme: str = "incremental"

    def __post_init__(self):
        if self.scheme not in ("incremental", "simultaneous"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        steps = np.atleast_1d(np.asarray(self.step_sizes, dtype=np.float64))
        if not np.all(steps > 0):
            raise ValueError("step sizes must be positive")
        if steps.size > 1 and steps.size < self.max_iter:
            raise ValueError("need one step size per iteration")

    def step(self, i):
        s = np.atleast_1d(np.asarray(self.step_sizes, dtype=np.float64))
        return float(s[0] if s.size == 1 else s[i - 1])


@dataclass
class SolveResult:
    x: np.ndarray
    data_term: np.ndarray
    reg_term: np.ndarray
    snapshots: dict = field(default_factory=dict)

    @property
    def objective(self):
        return self.data_term + self.reg_term


def _half_norm_sq(op, r):
    # operators with a weighted data space supply their own pairing
    inner = getattr(op, "data_inner", None)
    if inner is not None:
        return 0.5 * inner(r, r)
    return 0.5 * float(np.sum(r * r))


def nett_minimize(problem, cfg):
    """Run the two-step iteration for exactly ``cfg.max_iter`` iterations.

    The trace entry ``i - 1`` holds data term and ``alpha * R`` of ``x_i``.
    Snapshots are stored for iterations listed in ``cfg.snapshots`` and every
    ``cfg.record_every`` iterations.
    """
    op, reg, alpha, y = problem.operator, problem.regularizer, problem.alpha, problem.data
    shape = tuple(op.domain_shape)
    if cfg.initial is None:
        x = np.zeros(shape)
    else:
        x = np.array(cfg.initial, dtype=np.float64)
        if x.shape != shape:
            raise ValueError(f"initial iterate shape {x.shape} does not match {shape}")
    wanted = set(int(k) for k in cfg.snapshots)
    data_trace = np.empty(cfg.max_iter)
    reg_trace = np.empty(cfg.max_iter)
    snaps = {}
    if 0 in wanted:
        snaps[0] = x.copy()
    residual = op.apply(x) - y
    # overflow is reported as divergence below rather than as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, cfg.max_iter + 1):
            s = cfg.step(i)
            step_data = op.derivative_adjoint(x, residual)
            if not alpha:
                x = x - s * step_data
            elif cfg.scheme == "simultaneous":
                x = x - s * (step_data + alpha * reg.gradient(x))
            else:
                xbar = x - s * step_data
                x = xbar - (s * alpha) * reg.gradient(xbar)
            if not np.all(np.isfinite(x)):
                raise SolverDiverged(f"non-finite iterate at iteration {i}")
            residual = op.apply(x) - y
            data_trace[i - 1] = _half_norm_sq(op, residual)
            reg_trace[i - 1] = alpha * reg.value(x) if alpha else 0.0
            if not (np.isfinite(data_trace[i - 1]) and np.isfinite(reg_trace[i - 1])):
                raise SolverDiverged(f"objective overflowed at iteration {i}")
            if i in wanted or (cfg.record_every and i % cfg.record_every == 0):
                snaps[i] = x.copy()
    return SolveResult(x, data_trace, reg_trace, snaps)


def write_trace_csv(path, result):
    lines = ["iter,data_term,reg_term,objective"]
    for i, (d, r) in enumerate(zip(result.data_term.tolist(), result.reg_term.tolist()), 1):
        lines.append(f"{i},{d!r},{r!r},{d + r!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def tikhonov_dense_oracle(a, y, alpha):
    """Solve ``(A^T A + 2 alpha I) x = A^T y`` by Cholesky factorization.

    This is the minimizer of ``0.5 ||Ax - y||**2 + alpha ||x||**2``.
    """
    mat = getattr(a, "entries", a)
    mat = np.asarray(mat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    normal = mat.T @ mat + 2 * alpha * np.eye(mat.shape[1])
    try:
        factor = scipy.linalg.cho_factor(normal)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Tikhonov normal matrix is singular") from exc
    return scipy.linalg.cho_solve(factor, mat.T @ y)


@dataclass(frozen=True)
class AlphaRule:
    """Regularization parameter choice.

    ``proportional_delta``: ``alpha = c * delta``.
    ``rate_matched``: ``alpha = c * delta / rate(tau * delta)``.
    """

    kind: str = "proportional_delta"
    c: float = 1.0
    rate_function: object = None
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in ("proportional_delta", "rate_matched"):
            raise ValueError(f"unknown rule {self.kind!r}")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.kind == "rate_matched" and self.rate_function is None:
            raise ValueError("rate_matched needs a rate function")


def choose_alpha(rule, delta):
    if not delta > 0:
        raise ValueError("delta must be positive")
    if rule.kind == "proportional_delta":
        return rule.c * delta
    return rule.c * delta / rule.rate_function(rule.tau * delta)
