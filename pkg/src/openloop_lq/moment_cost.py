"""Cost of a given deterministic control through first/second moment ODEs.

Under deterministic coefficients and deterministic u, m = E[x] and
S = E[x x'] satisfy closed linear ODEs, so the quadratic cost can be
evaluated without sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .problem_model import CoefficientSet, ControlTrajectory, ProblemSpec, TimeGrid, coefficients_at, validate


@dataclass(frozen=True)
class MomentTrajectory:
    grid: TimeGrid
    mean: np.ndarray     # (N+1, n)
    second: np.ndarray   # (N+1, n, n), E[x x']

    @property
    def cov(self) -> np.ndarray:
        return self.second - np.einsum("ki,kj->kij", self.mean, self.mean)


def _moment_rhs(c: CoefficientSet, u: np.ndarray, m: np.ndarray, S: np.ndarray):
    Bu = c.B @ u
    Du = c.D @ u
    Cm = c.C @ m
    dm = c.A @ m + Bu
    X = np.outer(Bu, m) + np.outer(Cm, Du)
    dS = c.A @ S + S @ c.A.T + X + X.T + c.C @ S @ c.C.T + np.outer(Du, Du)
    return dm, dS


def propagate_moments(spec: ProblemSpec, u: ControlTrajectory) -> MomentTrajectory:
    """RK4 propagation of (E[x], E[xx']) with u held constant on each step."""
    validate(spec, "det").raise_if_invalid()
    g = spec.grid
    h = g.dt
    n = spec.n
    mean = np.empty((g.N + 1, n))
    S = np.empty((g.N + 1, n, n))
    mean[0] = spec.x0_mean
    S[0] = spec.x0_cov + np.outer(spec.x0_mean, spec.x0_mean)
    for k in range(g.N):
        t0, t1 = g.t(k), g.t(k + 1)
        c0 = coefficients_at(spec, t0)
        cm = coefficients_at(spec, 0.5 * (t0 + t1))
        c1 = coefficients_at(spec, t1, from_left=True)
        uk = u.values[k]
        y, Y = mean[k], S[k]
        a1, b1 = _moment_rhs(c0, uk, y, Y)
        a2, b2 = _moment_rhs(cm, uk, y + 0.5 * h * a1, Y + 0.5 * h * b1)
        a3, b3 = _moment_rhs(cm, uk, y + 0.5 * h * a2, Y + 0.5 * h * b2)
        a4, b4 = _moment_rhs(c1, uk, y + h * a3, Y + h * b3)
        mean[k + 1] = y + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        Sn = Y + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
        S[k + 1] = 0.5 * (Sn + Sn.T)
        if not (np.all(np.isfinite(mean[k + 1])) and np.all(np.isfinite(S[k + 1]))):
            raise DivergenceError(f"non-finite moments at time index {k + 1}", location=k + 1)
    return MomentTrajectory(g, mean, S)


def evaluate_cost(spec: ProblemSpec, u: ControlTrajectory, moments: MomentTrajectory | None = None) -> float:
    """Cost of u: per-step trapezoid rule for tr(QS) and u'Ru, plus tr(PT S(T)).

    Each step uses the coefficient values at t_k and at t_{k+1} from the left,
    so a piecewise-constant control contributes exactly dt * u'Ru per step
    when R is constant on the step.
    """
    if moments is None:
        moments = propagate_moments(spec, u)
    g = spec.grid
    S = moments.second
    total = 0.0
    for k in range(g.N):
        c0 = coefficients_at(spec, g.t(k))
        c1 = coefficients_at(spec, g.t(k + 1), from_left=True)
        uk = u.values[k]
        f0 = np.sum(c0.Q * S[k]) + uk @ c0.R @ uk
        f1 = np.sum(c1.Q * S[k + 1]) + uk @ c1.R @ uk
        total += 0.5 * g.dt * (f0 + f1)
    return float(total + np.sum(spec.terminal_weight() * S[g.N]))


def discrete_moment_cost(spec: ProblemSpec, u: ControlTrajectory) -> float:
    """Exact cost of the one-step scheme x+ = x + (Ax+Bu)dt + (Cx+Du)dW, Var dW = dt.

    Left-endpoint running cost, deterministic coefficients only.  This is the
    closed-form expectation that the enumerated path ensemble must reproduce.
    """
    validate(spec, "det").raise_if_invalid()
    g = spec.grid
    h = g.dt
    m = spec.x0_mean.copy()
    S = spec.x0_cov + np.outer(m, m)
    total = 0.0
    for k in range(g.N):
        c = coefficients_at(spec, g.t(k))
        uk = u.values[k]
        total += h * (np.sum(c.Q * S) + uk @ c.R @ uk)
        Phi = np.eye(spec.n) + h * c.A
        Gu = h * (c.B @ uk)
        Du = c.D @ uk
        X = np.outer(Phi @ m, Gu) + h * np.outer(c.C @ m, Du)
        S = Phi @ S @ Phi.T + X + X.T + np.outer(Gu, Gu) + h * (c.C @ S @ c.C.T + np.outer(Du, Du))
        m = Phi @ m + Gu
    return float(total + np.sum(spec.terminal_weight() * S))
