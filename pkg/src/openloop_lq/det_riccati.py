"""Deterministic-coefficient solver: backward Riccati ODEs for P1 and P2.

For deterministic coefficients the optimal open-loop control is a linear
function of the state mean, u(t) = -K(t) E[x(t)], where

    K       = Ups^{-1} (B'P2 + D'P1 C),     Ups = R + D'P1 D,
    dP1/dt  = -(Q + P1 A + A'P1 + C'P1 C),                       P1(T) = PT,
    dP2/dt  = -(P2 At + At'P2 + Qt - P2 B Ups^{-1} B'P2),        P2(T) = PT,

with At = A - B Ups^{-1} D'P1 C and Qt = Q + C'P1 C - C'P1 D Ups^{-1} D'P1 C.
Both ODEs are integrated backward with classical RK4 on the problem grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, PositivityError
from .problem_model import (
    CoefficientSet,
    ControlTrajectory,
    ProblemSpec,
    TimeGrid,
    coefficients_at,
    validate,
)

TOL_POS = 1e-12


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def _stage_coefficients(spec: ProblemSpec, k: int) -> tuple[CoefficientSet, CoefficientSet, CoefficientSet]:
    """Coefficients at (t_k, midpoint, t_{k+1}^-) for the step [t_k, t_{k+1}]."""
    g = spec.grid
    t0, t1 = g.t(k), g.t(k + 1)
    return (coefficients_at(spec, t0),
            coefficients_at(spec, 0.5 * (t0 + t1)),
            coefficients_at(spec, t1, from_left=True))


def _p1_rhs(c: CoefficientSet, P: np.ndarray) -> np.ndarray:
    return -(c.Q + P @ c.A + c.A.T @ P + c.C.T @ P @ c.C)


def _check_finite(X, what, k):
    if not np.all(np.isfinite(X)):
        raise DivergenceError(f"non-finite {what} at time index {k}", location=k)


def solve_p1(spec: ProblemSpec) -> np.ndarray:
    """Backward RK4 for P1; returns an array of shape (N+1, n, n)."""
    validate(spec, "det").raise_if_invalid()
    g = spec.grid
    h = g.dt
    P = np.empty((g.N + 1, spec.n, spec.n))
    P[g.N] = spec.terminal_weight()
    for k in range(g.N - 1, -1, -1):
        c0, cm, c1 = _stage_coefficients(spec, k)
        Y = P[k + 1]
        k1 = _p1_rhs(c1, Y)
        k2 = _p1_rhs(cm, Y - 0.5 * h * k1)
        k3 = _p1_rhs(cm, Y - 0.5 * h * k2)
        k4 = _p1_rhs(c0, Y - h * k3)
        P[k] = _sym(Y - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        _check_finite(P[k], "P1", k)
    return P


@dataclass(frozen=True)
class DetRiccatiSolution:
    """Grid values of P1, P2, Ups = R + D'P1 D, gain K and the derived At, Qt."""

    grid: TimeGrid
    P1: np.ndarray
    P2: np.ndarray
    Ups: np.ndarray
    K: np.ndarray
    A_tilde: np.ndarray
    Q_tilde: np.ndarray


def _ups(c: CoefficientSet, P1: np.ndarray) -> np.ndarray:
    return _sym(c.R + c.D.T @ P1 @ c.D)


def _tilde(c: CoefficientSet, P1: np.ndarray):
    U = _ups(c, P1)
    DPC = c.D.T @ P1 @ c.C
    At = c.A - c.B @ np.linalg.solve(U, DPC)
    Qt = c.Q + c.C.T @ P1 @ c.C - DPC.T @ np.linalg.solve(U, DPC)
    return U, At, _sym(Qt)


def _p2_rhs(c: CoefficientSet, P1: np.ndarray, P2: np.ndarray) -> np.ndarray:
    U, At, Qt = _tilde(c, P1)
    BP = c.B.T @ P2
    return -(P2 @ At + At.T @ P2 + Qt - BP.T @ np.linalg.solve(U, BP))


def _p1_midpoints(spec: ProblemSpec, P1: np.ndarray) -> np.ndarray:
    """Cubic Hermite values of P1 at step midpoints (fourth-order accurate)."""
    g = spec.grid
    mid = np.empty((g.N,) + P1.shape[1:])
    for k in range(g.N):
        c0, _, c1 = _stage_coefficients(spec, k)
        f0 = _p1_rhs(c0, P1[k])
        f1 = _p1_rhs(c1, P1[k + 1])
        mid[k] = _sym(0.5 * (P1[k] + P1[k + 1]) + g.dt / 8.0 * (f0 - f1))
    return mid


def _min_eig(X: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(_sym(X)))) if X.size else np.inf


def positivity_gate(spec: ProblemSpec, P1: np.ndarray, P1_mid: np.ndarray | None = None,
                    tol: float = TOL_POS) -> None:
    """Raise PositivityError at the earliest time where R + D'P1 D is not > tol."""
    g = spec.grid
    if P1_mid is None:
        P1_mid = _p1_midpoints(spec, P1)
    bad = []
    for k in range(g.N + 1):
        c = coefficients_at(spec, g.t(k))
        checks = [(g.t(k), c, P1[k])]
        if k > 0:
            checks.insert(0, (g.t(k), coefficients_at(spec, g.t(k), from_left=True), P1[k]))
        if k < g.N:
            tm = 0.5 * (g.t(k) + g.t(k + 1))
            checks.append((tm, coefficients_at(spec, tm), P1_mid[k]))
        for t, ck, Pk in checks:
            lam = _min_eig(_ups(ck, Pk))
            if not lam > tol:
                bad.append((t, lam))
    if bad:
        bad.sort()
        t0, lam0 = bad[0]
        raise PositivityError(
            f"R + D'P D is not positive definite at t={t0:.6g} (min eigenvalue {lam0:.3g}); "
            "the problem is not uniquely solvable", t=t0, min_eig=lam0, times=[b[0] for b in bad])


def solve_p2(spec: ProblemSpec, P1: np.ndarray) -> DetRiccatiSolution:
    """Backward RK4 for P2 given the P1 trajectory; returns the full solution object."""
    g = spec.grid
    h = g.dt
    P1_mid = _p1_midpoints(spec, P1)
    positivity_gate(spec, P1, P1_mid)

    P2 = np.empty_like(P1)
    P2[g.N] = spec.terminal_weight()
    for k in range(g.N - 1, -1, -1):
        c0, cm, c1 = _stage_coefficients(spec, k)
        Y = P2[k + 1]
        k1 = _p2_rhs(c1, P1[k + 1], Y)
        k2 = _p2_rhs(cm, P1_mid[k], Y - 0.5 * h * k1)
        k3 = _p2_rhs(cm, P1_mid[k], Y - 0.5 * h * k2)
        k4 = _p2_rhs(c0, P1[k], Y - h * k3)
        P2[k] = _sym(Y - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        _check_finite(P2[k], "P2", k)

    m = spec.m
    Ups = np.empty((g.N + 1, m, m))
    K = np.empty((g.N + 1, m, spec.n))
    At = np.empty_like(P1)
    Qt = np.empty_like(P1)
    for k in range(g.N + 1):
        c = coefficients_at(spec, g.t(k))
        Ups[k], At[k], Qt[k] = _tilde(c, P1[k])
        K[k] = np.linalg.solve(Ups[k], c.B.T @ P2[k] + c.D.T @ P1[k] @ c.C)
    return DetRiccatiSolution(g, P1, P2, Ups, K, At, Qt)


def solve_det(spec: ProblemSpec) -> DetRiccatiSolution:
    return solve_p2(spec, solve_p1(spec))


def _interp(X: np.ndarray, k: int, s: float) -> np.ndarray:
    return X[k] if s == 0.0 else (1.0 - s) * X[k] + s * X[k + 1]


def synthesize_control_det(spec: ProblemSpec, sol: DetRiccatiSolution) -> tuple[ControlTrajectory, np.ndarray]:
    """Optimal control u_k = -K_k E[x(t_k)] and the mean trajectory (N+1, n).

    The mean follows dEx = (A - B K) Ex dt, stepped with RK4 and K linearly
    interpolated inside each step.
    """
    g = spec.grid
    h = g.dt
    mean = np.empty((g.N + 1, spec.n))
    mean[0] = spec.x0_mean
    for k in range(g.N):
        c0, cm, c1 = _stage_coefficients(spec, k)
        F0 = c0.A - c0.B @ sol.K[k]
        Fm = cm.A - cm.B @ _interp(sol.K, k, 0.5)
        F1 = c1.A - c1.B @ sol.K[k + 1]
        y = mean[k]
        k1 = F0 @ y
        k2 = Fm @ (y + 0.5 * h * k1)
        k3 = Fm @ (y + 0.5 * h * k2)
        k4 = F1 @ (y + h * k3)
        mean[k + 1] = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    _check_finite(mean, "mean state", None)
    u = -np.einsum("kij,kj->ki", sol.K[:-1], mean[:-1])
    return ControlTrajectory(g, u), mean


def optimal_cost_det(spec: ProblemSpec, sol: DetRiccatiSolution) -> float:
    """tr(P1(0) Cov x0) + E[x0]' P2(0) E[x0]."""
    m0 = spec.x0_mean
    return float(np.trace(sol.P1[0] @ spec.x0_cov) + m0 @ sol.P2[0] @ m0)


def costate_det(sol: DetRiccatiSolution, x: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """p(t_k) = P1_k (x_k - Ex_k) + P2_k Ex_k.

    ``x`` has shape (N+1, n) for one path or (N+1, paths, n); ``mean`` is (N+1, n).
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    P1, P2 = sol.P1, sol.P2
    if x.ndim == 3:
        mean_b = mean[:, None, :]
        return np.einsum("kij,kpj->kpi", P1, x - mean_b) + np.einsum("kij,kj->ki", P2, mean)[:, None, :]
    return np.einsum("kij,kj->ki", P1, x - mean) + np.einsum("kij,kj->ki", P2, mean)


@dataclass(frozen=True)
class ReductionReport:
    """P + F against the independently integrated P2."""

    P: np.ndarray
    F: np.ndarray
    M0: np.ndarray
    Ups: np.ndarray
    P2: np.ndarray
    max_deviation: float


def _pf_rhs(c: CoefficientSet, P: np.ndarray, F: np.ndarray):
    U = _ups(c, P)
    M0 = c.B.T @ (P + F) + c.D.T @ P @ c.C
    dP = _p1_rhs(c, P)
    dF = -F @ c.A - c.A.T @ F + M0.T @ np.linalg.solve(U, M0)
    return dP, dF


def remark2_reduce(spec: ProblemSpec, sol: DetRiccatiSolution | None = None) -> ReductionReport:
    """Integrate (P, F) jointly with M(t,0) = B'(P+F) + D'P C and compare P+F to P2.

    F(t) = -int_t^T M(t,s-t)' Ups_s^{-1} M(t,s-t) ds solves
    dF/dt = -F A - A'F + M(t,0)' Ups^{-1} M(t,0), F(T) = 0.
    """
    if sol is None:
        sol = solve_det(spec)
    g = spec.grid
    h = g.dt
    n = spec.n
    P = np.empty((g.N + 1, n, n))
    F = np.empty_like(P)
    P[g.N] = spec.terminal_weight()
    F[g.N] = 0.0
    for k in range(g.N - 1, -1, -1):
        c0, cm, c1 = _stage_coefficients(spec, k)
        Yp, Yf = P[k + 1], F[k + 1]
        a1, b1 = _pf_rhs(c1, Yp, Yf)
        a2, b2 = _pf_rhs(cm, Yp - 0.5 * h * a1, Yf - 0.5 * h * b1)
        a3, b3 = _pf_rhs(cm, Yp - 0.5 * h * a2, Yf - 0.5 * h * b2)
        a4, b4 = _pf_rhs(c0, Yp - h * a3, Yf - h * b3)
        P[k] = _sym(Yp - h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4))
        F[k] = _sym(Yf - h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4))
        _check_finite(F[k], "F", k)
    M0 = np.empty((g.N + 1, spec.m, n))
    Ups = np.empty((g.N + 1, spec.m, spec.m))
    for k in range(g.N + 1):
        c = coefficients_at(spec, g.t(k))
        Ups[k] = _ups(c, P[k])
        M0[k] = c.B.T @ (P[k] + F[k]) + c.D.T @ P[k] @ c.C
    dev = float(np.max(np.linalg.norm(P + F - sol.P2, ord=2, axis=(1, 2))))
    return ReductionReport(P, F, M0, Ups, sol.P2, dev)
