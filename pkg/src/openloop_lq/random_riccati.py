"""Coupled stochastic Riccati-type equations on the recombining lattice.

Unknowns, all backward in time on lattice nodes (k, j):

* (P, Pbar): the matrix BSDE
      dP = -[Q + PA + A'P + C'PC + Pbar C + C'Pbar] dt + Pbar dw,  P(T) = PT;
* for every terminal index i, the family M^(i)_k = M(t_k, t_i - t_k) with
      dM = -[M A + Mbar C] dt + Mbar dw  on [0, t_i],
  started from M^(i)_i = M0_i;
* M0_k = M(t_k, 0) = B'P + D'Pbar + D'PC - int_t^T E[M B + Mbar D]' Ups^{-1} M dtheta;
* Ups_k = E[R + D'P D] (deterministic).

Each BSDE step takes the conditional expectation first and then applies the
generator (explicit Euler), with the martingale coefficient read off the two
children.  The theta-integral in M0 is a Riemann sum over i = k+1..N.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError, PositivityError, SpecError
from .filtration_tree import (
    PATH_CAP,
    LatticeCoefficients,
    PathEnsemble,
    RecombiningTree,
    make_path_ensemble,
)
from .problem_model import ControlTrajectory, ProblemSpec, validate

TOL_POS = 1e-12


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


def _T(X):
    return np.swapaxes(X, -1, -2)


def _check(X, what, k):
    if not np.all(np.isfinite(X)):
        raise DivergenceError(f"non-finite {what} at lattice level {k}", location=k)


@dataclass(frozen=True)
class StochasticRiccatiSolution:
    """Lattice fields.  ``P[k]``/``Pbar[k]`` are (k+1, n, n); ``M[k]`` is
    (N-k+1, k+1, m, n) holding M^(i)_k for i = k..N (so ``M[k][0]`` is M0_k);
    ``Ups`` is (N+1, m, m)."""

    tree: RecombiningTree
    coeffs: LatticeCoefficients
    P: list
    Pbar: list
    M: list
    Ups: np.ndarray

    @property
    def grid(self):
        return self.tree.grid

    @property
    def N(self) -> int:
        return self.tree.N

    def M0(self, k: int) -> np.ndarray:
        return self.M[k][0]

    def M_family(self, k: int, i: int) -> np.ndarray:
        """M(t_k, t_i - t_k) at level-k nodes, i >= k."""
        return self.M[k][i - k]

    def Mbar(self, k: int, i: int) -> np.ndarray:
        """Martingale coefficient of M^(i) over step k -> k+1 (requires i > k)."""
        if not k < i <= self.N:
            raise IndexError("Mbar(k, i) needs k < i <= N")
        return self.tree.martingale(self.M[k + 1][i - k - 1])


def solve_P(spec: ProblemSpec, tree: RecombiningTree, coeffs: LatticeCoefficients | None = None):
    """Backward lattice recursion for (P, Pbar).

    At the leaves Pbar is the two-point martingale coefficient of PT(w) over a
    virtual extra step, which vanishes when PT is not modulated.
    """
    lc = coeffs if coeffs is not None else tree.coefficients(spec)
    N, dt = tree.N, tree.grid.dt
    P = [None] * (N + 1)
    Pbar = [None] * (N + 1)
    P[N] = _sym(lc.PT)
    wN = tree.w(N)
    prov = spec.providers["PT"]
    Pbar[N] = (prov.evaluate(spec.T, wN + tree.sqdt, spec.T)
               - prov.evaluate(spec.T, wN - tree.sqdt, spec.T)) / (2.0 * tree.sqdt)
    for k in range(N - 1, -1, -1):
        E = tree.expect(P[k + 1])
        Z = tree.martingale(P[k + 1])
        A, C, Q = lc.A[k], lc.C[k], lc.Q[k]
        ZC = Z @ C
        gen = Q + E @ A + _T(A) @ E + _T(C) @ E @ C + ZC + _T(ZC)
        P[k] = _sym(E + dt * gen)
        Pbar[k] = Z
        _check(P[k], "P", k)
    return P, Pbar


def _ups_levels(tree: RecombiningTree, lc: LatticeCoefficients, P: list) -> np.ndarray:
    Ups = []
    for k in range(tree.N + 1):
        D = lc.D[k]
        Ups.append(_sym(tree.mean(k, lc.R[k] + _T(D) @ P[k] @ D)))
    return np.array(Ups)


def upsilon_gate(tree: RecombiningTree, Ups: np.ndarray, tol: float = TOL_POS) -> None:
    """Raise PositivityError naming the earliest t_k with min-eig(Ups_k) <= tol."""
    lam = np.array([np.min(np.linalg.eigvalsh(U)) for U in Ups])
    bad = np.flatnonzero(~(lam > tol))
    if bad.size:
        k = int(bad[0])
        t = tree.grid.t(k)
        raise PositivityError(
            f"E[R + D'P D] is not positive definite at t={t:.6g} (min eigenvalue {lam[k]:.3g}); "
            "the problem is not uniquely solvable", t=t, min_eig=float(lam[k]),
            times=[tree.grid.t(int(b)) for b in bad])


def solve_M_family(spec: ProblemSpec, tree: RecombiningTree, P: list, Pbar: list,
                   coeffs: LatticeCoefficients | None = None):
    """Backward sweep for the M-family and M0; returns (M, Ups)."""
    lc = coeffs if coeffs is not None else tree.coefficients(spec)
    N, dt = tree.N, tree.grid.dt
    Ups = _ups_levels(tree, lc, P)
    upsilon_gate(tree, Ups)
    Ups_inv = np.linalg.inv(Ups)

    def source(k):
        B, C, D = lc.B[k], lc.C[k], lc.D[k]
        return _T(B) @ P[k] + _T(D) @ Pbar[k] + _T(D) @ P[k] @ C

    M = [None] * (N + 1)
    M[N] = source(N)[None]
    for k in range(N - 1, -1, -1):
        child = M[k + 1]                        # families i = k+1..N at level k+1
        E = tree.expect(child, axis=1)          # (N-k, k+1, m, n)
        Z = tree.martingale(child, axis=1)
        A, B, C, D = lc.A[k], lc.B[k], lc.C[k], lc.D[k]
        Mk = E + dt * (E @ A + Z @ C)
        G = np.tensordot(tree.prob(k), Mk @ B + Z @ D, axes=(0, 1))   # (N-k, m, m)
        W = _T(G) @ Ups_inv[k + 1:]                                   # (N-k, m, m)
        integral = dt * np.einsum("iab,ijbc->jac", W, Mk)
        M0 = source(k) - integral
        M[k] = np.concatenate([M0[None], Mk], axis=0)
        _check(M[k], "M", k)
    return M, Ups


def solve_random(spec: ProblemSpec, tree: RecombiningTree | None = None) -> StochasticRiccatiSolution:
    """Full lattice solution for ``spec`` on its own grid."""
    rep = validate(spec, "random")
    rep.raise_if_invalid()
    tree = tree or RecombiningTree(spec.grid)
    lc = tree.coefficients(spec)
    P, Pbar = solve_P(spec, tree, lc)
    M, Ups = solve_M_family(spec, tree, P, Pbar, lc)
    return StochasticRiccatiSolution(tree, lc, P, Pbar, M, Ups)


def synthesize_control_random(spec: ProblemSpec, sol: StochasticRiccatiSolution,
                              path_cap: int = PATH_CAP,
                              ensemble: PathEnsemble | None = None) -> tuple[ControlTrajectory, PathEnsemble]:
    """Forward sweep u_k = -Ups_k^{-1} E[M0_k x_k] on the full path tree.

    Every path is advanced with the same u_k, so the control is deterministic.
    Returns the control and the ensemble carrying the resulting states.
    """
    if np.any(spec.x0_cov != 0.0):
        raise SpecError("random-coefficient synthesis requires a deterministic x0")
    ens = ensemble if ensemble is not None else make_path_ensemble(spec, path_cap, sol.tree)
    N, dt = sol.N, sol.grid.dt
    x = np.empty((N + 1, ens.paths, spec.n))
    x[0] = spec.x0_mean
    u = np.zeros((N, spec.m))
    c = ens.coeffs
    for k in range(N):
        M0 = sol.M0(k)[ens.up[k]]                       # (paths, m, n)
        EMx = np.einsum("pij,pj->i", M0, x[k]) / ens.paths
        u[k] = -np.linalg.solve(sol.Ups[k], EMx)
        drift = np.einsum("pij,pj->pi", c["A"][k], x[k]) + c["B"][k] @ u[k]
        diff = np.einsum("pij,pj->pi", c["C"][k], x[k]) + c["D"][k] @ u[k]
        x[k + 1] = x[k] + drift * dt + diff * ens.dw[k][:, None]
    ctrl = ControlTrajectory(sol.grid, u)
    return ctrl, replace(ens, states=x, control=ctrl)


def optimal_cost_random(spec: ProblemSpec, sol: StochasticRiccatiSolution) -> float:
    """x0'P(0)x0 - sum_{i<N} dt (M(0,t_i) x0)' Ups_i^{-1} (M(0,t_i) x0)."""
    x0 = spec.x0_mean
    dt = sol.grid.dt
    Mx = sol.M[0][:, 0] @ x0                 # (N+1, m): families i = 0..N at the root
    quad = sum(Mx[i] @ np.linalg.solve(sol.Ups[i], Mx[i]) for i in range(sol.N))
    return float(x0 @ sol.P[0][0] @ x0 - dt * quad)


def expected_M0x(sol: StochasticRiccatiSolution, ens: PathEnsemble) -> np.ndarray:
    """E[M0_k x_k] for k = 0..N-1 under the states carried by ``ens``; shape (N, m)."""
    x = ens.states
    return np.array([np.einsum("pij,pj->i", sol.M0(k)[ens.up[k]], x[k]) / ens.paths
                     for k in range(sol.N)])


def costate_random(spec: ProblemSpec, sol: StochasticRiccatiSolution, ens: PathEnsemble) -> np.ndarray:
    """p_k = P x - sum_{i=k+1}^N dt M^(i)' Ups_i^{-1} E[M^(i) x] on every path; (N+1, paths, n)."""
    x = ens.states
    N, dt = sol.N, sol.grid.dt
    p = np.empty_like(x)
    for k in range(N + 1):
        idx = ens.up[k]
        p[k] = np.einsum("pij,pj->pi", sol.P[k][idx], x[k])
        if k == N:
            continue
        fam = sol.M[k][1:][:, idx]                           # (N-k, paths, m, n)
        EMx = np.einsum("ipab,pb->ia", fam, x[k]) / ens.paths
        V = np.linalg.solve(sol.Ups[k + 1:], EMx[..., None])[..., 0]   # (N-k, m)
        p[k] -= dt * np.einsum("ipab,ia->pb", fam, V)
    return p
