"""Independent checks: exact discrete QP, adjoint residuals, completion of squares, Monte Carlo.

The discrete problem is the enumerated path tree with the exact one-step
scheme; over deterministic controls it is a convex quadratic program, so its
minimizer is the ground truth the Riccati-based controls are measured against.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .det_riccati import optimal_cost_det, solve_det
from .errors import PositivityError, SizeError
from .filtration_tree import (
    PATH_CAP,
    PathEnsemble,
    RecombiningTree,
    build_path_ensemble,
    make_path_ensemble,
    simulate_states,
)
from .moment_cost import evaluate_cost, propagate_moments
from .problem_model import ControlTrajectory, ProblemSpec
from .random_riccati import StochasticRiccatiSolution, expected_M0x, optimal_cost_random, solve_random

QP_MAX_VARS = 256
TOL_POS = 1e-12


# ---------------------------------------------------------------------------
# ensemble cost and the QP
# ---------------------------------------------------------------------------


def _ensemble_costs(spec: ProblemSpec, ens: PathEnsemble, U: np.ndarray) -> np.ndarray:
    """Exact discrete costs for a batch of controls U of shape (batch, N, m)."""
    x = simulate_states(ens, spec.x0_mean, U)          # (K+1, batch, paths, n)
    dt = ens.grid.dt
    c = ens.coeffs
    run = np.zeros(U.shape[0])
    for k in range(ens.K):
        xQx = np.einsum("bpi,pij,bpj->b", x[k], c["Q"][k], x[k]) / ens.paths
        uRu = np.einsum("bi,pij,bj->b", U[:, k], c["R"][k], U[:, k]) / ens.paths
        run += dt * (xQx + uRu)
    term = np.einsum("bpi,pij,bpj->b", x[ens.K], ens.PT, x[ens.K]) / ens.paths
    return run + term


def ensemble_cost(spec: ProblemSpec, u: ControlTrajectory, ensemble: PathEnsemble | None = None,
                  path_cap: int = PATH_CAP) -> float:
    """E[ sum_k dt (x_k'Q x_k + u_k'R u_k) + x_N'PT x_N ] on the full path tree."""
    ens = ensemble if ensemble is not None else make_path_ensemble(spec, path_cap)
    return float(_ensemble_costs(spec, ens, u.values[None])[0])


def lattice_costs(spec: ProblemSpec, U: np.ndarray, tree: RecombiningTree | None = None) -> np.ndarray:
    """Exact discrete costs for controls U (batch, N, m) without enumerating paths.

    Under a deterministic control, the probability-weighted moments
    E[x_k; node j] and E[x_k x_k'; node j] move to the two children by the same
    one-step scheme as the path tree, so the cost is exact on the recombining
    lattice and only needs O(N^2) work per control.
    """
    U = np.asarray(U, dtype=float)
    tree = tree or RecombiningTree(spec.grid)
    lc = tree.coefficients(spec)
    N, dt, s, n = spec.N, spec.grid.dt, tree.sqdt, spec.n
    nb = U.shape[0]
    x0 = spec.x0_mean
    mu = np.broadcast_to(x0, (nb, 1, n)).copy()
    S = np.broadcast_to(np.outer(x0, x0), (nb, 1, n, n)).copy()
    prob = np.ones(1)
    J = np.zeros(nb)
    for k in range(N):
        A, B, C, D, Q, R = lc.A[k], lc.B[k], lc.C[k], lc.D[k], lc.Q[k], lc.R[k]
        u = U[:, k]
        J += dt * (np.einsum("jil,bjli->b", Q, S) + np.einsum("j,bi,jil,bl->b", prob, u, R, u))
        mu_next = np.zeros((nb, k + 2, n))
        S_next = np.zeros((nb, k + 2, n, n))
        for sign, offset in ((1.0, 1), (-1.0, 0)):
            F = np.eye(n) + dt * A + sign * s * C               # (j, n, n)
            Gu = np.einsum("jim,bm->bji", dt * B + sign * s * D, u)
            Fmu = np.einsum("jil,bjl->bji", F, mu)
            X = np.einsum("bji,bjk->bjik", Fmu, Gu)
            pGu = prob[None, :, None] * Gu
            mu_next[:, offset:offset + k + 1] += 0.5 * (Fmu + pGu)
            S_next[:, offset:offset + k + 1] += 0.5 * (
                F @ S @ np.swapaxes(F, -1, -2) + X + np.swapaxes(X, -1, -2)
                + np.einsum("bji,bjk->bjik", pGu, Gu))
        p_next = np.zeros(k + 2)
        p_next[1:] += 0.5 * prob
        p_next[:-1] += 0.5 * prob
        mu, S, prob = mu_next, S_next, p_next
    return J + np.einsum("jil,bjli->b", lc.PT, S)


@dataclass(frozen=True)
class QPResult:
    u: ControlTrajectory
    cost: float
    hessian_min_eig: float
    residual: float
    H: np.ndarray
    g: np.ndarray
    c: float


def qp_solve(spec: ProblemSpec, path_cap: int = PATH_CAP, ensemble: PathEnsemble | None = None,
             engine: str = "paths") -> QPResult:
    """Minimize the discrete cost over all deterministic controls.

    J(u) = 1/2 u'Hu + g'u + c is sampled at 0, e_a, 2e_a and e_a + e_b; these
    second differences are exact for a quadratic.  ``engine="lattice"`` samples
    J through :func:`lattice_costs`, which removes the path cap.
    """
    N, m = spec.N, spec.m
    nv = N * m
    if nv > QP_MAX_VARS:
        raise SizeError(f"QP has {nv} variables, cap is {QP_MAX_VARS}")
    if engine == "paths":
        ens = ensemble if ensemble is not None else make_path_ensemble(spec, path_cap)
        costs = lambda V: _ensemble_costs(spec, ens, V)
    elif engine == "lattice":
        tree = RecombiningTree(spec.grid)
        costs = lambda V: np.concatenate([lattice_costs(spec, b, tree)
                                          for b in np.array_split(V, max(1, len(V) // 512))])
    else:
        raise ValueError(f"unknown QP engine {engine!r}")
    eye = np.eye(nv)
    ia, ib = np.triu_indices(nv, 1)
    U = np.concatenate([np.zeros((1, nv)), eye, 2 * eye, eye[ia] + eye[ib]])
    J = costs(U.reshape(-1, N, m))
    c = J[0]
    Je, J2e, Jab = J[1:1 + nv], J[1 + nv:1 + 2 * nv], J[1 + 2 * nv:]
    H = np.empty((nv, nv))
    H[np.diag_indices(nv)] = J2e - 2 * Je + c
    off = Jab - Je[ia] - Je[ib] + c
    H[ia, ib] = off
    H[ib, ia] = off
    g = Je - c - 0.5 * np.diag(H)

    lam_min = float(np.min(np.linalg.eigvalsh(H)))
    scale = max(1.0, float(np.max(np.abs(H))))
    if not lam_min > TOL_POS * scale:
        raise PositivityError(f"QP Hessian is not positive definite (min eigenvalue {lam_min:.3g})",
                              min_eig=lam_min)
    try:
        z = la.cho_solve(la.cho_factor(H), -g)
    except la.LinAlgError:
        w, V = np.linalg.eigh(H)
        z = V @ ((V.T @ -g) / w)
    resid = float(np.linalg.norm(H @ z + g))
    u = ControlTrajectory(spec.grid, z.reshape(N, m))
    cost = float(costs(u.values[None])[0])
    return QPResult(u, cost, lam_min, resid, H, g, float(c))


# ---------------------------------------------------------------------------
# adjoint (costate) and the first-order condition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdjointSolution:
    """p is (N+1, paths, n), q is (N, paths, n); both constant on each prefix."""

    p: np.ndarray
    q: np.ndarray
    variant: str


def adjoint_solve(spec: ProblemSpec, ens: PathEnsemble, variant: str = "euler-bsde") -> AdjointSolution:
    """Backward costate on the path tree for the states carried by ``ens``.

    ``"euler-bsde"``:      p_k = E_k p_{k+1} + dt (A'E_k p_{k+1} + C'q_k + Q x_k), q_k the
                           martingale coefficient of p_{k+1}, p_N = PT x_N.
    ``"discrete-exact"``:  p_k = E_k lam_{k+1}, q_k likewise, where lam is the Euler
                           recursion above; with this pairing the stationarity residual
                           is exactly (1/(2 dt)) dJ/du_k.
    """
    if ens.states is None:
        raise ValueError("ensemble carries no states; build it with build_path_ensemble")
    x = ens.states
    K, dt = ens.K, ens.grid.dt
    c = ens.coeffs
    lam = np.empty_like(x)
    q = np.empty((K,) + x.shape[1:])
    Ecur = np.empty((K,) + x.shape[1:])
    lam[K] = np.einsum("pij,pj->pi", ens.PT, x[K])
    for k in range(K - 1, -1, -1):
        E = ens.conditional_expectation(lam[k + 1], k)
        q[k] = ens.martingale_coefficient(lam[k + 1], k)
        Ecur[k] = E
        At = np.swapaxes(c["A"][k], -1, -2)
        Ct = np.swapaxes(c["C"][k], -1, -2)
        lam[k] = E + dt * (np.einsum("pij,pj->pi", At, E) + np.einsum("pij,pj->pi", Ct, q[k])
                           + np.einsum("pij,pj->pi", c["Q"][k], x[k]))
    if variant == "euler-bsde":
        return AdjointSolution(lam, q, variant)
    if variant == "discrete-exact":
        p = np.concatenate([Ecur, lam[K:]], axis=0)
        return AdjointSolution(p, q, variant)
    raise ValueError(f"unknown adjoint variant {variant!r}")


def stationarity_residual(ens: PathEnsemble, u: ControlTrajectory, adj: AdjointSolution):
    """r_k = E[B'p_k + R u_k + D'q_k]; returns (r of shape (N, m), max_k |r_k|)."""
    c = ens.coeffs
    r = np.empty((ens.K, u.m))
    for k in range(ens.K):
        Bt = np.swapaxes(c["B"][k], -1, -2)
        Dt = np.swapaxes(c["D"][k], -1, -2)
        v = (np.einsum("pij,pj->pi", Bt, adj.p[k]) + c["R"][k] @ u.values[k]
             + np.einsum("pij,pj->pi", Dt, adj.q[k]))
        r[k] = v.mean(axis=0)
    return r, float(np.max(np.linalg.norm(r, axis=1)))


# ---------------------------------------------------------------------------
# completion of squares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SquaresAudit:
    J_u: float
    J_star: float
    square: float

    @property
    def residual(self) -> float:
        return self.J_u - self.J_star - self.square


def completion_of_squares_audit(spec: ProblemSpec, u: ControlTrajectory, method: str = "auto",
                                solution=None, path_cap: int = PATH_CAP) -> SquaresAudit:
    """Check J(u) = J* + int (u + Ups^{-1} E[M0 x^u])' Ups (...) dt for an arbitrary u.

    ``method="moments"`` (deterministic coefficients) uses the moment ODEs and a
    per-step trapezoid rule for the square term; ``"lattice"`` uses the path
    tree, the lattice solution and a left-endpoint sum.
    """
    if method == "auto":
        method = "moments" if spec.is_deterministic else "lattice"
    if method == "moments":
        sol = solution if solution is not None else solve_det(spec)
        mom = propagate_moments(spec, u)
        J_u = evaluate_cost(spec, u, mom)
        J_star = optimal_cost_det(spec, sol)
        m = mom.mean
        sq = 0.0
        for k in range(spec.N):
            d0 = u.values[k] + sol.K[k] @ m[k]
            d1 = u.values[k] + sol.K[k + 1] @ m[k + 1]
            sq += 0.5 * spec.grid.dt * (d0 @ sol.Ups[k] @ d0 + d1 @ sol.Ups[k + 1] @ d1)
        return SquaresAudit(J_u, J_star, float(sq))
    if method == "lattice":
        sol = solution if solution is not None else solve_random(spec)
        ens = build_path_ensemble(spec, u, path_cap)
        J_u = ensemble_cost(spec, u, ens)
        J_star = optimal_cost_random(spec, sol)
        EMx = expected_M0x(sol, ens)
        sq = 0.0
        for k in range(spec.N):
            d = u.values[k] + np.linalg.solve(sol.Ups[k], EMx[k])
            sq += spec.grid.dt * (d @ sol.Ups[k] @ d)
        return SquaresAudit(J_u, J_star, float(sq))
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloResult:
    estimate: float
    stderr: float
    num_paths: int


def _mc_block(spec: ProblemSpec, u: np.ndarray, seed: int, block: int, size: int,
              increments: str, quadrature: str) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))
    g = spec.grid
    dt, T = g.dt, g.T
    sq = np.sqrt(dt)
    if increments == "gaussian":
        dW = rng.standard_normal((g.N, size)) * sq
    elif increments == "rademacher":
        dW = (2.0 * rng.integers(0, 2, size=(g.N, size)) - 1.0) * sq
    else:
        raise ValueError(f"unknown increments {increments!r}")
    prov = spec.providers
    x = np.broadcast_to(spec.x0_mean, (size, spec.n)).copy()
    if np.any(spec.x0_cov != 0.0):
        ev, V = np.linalg.eigh(spec.x0_cov)
        x = x + rng.standard_normal((size, spec.n)) @ (V * np.sqrt(np.clip(ev, 0.0, None))).T
    w = np.zeros(size)
    cost = np.zeros(size)

    def coef(name, t, wv, from_left=False):
        p = prov[name]
        if p.is_deterministic:
            return p.evaluate(t, 0.0, T, from_left)
        return p.evaluate(t, wv, T, from_left)

    def mv(M, v):
        return v @ M.T if M.ndim == 2 else np.einsum("pij,pj->pi", M, v)

    def running(t, wv, xv, uk, from_left=False):
        Q, R = coef("Q", t, wv, from_left), coef("R", t, wv, from_left)
        return np.einsum("pi,pi->p", xv, mv(Q, xv)) + (R @ uk) @ uk

    for k in range(g.N):
        t = g.t(k)
        uk = u[k]
        f0 = running(t, w, x, uk)
        A, B, C, D = (coef(name, t, w) for name in "ABCD")
        drift = mv(A, x) + B @ uk
        diff = mv(C, x) + D @ uk
        x = x + drift * dt + diff * dW[k][:, None]
        w = w + dW[k]
        if quadrature == "left":
            cost += dt * f0
        else:
            cost += 0.5 * dt * (f0 + running(g.t(k + 1), w, x, uk, from_left=True))
    PT = coef("PT", T, w)
    return cost + np.einsum("pi,pi->p", x, mv(PT, x))


def monte_carlo_cost(spec: ProblemSpec, u: ControlTrajectory, num_paths: int = 100_000, seed: int = 0,
                     threads: int = 1, increments: str = "gaussian", quadrature: str = "trapezoid",
                     block_size: int = 8192) -> MonteCarloResult:
    """Euler-Maruyama estimate of the cost of a deterministic control.

    Paths are generated in fixed blocks, each with its own counter-based
    stream keyed by (seed, block), and reduced in block order, so the result
    does not depend on ``threads``.
    """
    if num_paths < 2:
        raise ValueError("num_paths must be at least 2")
    sizes = [block_size] * (num_paths // block_size)
    if num_paths % block_size:
        sizes.append(num_paths % block_size)
    jobs = [(spec, u.values, seed, b, s, increments, quadrature) for b, s in enumerate(sizes)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda a: _mc_block(*a), jobs))
    else:
        parts = [_mc_block(*a) for a in jobs]
    costs = np.concatenate(parts)
    est = float(costs.mean())
    se = float(costs.std(ddof=1) / np.sqrt(costs.size))
    return MonteCarloResult(est, se, costs.size)
