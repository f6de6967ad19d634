"""Discrete Brownian filtrations: recombining binomial lattice and exhaustive path tree.

Each step moves w by +-sqrt(dt) with probability 1/2.  Quantities that are
functions of (t_k, w(t_k)) live on the lattice nodes (k, j), j = number of
up-moves; state-dependent quantities need the full 2^K path tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import SizeError
from .problem_model import ControlTrajectory, ProblemSpec, TimeGrid, coefficients_at

PATH_CAP = 12
LATTICE_CAP = 512


def conditional_expectation(v_up, v_down):
    """E_k[V] for a value taking v_up / v_down on the two children."""
    return 0.5 * (np.asarray(v_up) + np.asarray(v_down))


def martingale_coefficient(v_up, v_down, dt: float):
    """Z with V = E_k[V] + Z * dw exactly on the two-point increment dw = +-sqrt(dt)."""
    return (np.asarray(v_up) - np.asarray(v_down)) / (2.0 * math.sqrt(dt))


@dataclass(frozen=True)
class LatticeCoefficients:
    """Coefficients at every lattice node; level k arrays have shape (k+1, rows, cols)."""

    A: list
    B: list
    C: list
    D: list
    Q: list
    R: list
    PT: np.ndarray   # (N+1, n, n) at the leaves


class RecombiningTree:
    """Binomial lattice on a TimeGrid: node (k, j) has w = (2j - k) sqrt(dt)."""

    def __init__(self, grid: TimeGrid):
        if grid.N > LATTICE_CAP:
            raise SizeError(f"lattice depth {grid.N} exceeds cap {LATTICE_CAP}")
        self.grid = grid
        self.sqdt = math.sqrt(grid.dt)
        self._prob = [np.array([math.comb(k, j) / 2**k for j in range(k + 1)]) for k in range(grid.N + 1)]

    @property
    def N(self) -> int:
        return self.grid.N

    def w(self, k: int) -> np.ndarray:
        return (2.0 * np.arange(k + 1) - k) * self.sqdt

    def prob(self, k: int) -> np.ndarray:
        return self._prob[k]

    def expect(self, v_next: np.ndarray, axis: int = 0) -> np.ndarray:
        """Level-k conditional expectations from level-(k+1) values along ``axis``."""
        v = np.moveaxis(np.asarray(v_next), axis, 0)
        return np.moveaxis(conditional_expectation(v[1:], v[:-1]), 0, axis)

    def martingale(self, v_next: np.ndarray, axis: int = 0) -> np.ndarray:
        v = np.moveaxis(np.asarray(v_next), axis, 0)
        return np.moveaxis(martingale_coefficient(v[1:], v[:-1], self.grid.dt), 0, axis)

    def mean(self, k: int, values: np.ndarray) -> np.ndarray:
        """Unconditional expectation of a level-k node functional (nodes on axis 0)."""
        return np.tensordot(self._prob[k], values, axes=(0, 0))

    def coefficients(self, spec: ProblemSpec) -> LatticeCoefficients:
        g = self.grid
        acc = {k: [] for k in "ABCDQR"}
        for k in range(g.N + 1):
            c = coefficients_at(spec, g.t(k), self.w(k))
            for name in "ABCDQR":
                acc[name].append(getattr(c, name))
        PT = spec.providers["PT"].evaluate(spec.T, self.w(g.N), spec.T)
        return LatticeCoefficients(PT=PT, **acc)


@dataclass(frozen=True)
class PathEnsemble:
    """All 2^K sign paths; path index bit (K-1-k) is the step-k move (1 = up).

    ``up`` and ``w`` have shape (K+1, paths); coefficient arrays have shape
    (K, paths, rows, cols) and are indexed from the lattice so that both
    filtration models see bit-identical coefficients.  ``states`` is
    (K+1, paths, n) once a control has been applied.
    """

    grid: TimeGrid
    K: int
    up: np.ndarray
    w: np.ndarray
    dw: np.ndarray
    coeffs: dict
    PT: np.ndarray
    states: np.ndarray | None = None
    control: ControlTrajectory | None = None

    @property
    def paths(self) -> int:
        return 1 << self.K

    @property
    def prob(self) -> float:
        return 1.0 / self.paths

    def prefix_ids(self, k: int) -> np.ndarray:
        return np.arange(self.paths) >> (self.K - k)

    def _children(self, v: np.ndarray, k: int):
        """(up, down) child values of every path's level-k prefix, broadcast to paths."""
        v = np.asarray(v)
        block = 1 << (self.K - k - 1)
        r = v.reshape((1 << k, 2, block) + v.shape[1:])
        down = np.repeat(r[:, 0, 0], 2 * block, axis=0)
        up = np.repeat(r[:, 1, 0], 2 * block, axis=0)
        return up, down

    def conditional_expectation(self, v_next: np.ndarray, k: int) -> np.ndarray:
        up, down = self._children(v_next, k)
        return conditional_expectation(up, down)

    def martingale_coefficient(self, v_next: np.ndarray, k: int) -> np.ndarray:
        up, down = self._children(v_next, k)
        return martingale_coefficient(up, down, self.grid.dt)


def make_path_ensemble(spec: ProblemSpec, path_cap: int = PATH_CAP,
                       tree: RecombiningTree | None = None) -> PathEnsemble:
    """Path tree for ``spec`` without states (K = N, refused above ``path_cap``)."""
    g = spec.grid
    if g.N > path_cap:
        raise SizeError(f"path tree needs 2^{g.N} paths; N={g.N} exceeds path_cap={path_cap}")
    K = g.N
    tree = tree or RecombiningTree(g)
    idx = np.arange(1 << K)
    bits = np.stack([(idx >> (K - 1 - k)) & 1 for k in range(K)])
    up = np.vstack([np.zeros((1, 1 << K), dtype=int), np.cumsum(bits, axis=0)])
    levels = np.arange(K + 1)[:, None]
    w = (2.0 * up - levels) * tree.sqdt
    dw = (2.0 * bits - 1.0) * tree.sqdt
    lc = tree.coefficients(spec)
    coeffs = {name: np.stack([getattr(lc, name)[k][up[k]] for k in range(K)])
              for name in "ABCDQR"}
    PT = lc.PT[up[K]]
    return PathEnsemble(g, K, up, w, dw, coeffs, PT)


def simulate_states(ens: PathEnsemble, x0: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Exact discrete scheme x+ = x + (Ax + Bu)dt + (Cx + Du)dw on every path.

    ``u`` is (N, m) or a batch (batch, N, m); result is (K+1, [batch,] paths, n).
    """
    u = np.asarray(u, dtype=float)
    batched = u.ndim == 3
    U = u if batched else u[None]
    dt = ens.grid.dt
    c = ens.coeffs
    nb = U.shape[0]
    x = np.empty((ens.K + 1, nb, ens.paths, len(x0)))
    x[0] = x0
    for k in range(ens.K):
        xk = x[k]
        drift = np.einsum("pij,bpj->bpi", c["A"][k], xk) + np.einsum("pij,bj->bpi", c["B"][k], U[:, k])
        diff = np.einsum("pij,bpj->bpi", c["C"][k], xk) + np.einsum("pij,bj->bpi", c["D"][k], U[:, k])
        x[k + 1] = xk + drift * dt + diff * ens.dw[k][None, :, None]
    return x if batched else x[:, 0]


def build_path_ensemble(spec: ProblemSpec, u: ControlTrajectory, path_cap: int = PATH_CAP,
                        ensemble: PathEnsemble | None = None) -> PathEnsemble:
    """Path tree with states under the deterministic control ``u``."""
    ens = ensemble if ensemble is not None else make_path_ensemble(spec, path_cap)
    states = simulate_states(ens, spec.x0_mean, u.values)
    return replace(ens, states=states, control=u)


def expectation_over_ensemble(ens: PathEnsemble, functional) -> np.ndarray | float:
    """Probability-weighted sum over paths.

    ``functional`` is either an array whose leading axis runs over paths, or a
    callable taking the ensemble and returning such an array.
    """
    vals = functional(ens) if callable(functional) else functional
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 0 or vals.shape[0] != ens.paths:
        vals = np.broadcast_to(vals, (ens.paths,) + vals.shape)
    out = vals.mean(axis=0)
    return float(out) if out.ndim == 0 else out
