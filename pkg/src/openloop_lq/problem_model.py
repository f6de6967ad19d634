"""Problem instances: time grid, coefficient providers, validation.

A problem is the controlled linear SDE

    dx = (A x + B u) dt + (C x + D u) dw,   x(0) = x0,

with quadratic cost E[ int (x'Qx + u'Ru) dt + x(T)' PT x(T) ].  Coefficients
may depend on (t, w(t)) through a bounded scalar modulation of a base matrix,
which keeps them adapted and uniformly bounded by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import SpecError

TOL_PSD = 1e-10
COEFFICIENT_NAMES = ("A", "B", "C", "D", "Q", "R", "PT")
WEIGHT_NAMES = ("Q", "R", "PT")
MODULATION_KINDS = ("tanh", "sin", "clamp")
_KIND_ALIASES = {"identity-clamped": "clamp", "identity_clamped": "clamp", "identity": "clamp"}
_SNAP = 1e-9


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt on [0, T]."""

    T: float
    N: int

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise SpecError(f"horizon T must be positive and finite, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise SpecError(f"steps N must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    def t(self, k: int) -> float:
        return self.T if k == self.N else k * self.dt

    def with_steps(self, N: int) -> "TimeGrid":
        return TimeGrid(self.T, N)


@dataclass(frozen=True)
class Modulation:
    """Bounded scalar modulation phi(scale * w) with phi in {tanh, sin, clamp}."""

    kind: str = "tanh"
    gain: float | np.ndarray = 0.0
    scale: float = 1.0

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "gain", _frozen(self.gain))

    def phi(self, w):
        z = self.scale * np.asarray(w, dtype=float)
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "sin":
            return np.sin(z)
        if self.kind == "clamp":
            return np.clip(z, -1.0, 1.0)
        raise SpecError(f"unknown modulation kind {self.kind!r}")

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.gain == 0.0))


@dataclass(frozen=True)
class CoefficientProvider:
    """Base matrix (constant or piecewise constant in t) plus optional modulation.

    Additive providers (A, B, C, D) evaluate to ``base + gain*phi(scale*w)``;
    multiplicative ones (Q, R, PT) to ``base*(1 + gain*phi(scale*w))`` so that
    positive semidefiniteness survives modulation when |gain| < 1.

    A piecewise base of P matrices splits [0, T] into P equal pieces; the
    piece covering [s_p, s_{p+1}) is used there (right-open intervals).
    """

    base: np.ndarray
    modulation: Modulation | None = None
    multiplicative: bool = False

    def __post_init__(self):
        base = np.array(self.base, dtype=float)
        if base.ndim == 0:
            base = base.reshape(1, 1)
        elif base.ndim == 1:
            base = base.reshape(1, -1)
        if base.ndim == 2:
            base = base[None]
        if base.ndim != 3:
            raise SpecError(f"coefficient base must be a matrix or list of matrices, got ndim={base.ndim}")
        base.setflags(write=False)
        object.__setattr__(self, "base", base)

    @property
    def shape(self) -> tuple[int, int]:
        return self.base.shape[1:]

    @property
    def pieces(self) -> int:
        return self.base.shape[0]

    @property
    def is_deterministic(self) -> bool:
        return self.modulation is None or self.modulation.is_zero

    def piece_index(self, t: float, T: float, from_left: bool = False) -> int:
        P = self.pieces
        if P == 1:
            return 0
        x = t / (T / P)
        r = round(x)
        if abs(x - r) < _SNAP:
            x = r
        idx = math.ceil(x) - 1 if from_left else math.floor(x)
        return min(max(idx, 0), P - 1)

    def evaluate(self, t: float, w, T: float, from_left: bool = False) -> np.ndarray:
        """Value at time t for scalar or array w; shape ``w.shape + self.shape``."""
        b = self.base[self.piece_index(t, T, from_left)]
        w = np.asarray(w, dtype=float)
        if self.is_deterministic:
            return np.broadcast_to(b, w.shape + b.shape).copy()
        mod = self.modulation
        phi = mod.phi(w)[..., None, None]
        if self.multiplicative:
            return b * (1.0 + mod.gain * phi)
        return b + mod.gain * phi

    def scaled(self, lam: float) -> "CoefficientProvider":
        return replace(self, base=lam * self.base)


@dataclass(frozen=True)
class CoefficientSet:
    """One evaluation of (A, B, C, D, Q, R) at a point (t, w); may be batched over w."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def check(self, tol: float = TOL_PSD) -> list[str]:
        problems = []
        for name in ("A", "B", "C", "D", "Q", "R"):
            if not np.all(np.isfinite(getattr(self, name))):
                problems.append(f"{name} has non-finite entries")
        for name in ("Q", "R"):
            X = getattr(self, name)
            if not np.allclose(X, np.swapaxes(X, -1, -2), atol=tol):
                problems.append(f"{name} not symmetric")
            if _min_eig_sym(X) < -tol:
                problems.append(f"{name} not PSD")
        return problems


def _min_eig_sym(X: np.ndarray) -> float:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return 0.0
    S = 0.5 * (X + np.swapaxes(X, -1, -2))
    return float(np.min(np.linalg.eigvalsh(S)))


@dataclass(frozen=True)
class ProblemSpec:
    """A problem instance: dimensions, grid, initial law, coefficients, terminal weight."""

    n: int
    m: int
    grid: TimeGrid
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    providers: Mapping[str, CoefficientProvider]

    def __post_init__(self):
        object.__setattr__(self, "x0_mean", _frozen(np.reshape(self.x0_mean, -1)))
        cov = np.asarray(self.x0_cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        object.__setattr__(self, "x0_cov", _frozen(cov))
        missing = [k for k in COEFFICIENT_NAMES if k not in self.providers]
        if missing:
            raise SpecError(f"missing coefficients: {missing}")
        provs = {}
        for k in COEFFICIENT_NAMES:
            p = self.providers[k]
            if not isinstance(p, CoefficientProvider):
                p = CoefficientProvider(p, multiplicative=k in WEIGHT_NAMES)
            provs[k] = p
        object.__setattr__(self, "providers", provs)

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def is_deterministic(self) -> bool:
        return all(p.is_deterministic for p in self.providers.values())

    def with_steps(self, N: int) -> "ProblemSpec":
        return replace(self, grid=self.grid.with_steps(N))

    def with_x0(self, mean, cov=None) -> "ProblemSpec":
        cov = np.zeros((self.n, self.n)) if cov is None else cov
        return replace(self, x0_mean=mean, x0_cov=cov)

    def with_coefficients(self, **providers) -> "ProblemSpec":
        provs = dict(self.providers)
        for k, v in providers.items():
            if not isinstance(v, CoefficientProvider):
                v = CoefficientProvider(v, multiplicative=k in WEIGHT_NAMES)
            provs[k] = v
        return replace(self, providers=provs)

    def scaled_weights(self, lam: float) -> "ProblemSpec":
        """Same problem with (Q, R, PT) multiplied by lam."""
        provs = dict(self.providers)
        for k in WEIGHT_NAMES:
            provs[k] = provs[k].scaled(lam)
        return replace(self, providers=provs)

    def terminal_weight(self, w=0.0) -> np.ndarray:
        return self.providers["PT"].evaluate(self.T, w, self.T)


@dataclass
class ControlTrajectory:
    """Deterministic control, constant on each step [t_k, t_{k+1}); ``values`` is (N, m)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.N:
            raise SpecError(f"control has {v.shape[0]} steps, grid has {self.grid.N}")
        self.values = v

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int) -> "ControlTrajectory":
        return cls(grid, np.zeros((grid.N, m)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "ControlTrajectory":
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid.nodes[:-1]], dtype=float))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def __add__(self, other: "ControlTrajectory") -> "ControlTrajectory":
        return ControlTrajectory(self.grid, self.values + other.values)

    def __mul__(self, c: float) -> "ControlTrajectory":
        return ControlTrajectory(self.grid, c * self.values)

    __rmul__ = __mul__


def coefficients_at(spec: ProblemSpec, t: float, w=0.0, from_left: bool = False) -> CoefficientSet:
    """Evaluate (A, B, C, D, Q, R) at time t and Brownian value(s) w."""
    T = spec.T
    if not (-_SNAP * T <= t <= T * (1 + _SNAP)):
        raise ValueError(f"t={t} outside [0, {T}]")
    t = min(max(t, 0.0), T)
    vals = {k: spec.providers[k].evaluate(t, w, T, from_left) for k in ("A", "B", "C", "D", "Q", "R")}
    return CoefficientSet(**vals)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    coefficient: str
    time_index: int | None
    message: str

    def __str__(self) -> str:
        where = "" if self.time_index is None else f" (time index {self.time_index})"
        return f"{self.coefficient}: {self.message}{where}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __iter__(self) -> Iterator[Violation]:
        return iter(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def messages(self) -> list[str]:
        return [str(v) for v in self.violations]

    def raise_if_invalid(self):
        if self.violations:
            raise SpecError("invalid problem spec: " + "; ".join(self.messages()), self.violations)


def _expected_shapes(n: int, m: int) -> dict[str, tuple[int, int]]:
    return {"A": (n, n), "B": (n, m), "C": (n, n), "D": (n, m), "Q": (n, n), "R": (m, m), "PT": (n, n)}


def _first_node_of_piece(p: int, P: int, grid: TimeGrid) -> int | None:
    if P == 1:
        return None
    return min(int(math.ceil(p * grid.N / P - _SNAP)), grid.N)


def validate(spec: ProblemSpec, mode: str = "auto") -> ValidationReport:
    """Collect every violated invariant of ``spec``; an empty report means valid.

    ``mode`` is ``"det"`` (deterministic coefficients required), ``"random"``
    (deterministic initial state required) or ``"auto"`` (random mode
    whenever some coefficient is modulated).
    """
    out: list[Violation] = []
    n, m = spec.n, spec.m
    if spec.x0_mean.shape != (n,):
        out.append(Violation("x0_mean", None, f"dimension mismatch: shape {spec.x0_mean.shape}, expected ({n},)"))
    elif not np.all(np.isfinite(spec.x0_mean)):
        out.append(Violation("x0_mean", None, "non-finite entries"))
    if spec.x0_cov.shape != (n, n):
        out.append(Violation("x0_cov", None, f"dimension mismatch: shape {spec.x0_cov.shape}, expected ({n}, {n})"))
    else:
        _check_sym_psd("x0_cov", spec.x0_cov, None, out)

    shapes = _expected_shapes(n, m)
    for name in COEFFICIENT_NAMES:
        prov = spec.providers[name]
        if prov.shape != shapes[name]:
            out.append(Violation(name, None,
                                 f"dimension mismatch: shape {prov.shape}, expected {shapes[name]}"))
            continue
        if not np.all(np.isfinite(prov.base)):
            out.append(Violation(name, None, "non-finite entries"))
            continue
        mod = prov.modulation
        if mod is not None:
            if mod.kind not in MODULATION_KINDS:
                out.append(Violation(name, None, f"unknown modulation kind {mod.kind!r}"))
            if not (np.all(np.isfinite(mod.gain)) and math.isfinite(mod.scale)):
                out.append(Violation(name, None, "non-finite modulation parameters"))
            if name in WEIGHT_NAMES:
                if mod.gain.ndim != 0 or not abs(float(mod.gain)) < 1.0:
                    out.append(Violation(name, None,
                                         "weight modulation must be a scalar multiplier with |gain| < 1"))
            elif mod.gain.ndim != 0 and mod.gain.shape != shapes[name]:
                out.append(Violation(name, None, f"modulation gain shape {mod.gain.shape} mismatch"))
        if name in WEIGHT_NAMES:
            for p in range(prov.pieces):
                _check_sym_psd(name, prov.base[p], _first_node_of_piece(p, prov.pieces, spec.grid), out)

    random_mode = mode == "random" or (mode == "auto" and not spec.is_deterministic)
    if mode == "det":
        for name in COEFFICIENT_NAMES:
            if not spec.providers[name].is_deterministic:
                out.append(Violation(name, None, "random coefficient in deterministic-coefficient mode"))
    if random_mode and spec.x0_cov.shape == (n, n) and np.any(spec.x0_cov != 0.0):
        out.append(Violation("x0_cov", None, "random-coefficient mode requires a deterministic x0 (x0_cov = 0)"))
    return ValidationReport(out)


def _check_sym_psd(name: str, X: np.ndarray, k: int | None, out: list[Violation]):
    scale = max(1.0, float(np.max(np.abs(X))) if X.size else 1.0)
    if not np.allclose(X, X.T, atol=TOL_PSD * scale, rtol=0.0):
        out.append(Violation(name, k, f"{name} not symmetric"))
    if _min_eig_sym(X) < -TOL_PSD:
        out.append(Violation(name, k, f"{name} not PSD"))


# ---------------------------------------------------------------------------
# JSON spec files
# ---------------------------------------------------------------------------


def _provider_from_json(name: str, d) -> CoefficientProvider:
    if not isinstance(d, Mapping):
        d = {"base": d}
    mod = d.get("modulation")
    modulation = None
    if mod is not None:
        modulation = Modulation(kind=mod.get("kind", "tanh"), gain=mod.get("gain", 0.0),
                                scale=mod.get("scale", 1.0))
    return CoefficientProvider(np.array(d["base"], dtype=float), modulation,
                               multiplicative=name in WEIGHT_NAMES)


def spec_from_dict(d: Mapping) -> ProblemSpec:
    try:
        n, m = int(d["n"]), int(d["m"])
        grid = TimeGrid(float(d["T"]), int(d["steps"]))
        coeffs = d["coefficients"]
        provs = {k: _provider_from_json(k, coeffs[k]) for k in COEFFICIENT_NAMES}
    except KeyError as e:
        raise SpecError(f"spec is missing field {e}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, SpecError):
            raise
        raise SpecError(f"malformed spec: {e}") from None
    x0_mean = np.array(d.get("x0_mean", np.zeros(n)), dtype=float)
    x0_cov = np.array(d.get("x0_cov", np.zeros((n, n))), dtype=float)
    return ProblemSpec(n, m, grid, x0_mean, x0_cov, provs)


def spec_to_dict(spec: ProblemSpec) -> dict:
    coeffs = {}
    for k, p in spec.providers.items():
        base = p.base[0] if p.pieces == 1 else p.base
        entry = {"base": base.tolist()}
        if p.modulation is not None:
            entry["modulation"] = {"kind": p.modulation.kind, "gain": p.modulation.gain.tolist(),
                                   "scale": p.modulation.scale}
        coeffs[k] = entry
    return {"n": spec.n, "m": spec.m, "T": spec.T, "steps": spec.N,
            "x0_mean": spec.x0_mean.tolist(), "x0_cov": spec.x0_cov.tolist(),
            "coefficients": coeffs}


def load_spec(source) -> ProblemSpec:
    """Read a problem spec from a JSON path, JSON string, or already-parsed dict."""
    if isinstance(source, Mapping):
        return spec_from_dict(source)
    if isinstance(source, (str, Path)) and Path(source).exists():
        with open(source) as fh:
            try:
                return spec_from_dict(json.load(fh))
            except json.JSONDecodeError as e:
                raise SpecError(f"spec file is not valid JSON: {e}") from None
    try:
        return spec_from_dict(json.loads(source))
    except (json.JSONDecodeError, TypeError) as e:
        raise SpecError(f"cannot read spec from {source!r}: {e}") from None


def make_spec(A, B, C, D, Q, R, PT, x0, T=1.0, steps=100, x0_cov=None, modulations=None) -> ProblemSpec:
    """Convenience constructor from plain arrays (scalars allowed for 1x1 problems)."""
    mats = {k: np.atleast_2d(np.asarray(v, dtype=float))
            for k, v in dict(A=A, B=B, C=C, D=D, Q=Q, R=R, PT=PT).items()}
    modulations = modulations or {}
    provs = {k: CoefficientProvider(v, modulations.get(k), k in WEIGHT_NAMES)
             for k, v in mats.items()}
    n = provs["A"].shape[0]
    m = provs["B"].shape[1]
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    cov = np.zeros((n, n)) if x0_cov is None else np.atleast_2d(np.asarray(x0_cov, dtype=float))
    return ProblemSpec(n, m, TimeGrid(T, steps), x0, cov, provs)


def random_spec(rng: np.random.Generator, n: int, m: int, steps: int = 50, T: float = 1.0,
                random_coefficients: bool = False, x0_cov: bool = False) -> ProblemSpec:
    """A well-conditioned random instance; modulated coefficients if requested."""
    def psd(k, floor):
        L = rng.normal(scale=0.5, size=(k, k))
        return L @ L.T + floor * np.eye(k)

    A = rng.normal(scale=0.4, size=(n, n))
    B = rng.normal(scale=0.6, size=(n, m))
    C = rng.normal(scale=0.3, size=(n, n))
    D = rng.normal(scale=0.3, size=(n, m))
    Q, R, PT = psd(n, 0.2), psd(m, 0.5), psd(n, 0.2)
    mods = {}
    if random_coefficients:
        kinds = list(MODULATION_KINDS)
        for k in ("A", "B", "C", "D"):
            shape = (n, n) if k in ("A", "C") else (n, m)
            mods[k] = Modulation(kinds[rng.integers(3)], rng.normal(scale=0.3, size=shape),
                                 float(rng.uniform(0.5, 1.5)))
        for k in WEIGHT_NAMES:
            mods[k] = Modulation(kinds[rng.integers(3)], float(rng.uniform(-0.4, 0.4)),
                                 float(rng.uniform(0.5, 1.5)))
    x0 = rng.normal(size=n)
    cov = psd(n, 0.1) if x0_cov else None
    return make_spec(A, B, C, D, Q, R, PT, x0, T=T, steps=steps, x0_cov=cov, modulations=mods)
