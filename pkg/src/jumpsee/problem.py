"""Shared containers: coefficients, costs, control laws and the control problem.

Array conventions used throughout the package: states are ``(M, N)``
(paths x modes), controls ``(M, d)``, per-mark quantities ``(M, m, N)``.
Coefficient callables take ``(t, X, U)`` batched over paths; derivative
callables return matrices that broadcast against ``(M, N, N)`` or
``(M, N, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .noise import MarkSpace, TimeGrid


def _batch(mat, M):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 2:
        return np.broadcast_to(mat, (M,) + mat.shape)
    return mat


@dataclass(frozen=True)
class CoefficientSet:
    b: Callable
    g: Callable
    sigma: Callable  # sigma(t, i, X, U) for mark index i
    b_x: Callable
    b_u: Callable
    g_x: Callable
    g_u: Callable
    sigma_x: Callable
    sigma_u: Callable
    control_dim: int
    lipschitz: float = float("nan")
    linear: bool = False

    def jumps(self, t, X, U, marks: MarkSpace) -> np.ndarray:
        if marks.size == 0:
            return np.zeros((X.shape[0], 0, X.shape[1]))
        return np.stack([self.sigma(t, i, X, U) for i in range(marks.size)], axis=1)

    def jump_x(self, t, X, U, marks: MarkSpace) -> np.ndarray:
        M = X.shape[0]
        if marks.size == 0:
            return np.zeros((M, 0, X.shape[1], X.shape[1]))
        return np.stack([_batch(self.sigma_x(t, i, X, U), M) for i in range(marks.size)], axis=1)

    def jump_u(self, t, X, U, marks: MarkSpace) -> np.ndarray:
        M = X.shape[0]
        if marks.size == 0:
            return np.zeros((M, 0, X.shape[1], U.shape[1]))
        return np.stack([_batch(self.sigma_u(t, i, X, U), M) for i in range(marks.size)], axis=1)


def linear_coefficients(state_dim: int, control_dim: int, *,
                        drift_x=None, drift_u=None, diffusion_x=None, diffusion_u=None,
                        jump_x: Sequence | None = None, jump_u: Sequence | None = None,
                        marks: MarkSpace | None = None,
                        drift_0: Callable | None = None, diffusion_0: Callable | None = None,
                        jump_0: Callable | None = None) -> CoefficientSet:
    """Affine coefficients b = Fx x + Fu u + f0(t), and likewise for g and each sigma_i.

    Missing matrices are zero. ``jump_x``/``jump_u`` hold one matrix per mark.
    """
    N, d = state_dim, control_dim
    m = marks.size if marks is not None else len(jump_x or jump_u or [])
    zx, zu = np.zeros((N, N)), np.zeros((N, d))
    Fx = zx if drift_x is None else np.asarray(drift_x, float).reshape(N, N)
    Fu = zu if drift_u is None else np.asarray(drift_u, float).reshape(N, d)
    Gx = zx if diffusion_x is None else np.asarray(diffusion_x, float).reshape(N, N)
    Gu = zu if diffusion_u is None else np.asarray(diffusion_u, float).reshape(N, d)
    Sx = [zx] * m if jump_x is None else [np.asarray(s, float).reshape(N, N) for s in jump_x]
    Su = [zu] * m if jump_u is None else [np.asarray(s, float).reshape(N, d) for s in jump_u]
    if len(Sx) != m or len(Su) != m:
        raise ValueError("need one jump matrix per mark")
    zero = lambda t: np.zeros(N)
    f0, g0 = drift_0 or zero, diffusion_0 or zero
    s0 = jump_0 or (lambda t, i: np.zeros(N))
    nus = marks.weights if marks is not None else np.ones(m)
    lip = (np.linalg.norm(Fx, 2) + np.linalg.norm(Gx, 2)
           + np.sqrt(sum(nu * np.linalg.norm(s, 2) ** 2 for nu, s in zip(nus, Sx))))
    return CoefficientSet(
        b=lambda t, X, U: X @ Fx.T + U @ Fu.T + f0(t),
        g=lambda t, X, U: X @ Gx.T + U @ Gu.T + g0(t),
        sigma=lambda t, i, X, U: X @ Sx[i].T + U @ Su[i].T + s0(t, i),
        b_x=lambda t, X, U: Fx,
        b_u=lambda t, X, U: Fu,
        g_x=lambda t, X, U: Gx,
        g_u=lambda t, X, U: Gu,
        sigma_x=lambda t, i, X, U: Sx[i],
        sigma_u=lambda t, i, X, U: Su[i],
        control_dim=d,
        lipschitz=float(lip),
        linear=True,
    )


def shifted(coeffs: CoefficientSet, drift_shift=None, diffusion_shift=None) -> CoefficientSet:
    """Same coefficients with constant vectors added to b and/or g."""
    db = 0.0 if drift_shift is None else np.asarray(drift_shift, dtype=float)
    dg = 0.0 if diffusion_shift is None else np.asarray(diffusion_shift, dtype=float)
    return CoefficientSet(
        b=lambda t, X, U: coeffs.b(t, X, U) + db,
        g=lambda t, X, U: coeffs.g(t, X, U) + dg,
        sigma=coeffs.sigma, b_x=coeffs.b_x, b_u=coeffs.b_u, g_x=coeffs.g_x,
        g_u=coeffs.g_u, sigma_x=coeffs.sigma_x, sigma_u=coeffs.sigma_u,
        control_dim=coeffs.control_dim, lipschitz=coeffs.lipschitz, linear=coeffs.linear)


def derivative_consistency(coeffs: CoefficientSet, state_dim: int, marks: MarkSpace,
                           probes: int = 8, seed: int = 0, h: float = 1e-6) -> float:
    """Worst relative mismatch between central differences and declared derivatives."""
    rng = np.random.default_rng(seed)
    N, d = state_dim, coeffs.control_dim
    X = rng.standard_normal((probes, N))
    U = rng.standard_normal((probes, d))
    dx = rng.standard_normal((probes, N))
    du = rng.standard_normal((probes, d))
    t = 0.0
    worst = 0.0
    fns = [(coeffs.b, coeffs.b_x, coeffs.b_u), (coeffs.g, coeffs.g_x, coeffs.g_u)]
    for i in range(marks.size):
        fns.append((lambda t, X, U, i=i: coeffs.sigma(t, i, X, U),
                    lambda t, X, U, i=i: coeffs.sigma_x(t, i, X, U),
                    lambda t, X, U, i=i: coeffs.sigma_u(t, i, X, U)))
    for f, fx, fu in fns:
        fd = (f(t, X + h * dx, U + h * du) - f(t, X - h * dx, U - h * du)) / (2 * h)
        an = (np.einsum("pij,pj->pi", _batch(fx(t, X, U), probes), dx)
              + np.einsum("pij,pj->pi", _batch(fu(t, X, U), probes), du))
        scale = max(1.0, float(np.max(np.abs(an))))
        worst = max(worst, float(np.max(np.abs(fd - an))) / scale)
    return worst


@dataclass(frozen=True)
class CostSpec:
    l: Callable
    l_x: Callable
    l_u: Callable
    Phi: Callable
    Phi_x: Callable
    growth: float = float("nan")


def quadratic_cost(state_weight: float = 1.0, control_weight: float = 1.0,
                   terminal_weight: float = 1.0) -> CostSpec:
    """l = a|x|^2 + c|u|^2, Phi = f|x|^2."""
    a, c, f = float(state_weight), float(control_weight), float(terminal_weight)
    return CostSpec(
        l=lambda t, X, U: a * np.sum(X**2, axis=-1) + c * np.sum(U**2, axis=-1),
        l_x=lambda t, X, U: 2 * a * X,
        l_u=lambda t, X, U: 2 * c * U,
        Phi=lambda X: f * np.sum(X**2, axis=-1),
        Phi_x=lambda X: 2 * f * X,
        growth=max(abs(a), abs(c), abs(f)),
    )


CONTROL_KINDS = ("open_loop", "linear_feedback", "tabulated")


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """Admissible control: open-loop schedule, affine feedback, or per-path table.

    Box constraints (``lower``/``upper``) are enforced by projecting every
    evaluation.
    """

    kind: str
    grid: TimeGrid
    control_dim: int
    state_dim: int
    values: np.ndarray | None = None  # open_loop (n, d); tabulated (M, n, d)
    gains: np.ndarray | None = None  # (n, d, N)
    offsets: np.ndarray | None = None  # (n, d)
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        n, d, N = self.grid.steps, self.control_dim, self.state_dim
        if self.kind not in CONTROL_KINDS:
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.kind == "open_loop" and np.shape(self.values) != (n, d):
            raise ValueError(f"open-loop values need shape {(n, d)}")
        if self.kind == "tabulated" and (np.ndim(self.values) != 3
                                         or np.shape(self.values)[1:] != (n, d)):
            raise ValueError(f"tabulated values need shape (paths, {n}, {d})")
        if self.kind == "linear_feedback":
            if np.shape(self.gains) != (n, d, N) or np.shape(self.offsets) != (n, d):
                raise ValueError("feedback gains/offsets have the wrong shape")
        for name in ("values", "gains", "offsets", "lower", "upper"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float)
                if not np.all(np.isfinite(v) | (name in ("lower", "upper"))):
                    raise ValueError(f"non-finite control {name}")
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    # constructors
    @classmethod
    def zero(cls, grid, control_dim, state_dim, **box):
        return cls("open_loop", grid, control_dim, state_dim,
                   values=np.zeros((grid.steps, control_dim)), **box)

    @classmethod
    def open_loop(cls, grid, values, state_dim, **box):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls("open_loop", grid, values.shape[1], state_dim, values=values, **box)

    @classmethod
    def linear_feedback(cls, grid, gains, offsets=None, **box):
        gains = np.asarray(gains, dtype=float)
        if gains.ndim == 2:
            gains = np.broadcast_to(gains, (grid.steps,) + gains.shape)
        n, d, N = gains.shape
        offsets = np.zeros((n, d)) if offsets is None else np.asarray(offsets, dtype=float)
        return cls("linear_feedback", grid, d, N, gains=gains, offsets=offsets, **box)

    @classmethod
    def tabulated(cls, grid, values, state_dim, **box):
        values = np.asarray(values, dtype=float)
        return cls("tabulated", grid, values.shape[2], state_dim, values=values, **box)

    @classmethod
    def from_causal_rule(cls, grid, rule: Callable, states: np.ndarray, control_dim: int,
                         **box):
        """Tabulate ``rule(k, prefix)`` where ``prefix = states[:, :k+1]`` only."""
        states = np.asarray(states, dtype=float)
        M, _, N = states.shape
        vals = np.empty((M, grid.steps, control_dim))
        for k in range(grid.steps):
            prefix = states[:, : k + 1].copy()
            prefix.setflags(write=False)
            vals[:, k] = rule(k, prefix)
        return cls("tabulated", grid, control_dim, N, values=vals, **box)

    @property
    def box(self) -> dict:
        return {"lower": self.lower, "upper": self.upper}

    @property
    def constrained(self) -> bool:
        return self.lower is not None or self.upper is not None

    def project(self, U):
        if self.lower is not None:
            U = np.maximum(U, self.lower)
        if self.upper is not None:
            U = np.minimum(U, self.upper)
        return U

    def evaluate(self, k: int, X: np.ndarray) -> np.ndarray:
        M = X.shape[0]
        if self.kind == "open_loop":
            U = np.broadcast_to(self.values[k], (M, self.control_dim))
        elif self.kind == "linear_feedback":
            U = X @ self.gains[k].T + self.offsets[k]
        else:
            if self.values.shape[0] != M:
                raise ValueError(f"tabulated control has {self.values.shape[0]} paths, state has {M}")
            U = self.values[:, k]
        return self.project(np.array(U, dtype=float))

    def with_box(self, lower=None, upper=None) -> "ControlLaw":
        return ControlLaw(self.kind, self.grid, self.control_dim, self.state_dim,
                          self.values, self.gains, self.offsets, lower, upper)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Everything needed to simulate, price and differentiate a control."""

    space: object  # GalerkinSpace
    A: object  # OperatorProcess
    B: object  # OperatorProcess
    coeffs: CoefficientSet
    cost: CostSpec
    x0: np.ndarray
    marks: MarkSpace
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.A.grid

    @property
    def control_dim(self) -> int:
        return self.coeffs.control_dim

    @property
    def state_dim(self) -> int:
        return self.space.dim

    def zero_control(self, kind: str = "open_loop") -> ControlLaw:
        box = {"lower": self.lower, "upper": self.upper}
        if kind == "linear_feedback":
            return ControlLaw.linear_feedback(
                self.grid, np.zeros((self.grid.steps, self.control_dim, self.state_dim)), **box)
        return ControlLaw.zero(self.grid, self.control_dim, self.state_dim, **box)
