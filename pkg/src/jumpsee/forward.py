"""Forward solvers for dX = [AX + b]dt + [BX + g]dW + ∫σ dμ̃ and their audits."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .noise import NoiseEnsemble
from .problem import CoefficientSet, ControlLaw, ControlProblem  # noqa: F401  (re-export)
from .triple import GalerkinSpace, OperatorProcess

BLOWUP_LIMIT = 1e8


class SolverError(RuntimeError):
    pass


class SingularStepError(SolverError):
    def __init__(self, step, cond):
        super().__init__(f"(I - dt A) is singular at step {step} (condition number {cond:.3g})")
        self.step, self.cond = step, cond


class BlowUpError(SolverError):
    def __init__(self, step, paths):
        paths = list(map(int, paths))
        shown = paths[:10] + (["..."] if len(paths) > 10 else [])
        super().__init__(f"state left |X|_H <= {BLOWUP_LIMIT:g} at step {step} on paths {shown}")
        self.step, self.paths = step, paths


@dataclass(frozen=True, eq=False)
class StateEnsemble:
    """Monte Carlo ensemble of state paths plus the controls actually applied."""

    values: np.ndarray  # (M, n+1, N)
    controls: np.ndarray  # (M, n, d)
    grid: object

    @property
    def paths(self) -> int:
        return self.values.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1]

    def path(self, i: int) -> "StatePath":
        return StatePath(self.values[i], self.controls[i], self.grid)


@dataclass(frozen=True, eq=False)
class StatePath:
    values: np.ndarray
    controls: np.ndarray
    grid: object


class _Stepper:
    """Caches LU factors of (I - dt A(t_{k+1}))."""

    def __init__(self, A: OperatorProcess):
        self.A = A
        self.dt = A.grid.dt
        self.N = A.space.dim
        self._cache = {}
        self._invariant = A.time_invariant

    def factor(self, k):
        key = 0 if self._invariant else k
        if key not in self._cache:
            mat = np.eye(self.N) - self.dt * self.A.at(k + 1)
            cond = np.linalg.cond(mat)
            if not np.isfinite(cond) or cond > 1e14:
                raise SingularStepError(k, cond)
            self._cache[key] = lu_factor(mat)
        return self._cache[key]

    def solve(self, k, rhs):
        return lu_solve(self.factor(k), rhs.T).T

    def solve_transpose(self, k, rhs):
        return lu_solve(self.factor(k), rhs.T, trans=1).T


def _march(A: OperatorProcess, x0, noise: NoiseEnsemble, terms: Callable, control_dim: int):
    """Drift-implicit Euler sweep.

    ``terms(k, X_k)`` returns ``(drift, diffusion, jumps, u)`` with the
    explicit drift (excluding A), the full diffusion coefficient, the
    per-mark jump amplitudes and the applied control.
    """
    grid = noise.grid
    n, dt = grid.steps, grid.dt
    M, N = noise.paths, A.space.dim
    X = np.empty((M, n + 1, N))
    X[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (M, N))
    U = np.empty((M, n, control_dim))
    comp = noise.compensated
    stepper = _Stepper(A)
    for k in range(n):
        Xk = X[:, k]
        drift, diff, jumps, u = terms(k, Xk)
        rhs = Xk + drift * dt + diff * noise.dw[:, k, None]
        if jumps is not None:
            rhs = rhs + np.einsum("pmi,pm->pi", jumps, comp[:, k])
        X[:, k + 1] = stepper.solve(k, rhs)
        U[:, k] = u
        norms = np.sqrt(np.sum(X[:, k + 1] ** 2, axis=1))
        bad = ~(norms <= BLOWUP_LIMIT)
        if np.any(bad):
            raise BlowUpError(k + 1, np.flatnonzero(bad))
    return X, U


def _check_inputs(space, A, B, noise, x0):
    N = space.dim
    if A.space.dim != N or B.space.dim != N:
        raise ValueError("operator and space dimensions differ")
    if A.grid != noise.grid or B.grid != noise.grid:
        raise ValueError("operators and noise live on different grids")
    if np.shape(x0)[-1] != N:
        raise ValueError(f"initial datum has {np.shape(x0)[-1]} coordinates, space has {N}")


def solve_forward(space: GalerkinSpace, A: OperatorProcess, B: OperatorProcess,
                  coeffs: CoefficientSet, control: ControlLaw, x0, noise: NoiseEnsemble
                  ) -> StateEnsemble:
    """Drift-implicit Euler, explicit in B, b, g, sigma, with u_k = control(t_k, X_k).

    (I - dt A(t_{k+1})) X_{k+1} = X_k + b dt + (B X_k + g) dW_k + Σ_i σ_i (dN_{k,i} - ν_i dt)
    """
    _check_inputs(space, A, B, noise, x0)
    times, marks = noise.grid.times, noise.marks

    def terms(k, X):
        t = times[k]
        u = control.evaluate(k, X)
        return (coeffs.b(t, X, u), X @ B.at(k).T + coeffs.g(t, X, u),
                coeffs.jumps(t, X, u, marks), u)

    X, U = _march(A, x0, noise, terms, coeffs.control_dim)
    return StateEnsemble(X, U, noise.grid)


def simulate(problem: ControlProblem, control: ControlLaw, noise: NoiseEnsemble) -> StateEnsemble:
    return solve_forward(problem.space, problem.A, problem.B, problem.coeffs, control,
                         problem.x0, noise)


def ensemble_m2_distance(X, Y, dt) -> float:
    """sqrt(E ∫ |X - Y|_H^2 dt) with left-endpoint quadrature."""
    diff = np.asarray(X)[:, :-1] - np.asarray(Y)[:, :-1]
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=(1, 2))) * dt))


@dataclass
class PicardTrace:
    rho_levels: list
    distances: list = field(default_factory=list)  # one list per level
    iterations: list = field(default_factory=list)

    @property
    def contraction_ratio(self) -> float:
        """Geometric-mean ratio of successive distances at the final level."""
        ratios = []
        for d in self.distances:
            d = np.asarray([x for x in d if x > 0])
            if d.size >= 2:
                ratios.append(np.exp(np.polyfit(np.arange(d.size), np.log(d), 1)[0]))
        return float(max(ratios)) if ratios else 0.0


class PicardDivergence(SolverError):
    def __init__(self, level, trace):
        d = trace.distances[-1]
        ratio = d[-1] / d[-2] if len(d) >= 2 and d[-2] > 0 else float("nan")
        super().__init__(f"Picard map did not converge at rho={level:.3f}; "
                         f"last contraction factor {ratio:.3g}")
        self.trace = trace


def solve_forward_picard(space: GalerkinSpace, A: OperatorProcess, B: OperatorProcess,
                         coeffs: CoefficientSet, control: ControlLaw, x0,
                         noise: NoiseEnsemble, rho_steps: int = 4, tol: float = 1e-8,
                         max_iter: int = 100):
    """Parameter-extension construction of the forward solution.

    Level 0 solves the linear equation with the nonlinear part switched off.
    Moving from rho0 to rho, the map x -> X keeps the rho0-weighted
    nonlinearity evaluated on X itself (resolved inside the sweep, since it is
    explicit) and freezes the (rho - rho0)-weighted increment at the previous
    iterate x. Each level is iterated to an M^2 distance below ``tol``.
    """
    _check_inputs(space, A, B, noise, x0)
    if rho_steps < 1:
        raise ValueError("rho_steps must be >= 1")
    times, marks, d = noise.grid.times, noise.marks, coeffs.control_dim
    levels = list(np.linspace(0.0, 1.0, rho_steps + 1))
    trace = PicardTrace(levels)

    def nonlinear(k, X):
        u = control.evaluate(k, X)
        t = times[k]
        return coeffs.b(t, X, u), coeffs.g(t, X, u), coeffs.jumps(t, X, u, marks), u

    def level_map(rho0, rho, frozen):
        def terms(k, X):
            b, g, s, u = nonlinear(k, X)
            drift, diff, jumps = rho0 * b, X @ B.at(k).T + rho0 * g, rho0 * s
            if frozen is not None and rho != rho0:
                fb, fg, fs, _ = nonlinear(k, frozen[:, k])
                drift = drift + (rho - rho0) * fb
                diff = diff + (rho - rho0) * fg
                jumps = jumps + (rho - rho0) * fs
            return drift, diff, jumps, u
        return _march(A, x0, noise, terms, d)

    X, U = level_map(0.0, 0.0, None)
    trace.distances.append([])
    trace.iterations.append(1)
    for rho0, rho in zip(levels[:-1], levels[1:]):
        dists = []
        for it in range(1, max_iter + 1):
            Xn, U = level_map(rho0, rho, X)
            dist = ensemble_m2_distance(Xn, X, noise.grid.dt)
            dists.append(dist)
            X = Xn
            if dist < tol:
                break
        else:
            trace.distances.append(dists)
            raise PicardDivergence(rho, trace)
        trace.distances.append(dists)
        trace.iterations.append(it)
    return StateEnsemble(X, U, noise.grid), trace


def ito_energy_audit(states: StateEnsemble, A: OperatorProcess, B: OperatorProcess,
                     coeffs: CoefficientSet, noise: NoiseEnsemble, path: int | None = None):
    """Discrepancy between |X(T)|^2 and the discrete Itô expansion of |X|^2.

    Returns the absolute residual for ``path`` or, if ``path`` is None, the
    array of residuals over all paths.
    """
    X, Uc = states.values, states.controls
    if path is not None:
        X, Uc = X[path: path + 1], Uc[path: path + 1]
        dw = noise.dw[path: path + 1]
        comp = noise.compensated[path: path + 1]
    else:
        dw, comp = noise.dw, noise.compensated
    grid, marks = noise.grid, noise.marks
    dt = grid.dt
    total = np.sum(X[:, 0] ** 2, axis=1)
    for k in range(grid.steps):
        t = grid.times[k]
        Xk, u = X[:, k], Uc[:, k]
        drift = Xk @ A.at(k).T + coeffs.b(t, Xk, u)
        diff = Xk @ B.at(k).T + coeffs.g(t, Xk, u)
        sig = coeffs.jumps(t, Xk, u, marks)  # (M, m, N)
        sig_sq = np.sum(sig**2, axis=2)
        total += 2 * np.sum(drift * Xk, axis=1) * dt
        total += 2 * np.sum(diff * Xk, axis=1) * dw[:, k]
        total += np.sum(diff**2, axis=1) * dt
        total += np.sum((sig_sq + 2 * np.einsum("pmi,pi->pm", sig, Xk)) * comp[:, k], axis=1)
        total += sig_sq @ marks.weights * dt
    resid = np.abs(np.sum(X[:, -1] ** 2, axis=1) - total)
    return float(resid[0]) if path is not None else resid


@dataclass(frozen=True)
class EstimateReport:
    sup_h_sq: float
    int_v_sq: float
    driver_mass: float
    ratio: float

    def as_dict(self):
        return {"sup_h_sq": self.sup_h_sq, "int_v_sq": self.int_v_sq,
                "driver_mass": self.driver_mass, "ratio": self.ratio}


def _data_term(states, coeffs, marks, x0):
    X, Uc, grid = states.values, states.controls, states.grid
    M = X.shape[0]
    zero = np.zeros((M, X.shape[2]))
    acc = np.zeros(M)
    for k in range(grid.steps):
        t, u = grid.times[k], Uc[:, k]
        acc += np.sum(coeffs.b(t, zero, u) ** 2, axis=1)
        acc += np.sum(coeffs.g(t, zero, u) ** 2, axis=1)
        acc += np.sum(coeffs.jumps(t, zero, u, marks) ** 2, axis=2) @ marks.weights
    return float(np.sum(np.asarray(x0) ** 2) + np.mean(acc) * grid.dt)


def estimate_apriori(states: StateEnsemble, space: GalerkinSpace, coeffs: CoefficientSet,
                     marks, x0, eps: float = 1e-300) -> EstimateReport:
    """Monte Carlo sides of the a priori bound: E sup|X|_H^2 + E∫|X|_V^2 vs the data term."""
    X = states.values
    sup_h = float(np.mean(np.max(np.sum(X**2, axis=2), axis=1)))
    int_v = float(np.mean(np.sum(space.v_weights * X[:, :-1] ** 2, axis=(1, 2))) * states.grid.dt)
    mass = _data_term(states, coeffs, marks, x0)
    return EstimateReport(sup_h, int_v, mass, (sup_h + int_v) / max(mass, eps))


@dataclass(frozen=True)
class DependenceResult:
    rows: list  # dicts with delta, sup_h_sq, int_v_sq, data_term
    slope_sup: float
    slope_int: float

    def as_dict(self):
        return {"rows": self.rows, "slope_sup": self.slope_sup, "slope_int": self.slope_int}


def _loglog_slope(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def continuous_dependence_experiment(problem: ControlProblem, control: ControlLaw,
                                     perturb: Callable, delta_scales: Sequence[float],
                                     noise: NoiseEnsemble) -> DependenceResult:
    """Solve base and perturbed problems on common noise for each delta.

    ``perturb(delta)`` returns ``(coeffs_bar, x0_bar)``. Each row holds the
    left side of the continuous-dependence bound and its data term Λ(δ).
    """
    base = simulate(problem, control, noise)
    space, marks, grid = problem.space, problem.marks, noise.grid
    rows = []
    for delta in delta_scales:
        coeffs_bar, x0_bar = perturb(delta)
        other = solve_forward(space, problem.A, problem.B, coeffs_bar, control, x0_bar, noise)
        diff = base.values - other.values
        sup_h = float(np.mean(np.max(np.sum(diff**2, axis=2), axis=1)))
        int_v = float(np.mean(np.sum(space.v_weights * diff[:, :-1] ** 2, axis=(1, 2))) * grid.dt)
        lam = float(np.sum((np.asarray(problem.x0) - np.asarray(x0_bar)) ** 2))
        acc = np.zeros(noise.paths)
        c = problem.coeffs
        for k in range(grid.steps):
            t, Xb, u = grid.times[k], other.values[:, k], other.controls[:, k]
            acc += np.sum((c.b(t, Xb, u) - coeffs_bar.b(t, Xb, u)) ** 2, axis=1)
            acc += np.sum((c.g(t, Xb, u) - coeffs_bar.g(t, Xb, u)) ** 2, axis=1)
            js = c.jumps(t, Xb, u, marks) - coeffs_bar.jumps(t, Xb, u, marks)
            acc += np.sum(js**2, axis=2) @ marks.weights
        lam += float(np.mean(acc) * grid.dt)
        rows.append({"delta": float(delta), "sup_h_sq": sup_h, "int_v_sq": int_v,
                     "data_term": lam})
    deltas = [r["delta"] for r in rows]
    return DependenceResult(rows, _loglog_slope(deltas, [r["sup_h_sq"] for r in rows]),
                            _loglog_slope(deltas, [r["int_v_sq"] for r in rows]))
