"""Cost, Hamiltonian, Gateaux derivatives, maximum-principle residual and optimizers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adjoint import AdjointEnsemble, RegressionBasis, solve_bsee_regression
from .forward import StateEnsemble, _march, simulate
from .noise import MarkSpace, NoiseEnsemble
from .problem import ControlLaw, ControlProblem, CostSpec, _batch  # noqa: F401

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def _mean_se(samples):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(samples.size) if samples.size > 1 else 0.0
    return float(samples.mean()), float(se)


def pathwise_cost(states: StateEnsemble, cost: CostSpec) -> np.ndarray:
    X, U, grid = states.values, states.controls, states.grid
    run = sum(cost.l(grid.times[k], X[:, k], U[:, k]) for k in range(grid.steps))
    return run * grid.dt + cost.Phi(X[:, -1])


def cost(states: StateEnsemble, cost_spec: CostSpec):
    """Monte Carlo estimate of E[∫ l dt + Φ(X_T)] (left-endpoint rule) and its standard error."""
    return _mean_se(pathwise_cost(states, cost_spec))


@dataclass(frozen=True)
class HamiltonianEval:
    value: np.ndarray
    grad_u: np.ndarray
    grad_x: np.ndarray


def hamiltonian(t, x, u, p, q, r, coeffs, cost_spec: CostSpec, marks: MarkSpace) -> HamiltonianEval:
    """(b,p) + (g,q) + Σ_i ν_i (σ(e_i), r_i) + l and its u- and x-gradients.

    Accepts single points (1-d x, u, p, q and r of shape (m, N)) or batches.
    """
    single = np.ndim(x) == 1
    x, u, p, q = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x, u, p, q))
    r = np.asarray(r, dtype=float)
    if single:
        r = r.reshape(1, marks.size, x.shape[1])
    M = x.shape[0]
    nus = marks.weights
    sig = coeffs.jumps(t, x, u, marks)
    value = (np.sum(coeffs.b(t, x, u) * p, axis=1) + np.sum(coeffs.g(t, x, u) * q, axis=1)
             + np.einsum("m,pmi,pmi->p", nus, sig, r) + cost_spec.l(t, x, u))
    grad_u = (np.einsum("pji,pj->pi", _batch(coeffs.b_u(t, x, u), M), p)
              + np.einsum("pji,pj->pi", _batch(coeffs.g_u(t, x, u), M), q)
              + np.einsum("m,pmji,pmj->pi", nus, coeffs.jump_u(t, x, u, marks), r)
              + cost_spec.l_u(t, x, u))
    grad_x = (np.einsum("pji,pj->pi", _batch(coeffs.b_x(t, x, u), M), p)
              + np.einsum("pji,pj->pi", _batch(coeffs.g_x(t, x, u), M), q)
              + np.einsum("m,pmji,pmj->pi", nus, coeffs.jump_x(t, x, u, marks), r)
              + cost_spec.l_x(t, x, u))
    if single:
        return HamiltonianEval(float(value[0]), grad_u[0], grad_x[0])
    return HamiltonianEval(value, grad_u, grad_x)


def hamiltonian_u_path(states: StateEnsemble, adjoints: AdjointEnsemble, problem: ControlProblem
                       ) -> np.ndarray:
    """H_u at every (path, step), left-endpoint values. Shape (M, n, d)."""
    X, U, grid = states.values, states.controls, states.grid
    out = np.empty_like(U)
    for k in range(grid.steps):
        out[:, k] = hamiltonian(grid.times[k], X[:, k], U[:, k], adjoints.p[:, k],
                                adjoints.q[:, k], adjoints.r[:, k], problem.coeffs,
                                problem.cost, problem.marks).grad_u
    return out


def realize(control: ControlLaw, states: StateEnsemble) -> np.ndarray:
    """Values of ``control`` along the given state paths, shape (M, n, d)."""
    return np.stack([control.evaluate(k, states.values[:, k])
                     for k in range(states.grid.steps)], axis=1)


def _delta(direction, states):
    if isinstance(direction, ControlLaw):
        return realize(direction, states) - states.controls
    return np.asarray(direction, dtype=float)


def solve_variational(states: StateEnsemble, problem: ControlProblem, direction,
                      noise: NoiseEnsemble) -> np.ndarray:
    """First-order variation Y with Y(0) = 0 for the perturbation u + ε(v - u).

    ``direction`` is either the admissible control v (evaluated along the base
    states) or the array v - u of shape (M, n, d).
    """
    du = _delta(direction, states)
    X, U, grid, marks = states.values, states.controls, noise.grid, noise.marks
    c, B = problem.coeffs, problem.B
    M = X.shape[0]

    def terms(k, Y):
        t, Xk, uk, dk = grid.times[k], X[:, k], U[:, k], du[:, k]
        lin = lambda fx, fu: (np.einsum("pij,pj->pi", _batch(fx(t, Xk, uk), M), Y)
                              + np.einsum("pij,pj->pi", _batch(fu(t, Xk, uk), M), dk))
        drift = lin(c.b_x, c.b_u)
        diff = Y @ B.at(k).T + lin(c.g_x, c.g_u)
        jumps = (np.einsum("pmij,pj->pmi", c.jump_x(t, Xk, uk, marks), Y)
                 + np.einsum("pmij,pj->pmi", c.jump_u(t, Xk, uk, marks), dk))
        return drift, diff, jumps, dk

    Y, _ = _march(problem.A, np.zeros(problem.state_dim), noise, terms, problem.control_dim)
    return Y


def gateaux_via_variation(states: StateEnsemble, Y: np.ndarray, direction, cost_spec: CostSpec):
    """E[(Φ_x(X_T), Y_T)] + E∫(l_x, Y) dt + E∫(l_u, v - u) dt, with standard error."""
    du = _delta(direction, states)
    X, U, grid = states.values, states.controls, states.grid
    acc = np.zeros(X.shape[0])
    for k in range(grid.steps):
        t = grid.times[k]
        acc += np.sum(cost_spec.l_x(t, X[:, k], U[:, k]) * Y[:, k], axis=1)
        acc += np.sum(cost_spec.l_u(t, X[:, k], U[:, k]) * du[:, k], axis=1)
    samples = acc * grid.dt + np.sum(cost_spec.Phi_x(X[:, -1]) * Y[:, -1], axis=1)
    return _mean_se(samples)


def gateaux_via_adjoint(adjoints: AdjointEnsemble, states: StateEnsemble, direction,
                        problem: ControlProblem):
    """E∫(H_u(t, X, u, p, q, r), v - u) dt with standard error."""
    du = _delta(direction, states)
    Hu = hamiltonian_u_path(states, adjoints, problem)
    return _mean_se(np.sum(Hu * du, axis=(1, 2)) * states.grid.dt)


@dataclass(frozen=True)
class DualityReport:
    lhs: float
    rhs: float
    gap: float
    stderr: float  # of the pathwise difference

    def as_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "gap": self.gap, "stderr": self.stderr}


def duality_check(states: StateEnsemble, Y: np.ndarray, adjoints: AdjointEnsemble,
                  problem: ControlProblem, direction) -> DualityReport:
    """Compare E[(Φ_x, Y_T)] + E∫(l_x, Y) with E∫(v - u, b_u^T p + g_u^T q + Σ ν σ_u^T r)."""
    du = _delta(direction, states)
    X, U, grid = states.values, states.controls, states.grid
    c, cs, marks = problem.coeffs, problem.cost, problem.marks
    M = X.shape[0]
    lhs = np.sum(cs.Phi_x(X[:, -1]) * Y[:, -1], axis=1)
    rhs = np.zeros(M)
    for k in range(grid.steps):
        t, Xk, uk = grid.times[k], X[:, k], U[:, k]
        lhs = lhs + grid.dt * np.sum(cs.l_x(t, Xk, uk) * Y[:, k], axis=1)
        g = (np.einsum("pji,pj->pi", _batch(c.b_u(t, Xk, uk), M), adjoints.p[:, k])
             + np.einsum("pji,pj->pi", _batch(c.g_u(t, Xk, uk), M), adjoints.q[:, k])
             + np.einsum("m,pmji,pmj->pi", marks.weights, c.jump_u(t, Xk, uk, marks),
                         adjoints.r[:, k]))
        rhs += grid.dt * np.sum(g * du[:, k], axis=1)
    l_mean, r_mean = float(lhs.mean()), float(rhs.mean())
    _, se = _mean_se(lhs - rhs)
    return DualityReport(l_mean, r_mean, abs(l_mean - r_mean), se)


def finite_difference_gradient(problem: ControlProblem, states: StateEnsemble, direction,
                               noise: NoiseEnsemble, eps: float = 1e-3):
    """Central difference of the cost along u + ε(v - u), common noise.

    The base control is frozen as its realised (adapted) process so the
    perturbation is a convex variation of the control process, not of a law.
    """
    du = _delta(direction, states)
    grid = noise.grid
    samples = []
    for s in (+1, -1):
        law = ControlLaw.tabulated(grid, states.controls + s * eps * du, problem.state_dim)
        samples.append(pathwise_cost(simulate(problem, law, noise), problem.cost))
    return _mean_se((samples[0] - samples[1]) / (2 * eps))


def _box_projection(U, lower, upper):
    if lower is not None:
        U = np.maximum(U, lower)
    if upper is not None:
        U = np.minimum(U, upper)
    return U


def smp_residual(states: StateEnsemble, adjoints: AdjointEnsemble, problem: ControlProblem
                 ) -> float:
    """E∫|H_u|^2 dt, or E∫|u - Proj(u - H_u)|^2 dt when the control set is a box."""
    Hu = hamiltonian_u_path(states, adjoints, problem)
    if problem.lower is not None or problem.upper is not None:
        U = states.controls
        Hu = U - _box_projection(U - Hu, problem.lower, problem.upper)
    return float(np.mean(np.sum(Hu**2, axis=(1, 2))) * states.grid.dt)


def minimum_condition_sign(states, adjoints, problem, candidates):
    """E∫(H_u, v - ū) dt with standard error for each admissible v in ``candidates``."""
    return [gateaux_via_adjoint(adjoints, states, v, problem) for v in candidates]


# optimizers ------------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    J: float
    stderr: float
    residual: float
    step: float


@dataclass
class OptimizationResult:
    control: ControlLaw
    trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def final_J(self):
        return self.trace[-1].J


def _evaluate(problem, control, noise, basis):
    states = simulate(problem, control, noise)
    adj = solve_bsee_regression(states, problem.A, problem.B, problem.coeffs, problem.cost,
                                noise, basis)
    J, se = cost(states, problem.cost)
    return states, adj, J, se


def hamiltonian_minimizer(states, adjoints, problem, h: float = 1e-4) -> np.ndarray:
    """Pathwise argmin_u H via one Newton step, exact when H is quadratic in u.

    The Hessian in u is built by differencing H_u; the minimiser is then
    projected onto the control box (exact for Hessians that are multiples of I).
    """
    X, U, grid = states.values, states.controls, states.grid
    d = problem.control_dim
    out = np.empty_like(U)
    for k in range(grid.steps):
        t, Xk, uk = grid.times[k], X[:, k], U[:, k]
        args = (adjoints.p[:, k], adjoints.q[:, k], adjoints.r[:, k], problem.coeffs,
                problem.cost, problem.marks)
        g0 = hamiltonian(t, Xk, uk, *args).grad_u
        H = np.empty((Xk.shape[0], d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            H[:, :, j] = (hamiltonian(t, Xk, uk + e, *args).grad_u
                          - hamiltonian(t, Xk, uk - e, *args).grad_u) / (2 * h)
        step = np.linalg.solve(H, g0[:, :, None])[:, :, 0]
        out[:, k] = uk - step
    return _box_projection(out, problem.lower, problem.upper)


def _fit_feedback(states, target, prev: ControlLaw):
    """Per-step least squares of ``target`` on (1, X_k) -> (gains, offsets).

    Steps where the state does not vary across paths (the deterministic
    start) keep the gain of the following step and fit the offset only.
    """
    X, grid = states.values, states.grid
    n, d, N = grid.steps, prev.control_dim, prev.state_dim
    gains = np.empty((n, d, N))
    offsets = np.empty((n, d))
    pending = []
    for k in range(n):
        Xk = X[:, k]
        spread = np.ptp(Xk, axis=0) > 1e-12 * (1 + np.max(np.abs(Xk), axis=0))
        if not np.all(spread):
            pending.append(k)
            continue
        F = np.hstack([np.ones((Xk.shape[0], 1)), Xk])
        coef = np.linalg.lstsq(F, target[:, k], rcond=None)[0]
        offsets[k], gains[k] = coef[0], coef[1:].T
    for k in reversed(pending):
        gains[k] = gains[k + 1] if k + 1 < n else (prev.gains[k] if prev.gains is not None else 0)
        offsets[k] = np.mean(target[:, k] - X[:, k] @ gains[k].T, axis=0)
    return gains, offsets


def _project_to_class(states, target, prev: ControlLaw) -> ControlLaw:
    box = prev.box
    if prev.kind == "linear_feedback":
        gains, offsets = _fit_feedback(states, target, prev)
        return ControlLaw.linear_feedback(prev.grid, gains, offsets, **box)
    if prev.kind == "open_loop":
        return ControlLaw.open_loop(prev.grid, target.mean(axis=0), prev.state_dim, **box)
    return ControlLaw.tabulated(prev.grid, target, prev.state_dim, **box)


def _blend(a: ControlLaw, b: ControlLaw, beta: float, states=None) -> ControlLaw:
    box = a.box
    if a.kind == "linear_feedback":
        return ControlLaw.linear_feedback(a.grid, (1 - beta) * a.gains + beta * b.gains,
                                          (1 - beta) * a.offsets + beta * b.offsets, **box)
    if a.kind == "open_loop":
        return ControlLaw.open_loop(a.grid, (1 - beta) * a.values + beta * b.values,
                                    a.state_dim, **box)
    # tabulated: blend the realised processes
    return ControlLaw.tabulated(a.grid, (1 - beta) * states.controls + beta * b.values,
                                a.state_dim, **box)


def optimize_hamiltonian_iteration(problem: ControlProblem, u0: ControlLaw, noise: NoiseEnsemble,
                                   damping: float = 0.5, max_outer: int = 50, tol: float = 1e-6,
                                   basis: RegressionBasis = RegressionBasis()
                                   ) -> OptimizationResult:
    """Damped fixed-point iteration on the minimum condition.

    forward under u_k -> adjoint -> pathwise argmin of H -> fit in u_k's class
    -> u_{k+1} = (1 - β) u_k + β fit. Stops once the relative change in J and
    the stationarity residual are both below ``tol``.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    u = u0
    if u.kind == "tabulated":
        # iterate on the realised process; the table is re-read on the same noise
        pass
    result = OptimizationResult(u)
    increases = 0
    prev_J = None
    for it in range(max_outer + 1):
        states, adj, J, se = _evaluate(problem, u, noise, basis)
        res = smp_residual(states, adj, problem)
        result.trace.append(TraceRow(it, J, se, res, damping if it else 0.0))
        result.control = u
        log.debug("hamiltonian iteration %d: J=%.6g residual=%.3g", it, J, res)
        if prev_J is not None:
            if J > prev_J + 1e-12 * abs(prev_J):
                increases += 1
                if increases >= 3:
                    raise OptimizationError("cost increased on 3 consecutive iterations",
                                            result.trace)
            else:
                increases = 0
            if abs(prev_J - J) <= tol * (1 + abs(J)) and res <= tol:
                result.converged = True
                break
        elif res <= tol * 1e-3:
            result.converged = True
            break
        if it == max_outer:
            break
        prev_J = J
        target = hamiltonian_minimizer(states, adj, problem)
        fit = _project_to_class(states, target, u)
        u = _blend(u, fit, damping, states)
    return result


def _spread(Xk):
    return np.all(np.ptp(Xk, axis=0) > 1e-12 * (1 + np.max(np.abs(Xk), axis=0)))


def _class_gradient(states, Hu, u: ControlLaw):
    """Pathwise H_u projected in L² onto the control class.

    For affine feedback this is the per-step least-squares fit of H_u on
    (1, X_k), i.e. E[H_u ⊗ (1, X)] preconditioned by the feature Gram
    matrix. Steps with a deterministic state only move the offset.
    """
    if u.kind == "linear_feedback":
        X = states.values[:, :-1]
        n, d, N = u.gains.shape
        g_gain, g_off = np.zeros((n, d, N)), np.empty((n, d))
        for k in range(n):
            if _spread(X[:, k]):
                F = np.hstack([np.ones((X.shape[0], 1)), X[:, k]])
                coef = np.linalg.lstsq(F, Hu[:, k], rcond=None)[0]
                g_off[k], g_gain[k] = coef[0], coef[1:].T
            else:
                g_off[k] = Hu[:, k].mean(axis=0)
        return g_gain, g_off
    if u.kind == "open_loop":
        return Hu.mean(axis=0)
    return Hu


def _align_degenerate(law: ControlLaw, states) -> ControlLaw:
    """Re-express deterministic-state steps with the next step's gain (same control values)."""
    X = states.values[:, :-1]
    gains, offsets = law.gains.copy(), law.offsets.copy()
    for k in range(law.grid.steps - 2, -1, -1):
        if not _spread(X[:, k]):
            x = X[0, k]
            offsets[k] += (gains[k] - gains[k + 1]) @ x
            gains[k] = gains[k + 1]
    return ControlLaw.linear_feedback(law.grid, gains, offsets, **law.box)


def _step(u: ControlLaw, grad, gamma, states):
    box = u.box
    if u.kind == "linear_feedback":
        law = ControlLaw.linear_feedback(u.grid, u.gains - gamma * grad[0],
                                         u.offsets - gamma * grad[1], **box)
        return _align_degenerate(law, states)
    if u.kind == "open_loop":
        vals = _box_projection(u.values - gamma * grad, u.lower, u.upper)
        return ControlLaw.open_loop(u.grid, vals, u.state_dim, **box)
    vals = _box_projection(states.controls - gamma * grad, u.lower, u.upper)
    return ControlLaw.tabulated(u.grid, vals, u.state_dim, **box)


def _grad_norm(grad):
    if isinstance(grad, tuple):
        return float(np.sqrt(sum(np.sum(g**2) for g in grad)))
    return float(np.sqrt(np.sum(grad**2)))


def optimize_projected_gradient(problem: ControlProblem, u0: ControlLaw, noise: NoiseEnsemble,
                                step: float = 1.0, max_iter: int = 200, tol: float = 1e-6,
                                shrink: float = 0.5, grow: float = 2.0, min_step: float = 1e-12,
                                stall_residual: float = 1e-3,
                                basis: RegressionBasis = RegressionBasis()
                                ) -> OptimizationResult:
    """u <- Proj(u - γ Ĝ) with Ĝ the class-projected H_u and backtracking on J.

    Trial steps start from the last accepted γ times ``grow``; a trial is
    accepted when J decreases on the common noise. If backtracking runs below
    ``min_step`` the run aborts, unless the stationarity residual is already
    below ``stall_residual``: then the sampled cost is minimal to Monte Carlo
    resolution and the run is reported as converged.
    """
    u = u0
    states, adj, J, se = _evaluate(problem, u, noise, basis)
    res = smp_residual(states, adj, problem)
    result = OptimizationResult(u, [TraceRow(0, J, se, res, 0.0)])
    gamma = step
    for it in range(1, max_iter + 1):
        Hu = hamiltonian_u_path(states, adj, problem)
        grad = _class_gradient(states, Hu, u)
        if _grad_norm(grad) == 0:
            result.converged = True
            break
        stalled = False
        while True:
            if gamma < min_step:
                if res <= stall_residual:
                    stalled = True
                    break
                raise OptimizationError(f"step size underflow (gamma={gamma:.3g})", result.trace)
            cand = _step(u, grad, gamma, states)
            c_states = simulate(problem, cand, noise)
            cJ, cse = cost(c_states, problem.cost)
            # a decrease at rounding level is not progress
            if cJ < J - 64 * np.finfo(float).eps * (1 + abs(J)):
                break
            gamma *= shrink
        if stalled:
            result.converged = True
            break
        c_adj = solve_bsee_regression(c_states, problem.A, problem.B, problem.coeffs,
                                      problem.cost, noise, basis)
        res = smp_residual(c_states, c_adj, problem)
        dJ = J - cJ
        u, states, adj, J = cand, c_states, c_adj, cJ
        result.control = u
        result.trace.append(TraceRow(it, J, cse, res, gamma))
        log.debug("projected gradient %d: J=%.6g residual=%.3g gamma=%.3g", it, J, res, gamma)
        # J stagnating also counts: the class-projected direction is not the
        # exact gradient of the sampled cost, so it cannot push J further.
        if dJ <= tol * (1 + abs(J)) or res <= tol:
            result.converged = True
            break
        gamma *= grow
    return result


# verification ----------------------------------------------------------------

@dataclass
class VerificationReport:
    convexity: dict
    stationarity: dict
    optimality: dict

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in (self.convexity, self.stationarity, self.optimality))

    def as_dict(self):
        return {"convexity": self.convexity, "stationarity": self.stationarity,
                "optimality": self.optimality, "passed": self.passed}


def random_perturbations(grid, control_dim, count, seed, amplitude=0.3):
    """Smooth random open-loop directions d(t) = a + b sin(πt/T) + c cos(πt/T)."""
    rng = np.random.default_rng(seed)
    s = grid.times[:-1] / grid.horizon
    coef = amplitude * rng.standard_normal((count, 3, control_dim))
    basis = np.stack([np.ones_like(s), np.sin(np.pi * s), np.cos(np.pi * s)])  # (3, n)
    return np.einsum("cjd,jk->ckd", coef, basis)


def verification_check(problem: ControlProblem, candidate: ControlLaw, noise: NoiseEnsemble,
                       perturbation_count: int = 20, seed: int = 0, *,
                       residual_threshold: float = 1e-2, amplitude: float = 0.3,
                       convexity_probes: int = 256,
                       basis: RegressionBasis = RegressionBasis()) -> VerificationReport:
    """Check the hypotheses and conclusion of the sufficiency theorem empirically.

    (i) midpoint convexity of H in (x, u) at the candidate's adjoints and of Φ;
    (ii) stationarity residual below ``residual_threshold``;
    (iii) no random admissible perturbation lowers J by more than 3 paired
    standard errors (common noise).
    """
    states, adj, J, se = _evaluate(problem, candidate, noise, basis)
    rng = np.random.default_rng(seed)
    grid, N, d = noise.grid, problem.state_dim, problem.control_dim
    M = states.paths

    # (i)
    pk = rng.integers(M, size=convexity_probes)
    kk = rng.integers(grid.steps, size=convexity_probes)
    x1, x2 = rng.standard_normal((2, convexity_probes, N))
    u1, u2 = rng.standard_normal((2, convexity_probes, d))
    worst_h = -np.inf
    for k in np.unique(kk):
        sel = kk == k
        args = (adj.p[pk[sel], k], adj.q[pk[sel], k], adj.r[pk[sel], k],
                problem.coeffs, problem.cost, problem.marks)
        t = grid.times[k]
        H = lambda x, u: hamiltonian(t, x, u, *args).value
        mid = H(0.5 * (x1[sel] + x2[sel]), 0.5 * (u1[sel] + u2[sel]))
        gap = mid - 0.5 * (H(x1[sel], u1[sel]) + H(x2[sel], u2[sel]))
        worst_h = max(worst_h, float(np.max(gap)))
    Phi = problem.cost.Phi
    gap_phi = Phi(0.5 * (x1 + x2)) - 0.5 * (Phi(x1) + Phi(x2))
    worst_phi = float(np.max(gap_phi))
    scale = 1e-9 * (1 + abs(J))
    convexity = {"worst_hamiltonian_gap": worst_h, "worst_terminal_gap": worst_phi,
                 "passed": bool(worst_h <= scale and worst_phi <= scale)}

    # (ii)
    res = smp_residual(states, adj, problem)
    stationarity = {"residual": res, "threshold": residual_threshold,
                    "passed": bool(res <= residual_threshold)}

    # (iii)
    base = pathwise_cost(states, problem.cost)
    dirs = random_perturbations(grid, d, perturbation_count, seed + 1, amplitude)
    rows = []
    for j, dvec in enumerate(dirs):
        vals = _box_projection(states.controls + dvec[None], problem.lower, problem.upper)
        law = ControlLaw.tabulated(grid, vals, N, **candidate.box)
        pert = pathwise_cost(simulate(problem, law, noise), problem.cost)
        diff, dse = _mean_se(pert - base)
        rows.append({"index": j, "J_perturbed": float(pert.mean()), "improvement": -diff,
                     "paired_stderr": dse, "beats_candidate": bool(-diff > 3 * dse)})
    optimality = {"J_candidate": J, "stderr": se, "perturbations": rows,
                  "passed": not any(r["beats_candidate"] for r in rows)}
    return VerificationReport(convexity, stationarity, optimality)
