"""Backward adjoint equation: regression solver and the Riccati oracle.

The regression solver is the exact discrete adjoint of the forward Euler
scheme: p_{k+1} is first pulled back through (I - dt A(t_{k+1}))^{-T}, then
conditional expectations given X_k are replaced by least-squares fits on
polynomial features of X_k.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import StateEnsemble, _Stepper
from .noise import MarkSpace, NoiseEnsemble, TimeGrid
from .problem import _batch
from .triple import GalerkinSpace, OperatorProcess


class RegressionError(RuntimeError):
    def __init__(self, step, cond):
        super().__init__(f"regression basis is rank deficient at step {step} "
                         f"(condition number {cond:.3g})")
        self.step, self.cond = step, cond


@dataclass(frozen=True, eq=False)
class AdjointEnsemble:
    p: np.ndarray  # (M, n+1, N)
    q: np.ndarray  # (M, n, N)
    r: np.ndarray  # (M, n, m, N)
    diagnostics: dict = field(default_factory=dict)

    def path(self, i):
        return AdjointEnsemble(self.p[i:i + 1], self.q[i:i + 1], self.r[i:i + 1])


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial features of the state: affine (degree 1) or quadratic (degree 2).

    ``method="joint"`` fits p_{k+1} on features x (1, dW, dÑ_1, ..., dÑ_m) in
    one least-squares problem, reading q and r off the noise-weighted blocks.
    ``method="projection"`` regresses (p_{k+1} - p̂) dW / dt and
    (p_{k+1} - p̂) dÑ_i / (ν_i dt) on the features separately.
    """

    degree: int = 1
    method: str = "joint"
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        if self.method not in ("joint", "projection"):
            raise ValueError(f"unknown regression method {self.method!r}")

    def features(self, X: np.ndarray) -> np.ndarray:
        M, N = X.shape
        cols = [np.ones((M, 1)), X]
        if self.degree == 2:
            iu = np.triu_indices(N)
            cols.append((X[:, :, None] * X[:, None, :])[:, iu[0], iu[1]])
        return np.hstack(cols)


def _reduced_features(basis, X, step):
    F = basis.features(X)
    # Features that do not vary across paths (e.g. a deterministic X_0)
    # carry no information beyond the intercept.
    spread = np.ptp(F[:, 1:], axis=0) > 1e-12 * (1 + np.max(np.abs(F[:, 1:]), axis=0))
    F = np.hstack([F[:, :1], F[:, 1:][:, spread]])
    s = np.linalg.svd(F / np.sqrt(F.shape[0]), compute_uv=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    if cond > basis.cond_limit:
        raise RegressionError(step, cond)
    return F, cond


def _fit(F, Y):
    coef = np.linalg.lstsq(F, Y, rcond=None)[0]
    return F @ coef


def _regress_step(basis, F, pt, dw, comp, dt, nus):
    M, nf = F.shape
    m = comp.shape[1]
    if basis.method == "projection":
        p_hat = _fit(F, pt)
        resid = pt - p_hat
        q = _fit(F, resid * (dw[:, None] / dt))
        r = np.stack([_fit(F, resid * (comp[:, i, None] / (nus[i] * dt))) for i in range(m)],
                     axis=1)
        return p_hat, q, r
    # Jump blocks with too few jumping paths are not identifiable jointly;
    # their r falls back to the projection estimate on the joint residual.
    jumped = np.array([np.count_nonzero(comp[:, i] > 0) for i in range(m)])
    active = [i for i in range(m) if jumped[i] > 2 * nf]
    design = [F, F * dw[:, None]] + [F * comp[:, i, None] for i in active]
    D = np.hstack(design)
    coef = np.linalg.lstsq(D, pt, rcond=None)[0]
    blocks = coef.reshape(len(design), nf, -1)
    p_hat = F @ blocks[0]
    q = F @ blocks[1]
    r = np.empty((M, m, pt.shape[1]))
    resid = pt - D @ coef
    for j, i in enumerate(active):
        r[:, i] = F @ blocks[2 + j]
    for i in set(range(m)) - set(active):
        r[:, i] = _fit(F, resid * (comp[:, i, None] / (nus[i] * dt)))
    return p_hat, q, r


def solve_bsee_regression(states: StateEnsemble, A: OperatorProcess, B: OperatorProcess,
                          coeffs, cost, noise: NoiseEnsemble,
                          basis: RegressionBasis = RegressionBasis()) -> AdjointEnsemble:
    """Step the adjoint equation backward from p_n = Φ_x(X_n).

    With p̃ = (I - dt A(t_{k+1}))^{-T} p_{k+1}:
      p̂_k = E[p̃ | X_k], q_k = E[p̃ dW_k | X_k]/dt, r_k(e_i) = E[p̃ dÑ_{k,i} | X_k]/(ν_i dt),
      p_k = p̂_k + dt [b_x^T p̂_k + (B + g_x)^T q_k + Σ_i ν_i σ_x(e_i)^T r_k(e_i) + l_x].
    """
    X, Uc, grid, marks = states.values, states.controls, noise.grid, noise.marks
    if X.shape[0] != noise.paths:
        raise ValueError("states and noise have different path counts")
    M, n1, N = X.shape
    n, dt, m = n1 - 1, grid.dt, marks.size
    nus = marks.weights
    stepper = _Stepper(A)
    p = np.empty((M, n + 1, N))
    q = np.empty((M, n, N))
    r = np.empty((M, n, m, N))
    p[:, n] = cost.Phi_x(X[:, n])
    if not np.all(np.isfinite(p[:, n])):
        raise ValueError("non-finite terminal datum")
    conds = np.empty(n)
    comp = noise.compensated
    for k in range(n - 1, -1, -1):
        t, Xk, u = grid.times[k], X[:, k], Uc[:, k]
        pt = stepper.solve_transpose(k, p[:, k + 1])
        F, conds[k] = _reduced_features(basis, Xk, k)
        p_hat, qk, rk = _regress_step(basis, F, pt, noise.dw[:, k], comp[:, k], dt, nus)
        bx = _batch(coeffs.b_x(t, Xk, u), M)
        gx = _batch(coeffs.g_x(t, Xk, u), M)
        sx = coeffs.jump_x(t, Xk, u, marks)  # (M, m, N, N)
        driver = (np.einsum("pji,pj->pi", bx, p_hat) + qk @ B.at(k)
                  + np.einsum("pji,pj->pi", gx, qk)
                  + np.einsum("m,pmji,pmj->pi", nus, sx, rk)
                  + cost.l_x(t, Xk, u))
        p[:, k] = p_hat + dt * driver
        q[:, k], r[:, k] = qk, rk
        if not (np.all(np.isfinite(p[:, k])) and np.all(np.isfinite(qk)) and np.all(np.isfinite(rk))):
            raise ValueError(f"non-finite adjoint at step {k}")
    return AdjointEnsemble(p, q, r, {"condition_numbers": conds})


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """P(t) on the grid with p = P X, and the feedback gain Λ(t) with ū = Λ X."""

    P: np.ndarray  # (n+1, N, N)
    feedback_gain: np.ndarray  # (n+1, N, N)
    grid: TimeGrid
    value_offset: float = 0.0

    def value(self, x0) -> float:
        """Optimal cost ½ (x0, P(0) x0)_H (value function x^T (P/2) x)."""
        x0 = np.asarray(x0, dtype=float)
        return float(0.5 * x0 @ self.P[0] @ x0 + self.value_offset)

    def control_law(self, **box):
        from .problem import ControlLaw
        return ControlLaw.linear_feedback(self.grid, self.feedback_gain[:-1], **box)


def riccati_matrices(P, B, Gammas, nus):
    """M(P) = 2I + (1 + ν(E)) P and N(P) = P (I + B + Σ_i ν_i Γ_i)."""
    N = P.shape[0]
    I = np.eye(N)
    Mp = 2 * I + (1 + float(np.sum(nus))) * P
    Np = P @ (I + B + sum(nu * G for nu, G in zip(nus, Gammas)))
    return Mp, Np


def riccati_rhs(P, A, B, Gammas, nus):
    """dP/dt for the backward Riccati equation of the Cauchy LQ problem.

    -dP/dt = PA + A^T P + B^T P B + Σ ν_i Γ_i^T P Γ_i + 2I - N(P)^T M(P)^{-1} N(P)
    """
    N = P.shape[0]
    Mp, Np = riccati_matrices(P, B, Gammas, nus)
    jump = sum(nu * G.T @ P @ G for nu, G in zip(nus, Gammas))
    rhs = P @ A + A.T @ P + B.T @ P @ B + jump + 2 * np.eye(N) - Np.T @ np.linalg.solve(Mp, Np)
    return -rhs


def solve_riccati_lq(space: GalerkinSpace, A: OperatorProcess, B: OperatorProcess,
                     Gamma, marks: MarkSpace, grid: TimeGrid, substeps: int = 4
                     ) -> RiccatiSolution:
    """Integrate the Riccati equation backward from P(T) = 2I with classical RK4.

    Operators between grid times are linearly interpolated.
    """
    N = space.dim
    Gammas = [np.asarray(G, dtype=float).reshape(N, N) for G in Gamma]
    if len(Gammas) != marks.size:
        raise ValueError("need one Γ matrix per mark")
    nus = marks.weights
    n = grid.steps
    h = -grid.dt / substeps
    P = np.empty((n + 1, N, N))
    P[n] = 2 * np.eye(N)

    def f(t, Pm):
        return riccati_rhs(Pm, A.interpolate(t), B.interpolate(t), Gammas, nus)

    cur = P[n].copy()
    for k in range(n, 0, -1):
        t = grid.times[k]
        for s in range(substeps):
            ts = t + s * h
            k1 = f(ts, cur)
            k2 = f(ts + h / 2, cur + h / 2 * k1)
            k3 = f(ts + h / 2, cur + h / 2 * k2)
            k4 = f(ts + h, cur + h * k3)
            cur = cur + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            cur = 0.5 * (cur + cur.T)
        P[k - 1] = cur
    gains = np.empty_like(P)
    for k in range(n + 1):
        Mp, Np = riccati_matrices(P[k], B.at(k), Gammas, nus)
        assert np.all(np.linalg.eigvalsh(Mp) > 0), "M(P) lost positive definiteness"
        gains[k] = -np.linalg.solve(Mp, Np)
    return RiccatiSolution(P, gains, grid)


def lq_adjoint_from_riccati(ric: RiccatiSolution, states: StateEnsemble, B: OperatorProcess,
                            Gamma, marks: MarkSpace) -> AdjointEnsemble:
    """p = P X, q = P (B X + u), r(e_i) = P (Γ_i X + u) along the given states."""
    X, U = states.values, states.controls
    M, n1, N = X.shape
    Gammas = [np.asarray(G, dtype=float).reshape(N, N) for G in Gamma]
    p = np.einsum("kij,pkj->pki", ric.P, X)
    Xk, Pk = X[:, :-1], ric.P[:-1]
    BX = np.einsum("kij,pkj->pki", B.matrices[:-1], Xk)
    q = np.einsum("kij,pkj->pki", Pk, BX + U)
    r = np.stack([np.einsum("kij,pkj->pki", Pk, Xk @ G.T + U) for G in Gammas], axis=2)
    return AdjointEnsemble(p, q, r)


@dataclass(frozen=True)
class AdjointEstimateReport:
    sup_p_sq: float
    int_p_v_sq: float
    int_q_sq: float
    int_r_sq: float
    data: float
    ratio: float

    @property
    def lhs(self):
        return self.sup_p_sq + self.int_p_v_sq + self.int_q_sq + self.int_r_sq

    def as_dict(self):
        return {"sup_p_sq": self.sup_p_sq, "int_p_v_sq": self.int_p_v_sq,
                "int_q_sq": self.int_q_sq, "int_r_sq": self.int_r_sq,
                "lhs": self.lhs, "data": self.data, "ratio": self.ratio}


def adjoint_estimate_check(adjoints: AdjointEnsemble, states: StateEnsemble, cost,
                           space: GalerkinSpace, marks: MarkSpace,
                           eps: float = 1e-300) -> AdjointEstimateReport:
    """Monte Carlo sides of the adjoint a priori bound and their ratio."""
    grid = states.grid
    dt = grid.dt
    p, q, r = adjoints.p, adjoints.q, adjoints.r
    sup_p = float(np.mean(np.max(np.sum(p**2, axis=2), axis=1)))
    int_pv = float(np.mean(np.sum(space.v_weights * p[:, :-1] ** 2, axis=(1, 2))) * dt)
    int_q = float(np.mean(np.sum(q**2, axis=(1, 2))) * dt)
    int_r = float(np.mean(np.einsum("pkmi,m->p", r**2, marks.weights)) * dt)
    X, U = states.values, states.controls
    lx = sum(np.sum(cost.l_x(grid.times[k], X[:, k], U[:, k]) ** 2, axis=1)
             for k in range(grid.steps))
    data = float(np.mean(lx) * dt + np.mean(np.sum(cost.Phi_x(X[:, -1]) ** 2, axis=1)))
    lhs = sup_p + int_pv + int_q + int_r
    return AdjointEstimateReport(sup_p, int_pv, int_q, int_r, data, lhs / max(data, eps))


def relative_rms(a, b) -> float:
    """|a - b| / |b| in the ensemble root-mean-square sense."""
    a, b = np.asarray(a), np.asarray(b)
    den = np.sqrt(np.mean(b**2))
    return float(np.sqrt(np.mean((a - b) ** 2)) / den) if den > 0 else float(np.sqrt(np.mean(a**2)))
