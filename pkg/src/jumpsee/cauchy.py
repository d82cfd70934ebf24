"""Controlled divergence-form Cauchy problem with quadratic cost.

State: dy = [∂(a∂y) + b∂y + cy + u] dt + [∂(ηy) + ρy + u] dW + ∫ [Γ(e) y + u] μ̃(de, dt),
cost: E∫ (|y|² + |u|²) dt + E|y(T)|². Here U = H, so the control has one
coordinate per Galerkin mode, and the optimal control is
ū = -½ (p + q + Σ_i ν_i r_i).
"""
from __future__ import annotations

import logging
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import (BaseModel, BeforeValidator, ConfigDict, Field, field_validator,
                      model_validator)

from .adjoint import (RegressionBasis, lq_adjoint_from_riccati, relative_rms,
                      solve_bsee_regression, solve_riccati_lq)
from .control import (cost, optimize_hamiltonian_iteration,
                      optimize_projected_gradient, smp_residual, verification_check)
from .forward import simulate
from .noise import MarkSpace, TimeGrid, sample_noise
from .problem import ControlProblem, linear_coefficients, quadratic_cost
from .triple import (OperatorProcess, assemble_divergence_operator, assemble_noise_operator,
                     build_fourier_space, check_coercivity, check_superparabolic)

log = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ConstantCoefficient(_Strict):
    kind: Literal["constant"] = "constant"
    value: float

    def __call__(self, t, z):
        return np.full(np.shape(z), self.value)

    def sup(self):
        return abs(self.value)


class CosineCoefficient(_Strict):
    """mean + amplitude cos(2π wavenumber z / L)."""

    kind: Literal["cosine"] = "cosine"
    mean: float
    amplitude: float
    wavenumber: int = 1
    domain_length: float = 2 * np.pi

    def __call__(self, t, z):
        return self.mean + self.amplitude * np.cos(
            2 * np.pi * self.wavenumber * np.asarray(z) / self.domain_length)

    def sup(self):
        return abs(self.mean) + abs(self.amplitude)


class PiecewiseTimeCoefficient(_Strict):
    """values[j] on [breaks[j-1], breaks[j]), constant in z."""

    kind: Literal["piecewise_t"] = "piecewise_t"
    breaks: list[float]
    values: list[float]

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.values) != len(self.breaks) + 1:
            raise ValueError("piecewise_t needs len(values) == len(breaks) + 1")
        if any(b1 >= b2 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ValueError("piecewise_t breaks must increase")
        return self

    def __call__(self, t, z):
        j = int(np.searchsorted(self.breaks, t, side="right"))
        return np.full(np.shape(z), self.values[j])

    def sup(self):
        return max(abs(v) for v in self.values)


def _number_as_constant(v):
    # a bare number in a config means a constant coefficient
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return {"kind": "constant", "value": v}
    return v


Coefficient = Annotated[Union[ConstantCoefficient, CosineCoefficient, PiecewiseTimeCoefficient],
                        Field(discriminator="kind"), BeforeValidator(_number_as_constant)]


def _const(v):
    return ConstantCoefficient(value=v)


class Tolerances(_Strict):
    cost_rel: float = 0.02  # MC cost vs analytic value, on top of 3 stderr
    adjoint_rel: float = 0.05
    closed_form_riccati: float = 1e-10
    closed_form_regression: float = 0.05
    residual: float = 1e-2
    optimizer_rel: float = 0.01
    gain_rel: float = 0.05
    transpose: float = 1e-12


class CauchySetup(_Strict):
    """Coefficients, marks and initial datum of the Cauchy problem."""

    modes: int = Field(1, ge=1, le=64)
    domain_length: float = Field(2 * np.pi, gt=0)
    a: Coefficient = _const(1.0)
    b_drift: Coefficient = _const(0.0)
    c: Coefficient = _const(-1.0)
    eta: Coefficient = _const(0.0)
    rho: Coefficient = _const(0.5)
    gamma: list[float] = [0.1]
    mark_atoms: list[float] | None = None
    mark_weights: list[float] = [1.0]
    x0: list[float] = [1.0]
    kappa: float = 0.5
    K: float = 10.0
    coercivity_probes: int = Field(64, ge=1)
    lambda_cap: float = 100.0

    @field_validator("mark_weights")
    @classmethod
    def _positive(cls, v):
        if not v or any(w <= 0 for w in v):
            raise ValueError("mark weights must be positive")
        return v

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.gamma) != len(self.mark_weights):
            raise ValueError("need one gamma per mark atom")
        if self.mark_atoms is not None and len(self.mark_atoms) != len(self.mark_weights):
            raise ValueError("mark_atoms and mark_weights differ in length")
        if len(self.x0) != self.dim:
            raise ValueError(f"x0 has {len(self.x0)} coordinates, the space has {self.dim}")
        for name in ("a", "b_drift", "c", "eta", "rho"):
            coef = getattr(self, name)
            if isinstance(coef, CosineCoefficient) and coef.domain_length != self.domain_length:
                raise ValueError(f"cosine coefficient {name} has a different period "
                                 "than the domain")
        return self

    @property
    def dim(self) -> int:
        return self.modes

    @property
    def marks(self) -> MarkSpace:
        if self.mark_atoms is None:
            return MarkSpace.from_weights(self.mark_weights)
        return MarkSpace(np.asarray(self.mark_atoms), np.asarray(self.mark_weights))


class CauchyConfig(CauchySetup):
    """Problem plus run settings for the end-to-end pipeline. Defaults give CANON-LQ."""

    horizon: float = Field(1.0, gt=0)
    steps: int = Field(128, ge=1)
    paths: int = Field(10_000, ge=2)
    seed: int = Field(0, ge=0)
    perturbations: int = Field(20, ge=0)
    optimizer: Literal["hamiltonian", "gradient", "both"] = "hamiltonian"
    damping: float = Field(0.5, gt=0, le=1)
    max_outer: int = Field(30, ge=1)
    optimizer_tol: float = 1e-6
    tolerances: Tolerances = Tolerances()

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)


class ValidationFailure(ValueError):
    def __init__(self, message, details):
        super().__init__(message)
        self.details = details


def validate_config(config: CauchyConfig, A=None, B=None, space=None) -> dict:
    """Super-parabolicity, coefficient bounds and coercivity; raises ValidationFailure."""
    grid = config.grid
    details = {}
    details["superparabolic"] = check_superparabolic(
        config.a, config.eta, config.kappa, grid, 8 * config.dim + 64,
        domain_length=config.domain_length, K=config.K)
    sups = {n: getattr(config, n).sup() for n in ("a", "b_drift", "c", "eta", "rho")}
    sups["gamma"] = max(abs(g) for g in config.gamma)
    details["coefficient_sup"] = sups
    details["bounded"] = all(v <= config.K for v in sups.values())
    if not details["superparabolic"]:
        raise ValidationFailure("super-parabolic condition fails", details)
    if not details["bounded"]:
        raise ValidationFailure(f"coefficient bound exceeds K={config.K}", details)
    if A is not None:
        rep = check_coercivity(A, B, space, grid, config.coercivity_probes, config.seed,
                               lambda_cap=config.lambda_cap)
        details["coercivity"] = rep.as_dict()
        if not rep.satisfied:
            raise ValidationFailure("coercivity check fails", details)
    return details


def _operators(config: CauchyConfig):
    space = build_fourier_space(1, config.modes, config.domain_length)
    grid = config.grid
    A = assemble_divergence_operator(config.a, config.b_drift, config.c, space, grid)
    B = assemble_noise_operator(config.eta, config.rho, space, grid)
    return space, A, B


def gamma_matrices(config: CauchyConfig):
    return [g * np.eye(config.dim) for g in config.gamma]


def build_cauchy_problem(config: CauchyConfig, validate: bool = True) -> ControlProblem:
    """b = u, g = u, σ(e_i) = γ_i x + u, l = |x|² + |u|², Φ = |x|²."""
    space, A, B = _operators(config)
    if validate:
        validate_config(config, A, B, space)
    N, marks = space.dim, config.marks
    I = np.eye(N)
    coeffs = linear_coefficients(N, N, drift_u=I, diffusion_u=I,
                                 jump_x=gamma_matrices(config), jump_u=[I] * marks.size,
                                 marks=marks)
    return ControlProblem(space, A, B, coeffs, quadratic_cost(1.0, 1.0, 1.0),
                          np.asarray(config.x0, dtype=float), marks,
                          meta={"kind": "cauchy"})


# adjoint operators written out from the formal adjoints ------------------------

def assemble_adjoint_operators(config: CauchyConfig, space=None):
    """A*ψ = ∂(a∂ψ) - ∂(bψ) + cψ, B*ψ = -η∂ψ + ρψ, Γ*_i = γ_i, by quadrature.

    Built independently of the forward assembly so the transpose identity is
    a genuine check.
    """
    space = space or build_fourier_space(1, config.modes, config.domain_length)
    grid = config.grid
    q = max(64, 8 * space.dim + 64)
    z = np.arange(q) * space.domain_length / q
    w = space.domain_length / q
    phi, dphi = space.basis(z)
    n1, N = grid.steps + 1, space.dim
    As, Bs = np.empty((n1, N, N)), np.empty((n1, N, N))
    for k, t in enumerate(grid.times):
        av, bv, cv = (np.broadcast_to(f(t, z), z.shape)
                      for f in (config.a, config.b_drift, config.c))
        ev, rv = (np.broadcast_to(f(t, z), z.shape) for f in (config.eta, config.rho))
        # <A* φ_j, φ_i> = -∫ a φ_j' φ_i' + ∫ b φ_j φ_i' + ∫ c φ_j φ_i
        As[k] = w * (-np.einsum("z,iz,jz->ij", av, dphi, dphi)
                     + np.einsum("z,iz,jz->ij", bv, dphi, phi)
                     + np.einsum("z,iz,jz->ij", cv, phi, phi))
        # <B* φ_j, φ_i> = -∫ η φ_j' φ_i + ∫ ρ φ_j φ_i
        Bs[k] = w * (-np.einsum("z,iz,jz->ij", ev, phi, dphi)
                     + np.einsum("z,iz,jz->ij", rv, phi, phi))
    return (OperatorProcess(As, grid, space, "VV*"), OperatorProcess(Bs, grid, space, "VH"),
            gamma_matrices(config))


def transpose_gaps(problem: ControlProblem, config: CauchyConfig) -> dict:
    As, Bs, Gs = assemble_adjoint_operators(config, problem.space)
    AT = np.swapaxes(problem.A.matrices, 1, 2)
    BT = np.swapaxes(problem.B.matrices, 1, 2)
    scale = lambda m: max(1.0, float(np.max(np.abs(m))))
    return {"A": float(np.max(np.abs(As.matrices - AT))) / scale(AT),
            "B": float(np.max(np.abs(Bs.matrices - BT))) / scale(BT),
            "Gamma": max(float(np.max(np.abs(G - G.T))) for G in Gs)}


def adjoint_drift_gap(problem: ControlProblem, config: CauchyConfig, probes: int = 16,
                      seed: int = 0) -> float:
    """Max difference between the generic and the specialised adjoint drift.

    Generic: A^T p + b_x^T p + B^T q + g_x^T q + Σ ν σ_x^T r + l_x.
    Specialised: A* p + B* q + Σ ν Γ* r + 2x.
    """
    rng = np.random.default_rng(seed)
    N, marks, c = problem.state_dim, problem.marks, problem.coeffs
    As, Bs, Gs = assemble_adjoint_operators(config, problem.space)
    x, u, p, q = rng.standard_normal((4, probes, N))
    r = rng.standard_normal((probes, marks.size, N))
    worst = 0.0
    for k, t in enumerate(problem.grid.times):
        A, B = problem.A.at(k), problem.B.at(k)
        generic = (p @ A + p @ np.asarray(c.b_x(t, x, u)) + q @ B + q @ np.asarray(c.g_x(t, x, u))
                   + sum(nu * r[:, i] @ np.asarray(c.sigma_x(t, i, x, u))
                         for i, nu in enumerate(marks.weights))
                   + problem.cost.l_x(t, x, u))
        special = (p @ As.at(k).T + q @ Bs.at(k).T
                   + sum(nu * r[:, i] @ G.T for i, (nu, G) in enumerate(zip(marks.weights, Gs)))
                   + 2 * x)
        worst = max(worst, float(np.max(np.abs(generic - special))))
    return worst


def closed_form_control(p, q, r, marks: MarkSpace):
    """-½ (p + q + Σ_i ν_i r_i); r carries the mark axis second to last."""
    p, q, r = (np.asarray(a, dtype=float) for a in (p, q, r))
    return -0.5 * (p + q + np.einsum("...mi,m->...i", r, marks.weights))


def closed_form_gap(states, adjoints, marks) -> float:
    """RMS of the closed-form control minus the applied control, relative to RMS(applied)."""
    cf = closed_form_control(adjoints.p[:, :-1], adjoints.q, adjoints.r, marks)
    return relative_rms(cf, states.controls)


def feedback_gain_error(law, ric) -> float:
    return relative_rms(law.gains, ric.feedback_gain[:-1])


# end-to-end --------------------------------------------------------------------

def run_example_end_to_end(config: CauchyConfig, threads: int = 1) -> dict:
    """Run the staged pipeline and return a JSON-serialisable report.

    A failing stage is recorded and all later stages are skipped.
    """
    tol = config.tolerances
    report = {"stages": [], "passed": False}

    def stage(name, fn):
        if report["stages"] and not report["stages"][-1]["passed"]:
            report["stages"].append({"name": name, "passed": False, "skipped": True})
            return None
        try:
            out, passed = fn()
        except Exception as exc:  # recorded, not raised: the report is the output
            log.info("stage %s failed: %s", name, exc)
            details = getattr(exc, "details", None)
            report["stages"].append({"name": name, "passed": False,
                                     "error": f"{type(exc).__name__}: {exc}",
                                     **({"details": details} if details else {})})
            return None
        report["stages"].append({"name": name, "passed": bool(passed), **out["report"]})
        return out.get("value")

    ctx = {}

    def s_validate():
        space, A, B = _operators(config)
        det = validate_config(config, A, B, space)
        ctx["problem"] = build_cauchy_problem(config, validate=False)
        return {"report": {"details": det}}, True

    def s_structure():
        pr = ctx["problem"]
        gaps = transpose_gaps(pr, config)
        drift = adjoint_drift_gap(pr, config, seed=config.seed)
        ok = max(gaps.values()) <= tol.transpose and drift <= 1e-10 * (1 + pr.A.bound)
        return {"report": {"transpose_gaps": gaps, "adjoint_drift_gap": drift}}, ok

    def s_oracle():
        pr = ctx["problem"]
        ric = solve_riccati_lq(pr.space, pr.A, pr.B, gamma_matrices(config), pr.marks, pr.grid)
        ctx["ric"] = ric
        return {"report": {"P0": ric.P[0].tolist(), "value": ric.value(pr.x0),
                           "gain_T": ric.feedback_gain[-1].tolist()}}, True

    def s_simulate():
        pr, ric = ctx["problem"], ctx["ric"]
        noise = sample_noise(pr.grid, pr.marks, config.paths, config.seed, threads=threads)
        states = simulate(pr, ric.control_law(), noise)
        J, se = cost(states, pr.cost)
        ctx.update(noise=noise, states=states, J_ric=J, se_ric=se)
        gap = abs(J - ric.value(pr.x0))
        ok = gap <= 3 * se + tol.cost_rel * abs(ric.value(pr.x0))
        return {"report": {"J_mc": J, "stderr": se, "value": ric.value(pr.x0),
                           "gap": gap}}, ok

    def s_adjoint():
        pr, states, noise, ric = ctx["problem"], ctx["states"], ctx["noise"], ctx["ric"]
        adj = solve_bsee_regression(states, pr.A, pr.B, pr.coeffs, pr.cost, noise,
                                    RegressionBasis())
        ref = lq_adjoint_from_riccati(ric, states, pr.B, gamma_matrices(config), pr.marks)
        ctx.update(adj=adj, ref=ref)
        errs = {"p": relative_rms(adj.p, ref.p), "q": relative_rms(adj.q, ref.q),
                "r": relative_rms(adj.r, ref.r)}
        return {"report": {"relative_rms": errs}}, max(errs.values()) <= tol.adjoint_rel

    def s_closed_form():
        pr, states = ctx["problem"], ctx["states"]
        g_ric = closed_form_gap(states, ctx["ref"], pr.marks)
        g_reg = closed_form_gap(states, ctx["adj"], pr.marks)
        ok = g_ric <= tol.closed_form_riccati and g_reg <= tol.closed_form_regression
        return {"report": {"riccati_adjoints": g_ric, "regression_adjoints": g_reg}}, ok

    def s_residual():
        pr = ctx["problem"]
        res = smp_residual(ctx["states"], ctx["adj"], pr)
        return {"report": {"residual": res, "threshold": tol.residual}}, res <= tol.residual

    def s_verify():
        pr = ctx["problem"]
        rep = verification_check(pr, ctx["ric"].control_law(), ctx["noise"],
                                 config.perturbations, config.seed,
                                 residual_threshold=tol.residual)
        return {"report": rep.as_dict()}, rep.passed

    def s_optimize():
        pr, ric, noise = ctx["problem"], ctx["ric"], ctx["noise"]
        u0 = pr.zero_control("linear_feedback")
        out = {"J_riccati": ctx["J_ric"]}
        ok = True
        runs = {"hamiltonian": lambda: optimize_hamiltonian_iteration(
                    pr, u0, noise, config.damping, config.max_outer, config.optimizer_tol),
                "gradient": lambda: optimize_projected_gradient(
                    pr, u0, noise, max_iter=config.max_outer * 4, tol=config.optimizer_tol)}
        names = list(runs) if config.optimizer == "both" else [config.optimizer]
        for name in names:
            res = runs[name]()
            rel = (res.final_J - ctx["J_ric"]) / abs(ctx["J_ric"])
            gain = feedback_gain_error(res.control, ric)
            out[name] = {"J": res.final_J, "relative_gap": rel, "gain_rms": gain,
                         "iterations": res.trace[-1].iteration, "converged": res.converged}
            ok &= abs(rel) <= tol.optimizer_rel and gain <= tol.gain_rel
        return {"report": out}, ok

    for name, fn in [("validate", s_validate), ("structure", s_structure),
                     ("riccati_oracle", s_oracle), ("simulate", s_simulate),
                     ("adjoint", s_adjoint), ("closed_form", s_closed_form),
                     ("smp_residual", s_residual), ("verification", s_verify),
                     ("optimize", s_optimize)]:
        stage(name, fn)
    report["passed"] = all(s["passed"] for s in report["stages"])
    return report
