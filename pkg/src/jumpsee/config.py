"""Experiment configuration: strict schema, YAML or JSON on disk.

Top-level keys: ``schema_version`` (must be 1), global run settings
(``seed``, ``paths``, ``steps``, ``horizon``), a ``problem`` section, an
optional ``control`` section, and one optional section per subcommand.
Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .cauchy import CauchyConfig, CauchySetup, Tolerances, build_cauchy_problem
from .noise import MarkSpace, TimeGrid
from .problem import ControlLaw, ControlProblem, CostSpec, linear_coefficients, quadratic_cost
from .triple import GalerkinSpace, OperatorProcess

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Matrix = list[list[float]]


class LinearProblem(_Strict):
    """Abstract-space linear problem: dX = (A X + Fx X + Fu u + f0) dt + ... ."""

    kind: Literal["linear"] = "linear"
    state_dim: int = Field(1, ge=1, le=64)
    control_dim: int = Field(1, ge=1, le=64)
    v_weights: list[float] | None = None
    A: Matrix | None = None
    B: Matrix | None = None
    drift_x: Matrix | None = None
    drift_u: Matrix | None = None
    diffusion_x: Matrix | None = None
    diffusion_u: Matrix | None = None
    drift_0: list[float] | None = None
    diffusion_0: list[float] | None = None
    mark_weights: list[float] = []
    jump_x: list[Matrix] | None = None
    jump_u: list[Matrix] | None = None
    jump_0: list[list[float]] | None = None
    x0: list[float] = [1.0]
    state_weight: float = 1.0
    control_weight: float = 1.0
    terminal_weight: float = 1.0
    lower: list[float] | None = None
    upper: list[float] | None = None

    @model_validator(mode="after")
    def _shapes(self):
        N, d, m = self.state_dim, self.control_dim, len(self.mark_weights)
        shapes = {"A": (N, N), "B": (N, N), "drift_x": (N, N), "drift_u": (N, d),
                  "diffusion_x": (N, N), "diffusion_u": (N, d)}
        for name, shape in shapes.items():
            v = getattr(self, name)
            if v is not None and np.shape(v) != shape:
                raise ValueError(f"{name} must have shape {list(shape)}")
        for name, shape in (("jump_x", (m, N, N)), ("jump_u", (m, N, d)), ("jump_0", (m, N))):
            v = getattr(self, name)
            if v is not None and np.shape(v) != shape:
                raise ValueError(f"{name} must have shape {list(shape)} (one entry per mark)")
        for name, size in (("x0", N), ("drift_0", N), ("diffusion_0", N), ("v_weights", N),
                           ("lower", d), ("upper", d)):
            v = getattr(self, name)
            if v is not None and len(v) != size:
                raise ValueError(f"{name} must have {size} entries")
        if any(w <= 0 for w in self.mark_weights):
            raise ValueError("mark weights must be positive")
        if self.v_weights is not None and any(w < 1 for w in self.v_weights):
            raise ValueError("V-weights must be >= 1")
        return self


class CauchyProblem(CauchySetup):
    kind: Literal["cauchy"] = "cauchy"


ProblemConfig = Annotated[Union[LinearProblem, CauchyProblem], Field(discriminator="kind")]


class ControlConfig(_Strict):
    """zero, constant open-loop ``value``, constant feedback ``gain``/``offset``, or riccati."""

    kind: Literal["zero", "open_loop", "linear_feedback", "riccati"] = "zero"
    value: list[float] | None = None
    gain: Matrix | None = None
    offset: list[float] | None = None


class SimulateSection(_Strict):
    export_paths: int = Field(10, ge=0)
    picard: bool = False
    rho_steps: int = Field(4, ge=1)
    picard_tol: float = Field(1e-8, gt=0)
    max_ratio: float | None = None  # optional pass/fail bound on the empirical K


class CoercivityAudit(_Strict):
    probe_count: int = Field(64, ge=1)
    lambda_cap: float = 100.0
    alpha_max: float | None = None


class LipschitzAudit(_Strict):
    probe_count: int = Field(256, ge=1)


class ItoAudit(_Strict):
    steps: list[int] = [32, 64, 128, 256]
    min_slope: float = 0.4


class DependenceAudit(_Strict):
    deltas: list[float] = [0.1, 0.05, 0.025]
    target_slope: float = 2.0
    slope_tol: float = 0.1


class AuditSection(_Strict):
    coercivity: CoercivityAudit | None = CoercivityAudit()
    lipschitz: LipschitzAudit | None = LipschitzAudit()
    ito: ItoAudit | None = ItoAudit()
    dependence: DependenceAudit | None = None


class OptimizeSection(_Strict):
    method: Literal["hamiltonian", "gradient", "both"] = "hamiltonian"
    control_class: Literal["open_loop", "linear_feedback", "tabulated"] = "linear_feedback"
    damping: float = Field(0.5, gt=0, le=1)
    max_outer: int = Field(30, ge=1)
    max_iter: int = Field(100, ge=1)
    tol: float = Field(1e-6, gt=0)
    initial_step: float = Field(1.0, gt=0)
    min_step: float = Field(1e-12, gt=0)
    verify: bool = True
    perturbations: int = Field(20, ge=0)
    residual_threshold: float = 1e-2
    oracle_rel: float = 0.01  # only used for Cauchy problems (Riccati oracle)


class Example8Section(_Strict):
    perturbations: int = Field(20, ge=0)
    optimizer: Literal["hamiltonian", "gradient", "both"] = "hamiltonian"
    damping: float = Field(0.5, gt=0, le=1)
    max_outer: int = Field(30, ge=1)
    optimizer_tol: float = 1e-6
    tolerances: Tolerances = Tolerances()


class ExperimentConfig(_Strict):
    schema_version: Literal[1]
    seed: int = Field(0, ge=0)
    paths: int = Field(1000, ge=2)
    steps: int = Field(128, ge=1)
    horizon: float = Field(1.0, gt=0)
    problem: ProblemConfig = CauchyProblem()
    control: ControlConfig = ControlConfig()
    simulate: SimulateSection = SimulateSection()
    audit: AuditSection = AuditSection()
    optimize: OptimizeSection = OptimizeSection()
    example8: Example8Section = Example8Section()

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.steps)

    def cauchy_config(self) -> CauchyConfig:
        if not isinstance(self.problem, CauchyProblem):
            raise ConfigError("this command needs a problem of kind 'cauchy'")
        fields = self.problem.model_dump(exclude={"kind"})
        fields.update(self.example8.model_dump())
        return CauchyConfig(**fields, horizon=self.horizon, steps=self.steps,
                            paths=self.paths, seed=self.seed)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate; ``seed`` overrides the file's seed. Raises ConfigError."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if seed is not None:
        raw = {**raw, "seed": seed}
    return parse_config(raw)


def parse_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}"
                 for e in exc.errors()]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None


# problem construction -----------------------------------------------------------

def _linear_problem(p: LinearProblem, grid: TimeGrid) -> ControlProblem:
    N, d = p.state_dim, p.control_dim
    weights = np.ones(N) if p.v_weights is None else np.asarray(p.v_weights, float)
    space = GalerkinSpace.abstract(weights)
    A = OperatorProcess.constant(np.zeros((N, N)) if p.A is None else p.A, grid, space, "VV*")
    B = OperatorProcess.constant(np.zeros((N, N)) if p.B is None else p.B, grid, space, "VH")
    marks = MarkSpace.from_weights(p.mark_weights) if p.mark_weights else MarkSpace.from_weights([])
    f0 = None if p.drift_0 is None else (lambda t, v=np.asarray(p.drift_0): v)
    g0 = None if p.diffusion_0 is None else (lambda t, v=np.asarray(p.diffusion_0): v)
    s0 = None if p.jump_0 is None else (lambda t, i, v=np.asarray(p.jump_0): v[i])
    coeffs = linear_coefficients(N, d, drift_x=p.drift_x, drift_u=p.drift_u,
                                 diffusion_x=p.diffusion_x, diffusion_u=p.diffusion_u,
                                 jump_x=p.jump_x, jump_u=p.jump_u, marks=marks,
                                 drift_0=f0, diffusion_0=g0, jump_0=s0)
    cost: CostSpec = quadratic_cost(p.state_weight, p.control_weight, p.terminal_weight)
    box = {k: None if v is None else np.asarray(v, float)
           for k, v in (("lower", p.lower), ("upper", p.upper))}
    return ControlProblem(space, A, B, coeffs, cost, np.asarray(p.x0, float), marks,
                          meta={"kind": "linear"}, **box)


def build_problem(cfg: ExperimentConfig, validate: bool = True) -> ControlProblem:
    if isinstance(cfg.problem, CauchyProblem):
        return build_cauchy_problem(cfg.cauchy_config(), validate=validate)
    return _linear_problem(cfg.problem, cfg.grid)


def build_control(cfg: ExperimentConfig, problem: ControlProblem, riccati=None) -> ControlLaw:
    c, grid = cfg.control, problem.grid
    d, N = problem.control_dim, problem.state_dim
    box = {"lower": problem.lower, "upper": problem.upper}
    if c.kind == "zero":
        return ControlLaw.zero(grid, d, N, **box)
    if c.kind == "open_loop":
        if c.value is None or len(c.value) != d:
            raise ConfigError(f"control.value needs {d} entries")
        return ControlLaw.open_loop(grid, np.tile(c.value, (grid.steps, 1)), N, **box)
    if c.kind == "linear_feedback":
        if c.gain is None or np.shape(c.gain) != (d, N):
            raise ConfigError(f"control.gain needs shape [{d}, {N}]")
        off = np.zeros(d) if c.offset is None else np.asarray(c.offset, float)
        return ControlLaw.linear_feedback(grid, np.asarray(c.gain, float),
                                          np.tile(off, (grid.steps, 1)), **box)
    if riccati is None:
        raise ConfigError("control kind 'riccati' needs a problem of kind 'cauchy'")
    return riccati.control_law(**box)
