"""Shared builders for the test-suite."""
import numpy as np

from jumpsee.adjoint import solve_riccati_lq
from jumpsee.cauchy import CauchyConfig, build_cauchy_problem, gamma_matrices
from jumpsee.noise import MarkSpace, TimeGrid, sample_noise
from jumpsee.problem import ControlProblem, linear_coefficients, quadratic_cost
from jumpsee.triple import GalerkinSpace, OperatorProcess

ACCEPTANCE = {}


def lq_setup(steps=128, paths=10_000, seed=0, **kw):
    """CANON-LQ (or a variant): config, problem, Riccati oracle, noise."""
    cfg = CauchyConfig(steps=steps, paths=paths, seed=seed, **kw)
    pr = build_cauchy_problem(cfg)
    ric = solve_riccati_lq(pr.space, pr.A, pr.B, gamma_matrices(cfg), pr.marks, pr.grid)
    noise = sample_noise(pr.grid, pr.marks, paths, seed)
    return cfg, pr, ric, noise


def scalar_problem(A=0.0, B=0.0, x0=1.0, steps=64, horizon=1.0, marks=(), cost=None,
                   **coeff_kw):
    """One-mode abstract problem with constant operators and affine coefficients."""
    grid = TimeGrid(horizon, steps)
    space = GalerkinSpace.abstract([1.0])
    ms = MarkSpace.from_weights(list(marks))
    coeffs = linear_coefficients(1, 1, marks=ms, **coeff_kw)
    return ControlProblem(space, OperatorProcess.constant([[A]], grid, space),
                          OperatorProcess.constant([[B]], grid, space, "VH"), coeffs,
                          cost or quadratic_cost(), np.array([x0], float), ms)


def record(criterion, passed, detail):
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed
