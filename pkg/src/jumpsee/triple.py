"""Galerkin truncation of the triple V = H^1 ⊂ H = L^2 ⊂ V* on a 1-d torus.

Coordinates are taken in an H-orthonormal real Fourier basis
``{1, sin(k z), cos(k z), sin(2k z), ...}`` (normalised), so the H inner
product is the Euclidean dot product and H-adjoints are transposes. The V
structure is carried by the diagonal weights ``w_i = 1 + kappa_i**2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .noise import TimeGrid

Coefficient = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class GalerkinSpace:
    dim: int
    v_weights: np.ndarray
    domain_length: float = 2 * np.pi
    basis_kind: str = "fourier"

    def __post_init__(self):
        w = np.asarray(self.v_weights, dtype=float).reshape(-1)
        if self.dim < 1 or w.size != self.dim:
            raise ValueError("v_weights must have one entry per mode")
        if np.any(w < 1):
            raise ValueError("V-weights must be >= 1 so that |x|_H <= |x|_V")
        if self.basis_kind not in ("fourier", "abstract"):
            raise ValueError(f"unknown basis kind {self.basis_kind!r}")
        w.setflags(write=False)
        object.__setattr__(self, "v_weights", w)

    @classmethod
    def abstract(cls, weights) -> "GalerkinSpace":
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        return cls(w.size, w, 1.0, "abstract")

    @property
    def wavenumbers(self) -> np.ndarray:
        j = (np.arange(self.dim) + 1) // 2
        return 2 * np.pi * j / self.domain_length

    def h_norm(self, x):
        return np.sqrt(np.sum(np.square(x), axis=-1))

    def v_norm(self, x):
        return np.sqrt(np.sum(self.v_weights * np.square(x), axis=-1))

    def vstar_norm(self, x):
        return np.sqrt(np.sum(np.square(x) / self.v_weights, axis=-1))

    def basis(self, z: np.ndarray):
        """Basis values and z-derivatives at points ``z``, each (dim, len(z))."""
        if self.basis_kind != "fourier":
            raise ValueError("pointwise basis only exists for the Fourier kind")
        z = np.asarray(z, dtype=float)
        L = self.domain_length
        vals = np.empty((self.dim, z.size))
        ders = np.empty_like(vals)
        vals[0] = 1 / np.sqrt(L)
        ders[0] = 0.0
        amp = np.sqrt(2 / L)
        kap = self.wavenumbers
        for i in range(1, self.dim):
            k = kap[i]
            if i % 2:
                vals[i] = amp * np.sin(k * z)
                ders[i] = amp * k * np.cos(k * z)
            else:
                vals[i] = amp * np.cos(k * z)
                ders[i] = -amp * k * np.sin(k * z)
        return vals, ders


def build_fourier_space(spatial_dim: int, modes: int, domain_length: float) -> GalerkinSpace:
    if spatial_dim != 1:
        raise ValueError("only one spatial dimension is supported")
    if modes < 1:
        raise ValueError(f"need at least one mode, got {modes}")
    if not (np.isfinite(domain_length) and domain_length > 0):
        raise ValueError(f"domain length must be positive, got {domain_length}")
    j = (np.arange(modes) + 1) // 2
    kappa = 2 * np.pi * j / domain_length
    return GalerkinSpace(modes, 1 + kappa**2, float(domain_length), "fourier")


@dataclass(frozen=True, eq=False)
class OperatorProcess:
    """Deterministic operator-valued process sampled on a time grid.

    ``matrices[k]`` is the coordinate matrix at ``grid.times[k]``. ``role`` is
    ``"VV*"`` for the drift operator (norm measured V -> V*) and ``"VH"`` for
    the noise operator (V -> H).
    """

    matrices: np.ndarray
    grid: TimeGrid
    space: GalerkinSpace
    role: str = "VV*"

    def __post_init__(self):
        mats = np.array(self.matrices, dtype=float)
        n, N = self.grid.steps, self.space.dim
        if mats.ndim == 2:
            mats = np.broadcast_to(mats, (n + 1, N, N)).copy()
        if mats.shape != (n + 1, N, N):
            raise ValueError(f"operator has shape {mats.shape}, expected {(n + 1, N, N)}")
        if not np.all(np.isfinite(mats)):
            raise ValueError("non-finite operator entry")
        if self.role not in ("VV*", "VH"):
            raise ValueError(f"unknown operator role {self.role!r}")
        mats.setflags(write=False)
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def constant(cls, matrix, grid, space, role="VV*"):
        return cls(np.asarray(matrix, dtype=float), grid, space, role)

    def at(self, k: int) -> np.ndarray:
        return self.matrices[k]

    def interpolate(self, t: float) -> np.ndarray:
        """Piecewise-linear value between grid times (used by sub-stepping)."""
        s = np.clip(t / self.grid.dt, 0, self.grid.steps)
        k = min(int(np.floor(s)), self.grid.steps - 1)
        f = s - k
        return (1 - f) * self.matrices[k] + f * self.matrices[k + 1]

    @property
    def time_invariant(self) -> bool:
        return bool(np.all(self.matrices == self.matrices[0]))

    @property
    def bound(self) -> float:
        """Uniform operator norm, weighted for the operator's role."""
        s = 1 / np.sqrt(self.space.v_weights)
        scaled = self.matrices * s[None, None, :]
        if self.role == "VV*":
            scaled = scaled * s[None, :, None]
        return float(np.max(np.linalg.norm(scaled, ord=2, axis=(1, 2))))


def _quadrature(space: GalerkinSpace, points: int | None):
    # Periodic trapezoid rule: exact for trigonometric polynomials below `q`.
    q = points or max(64, 8 * space.dim + 64)
    z = np.arange(q) * space.domain_length / q
    return z, space.domain_length / q


def _eval_coeff(f: Coefficient, t: float, z: np.ndarray, name: str) -> np.ndarray:
    vals = np.broadcast_to(np.asarray(f(t, z), dtype=float), z.shape)
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"coefficient {name} is not finite at t={t}")
    return vals


def assemble_divergence_operator(a: Coefficient, b_drift: Coefficient, c: Coefficient,
                                 space: GalerkinSpace, grid: TimeGrid,
                                 quad_points: int | None = None) -> OperatorProcess:
    """Matrix of phi -> d/dz(a dphi/dz) + b dphi/dz + c phi in the Fourier basis.

    Entry (i, j) is <A phi_j, phi_i> = -∫ a phi_j' phi_i' + ∫ b phi_j' phi_i
    + ∫ c phi_j phi_i, after integrating the divergence term by parts.
    """
    z, wq = _quadrature(space, quad_points)
    phi, dphi = space.basis(z)
    mats = np.empty((grid.steps + 1, space.dim, space.dim))
    for k, t in enumerate(grid.times):
        av = _eval_coeff(a, t, z, "a")
        bv = _eval_coeff(b_drift, t, z, "b")
        cv = _eval_coeff(c, t, z, "c")
        mats[k] = wq * (-(dphi * av) @ dphi.T + (phi * bv) @ dphi.T + (phi * cv) @ phi.T)
    return OperatorProcess(mats, grid, space, "VV*")


def assemble_noise_operator(eta: Coefficient, rho: Coefficient, space: GalerkinSpace,
                            grid: TimeGrid, quad_points: int | None = None) -> OperatorProcess:
    """Matrix of phi -> d/dz(eta phi) + rho phi, i.e. -∫ eta phi_j phi_i' + ∫ rho phi_j phi_i."""
    z, wq = _quadrature(space, quad_points)
    phi, dphi = space.basis(z)
    mats = np.empty((grid.steps + 1, space.dim, space.dim))
    for k, t in enumerate(grid.times):
        ev = _eval_coeff(eta, t, z, "eta")
        rv = _eval_coeff(rho, t, z, "rho")
        mats[k] = wq * (-(dphi * ev) @ phi.T + (phi * rv) @ phi.T)
    return OperatorProcess(mats, grid, space, "VH")


def adjoint_of(op: OperatorProcess, space: GalerkinSpace | None = None) -> OperatorProcess:
    if space is not None and space.dim != op.space.dim:
        raise ValueError("operator and space dimensions differ")
    return OperatorProcess(np.swapaxes(op.matrices, 1, 2), op.grid, op.space, op.role)


@dataclass(frozen=True)
class CoercivityReport:
    alpha: float
    lambda_shift: float
    min_margin: float
    satisfied: bool

    def as_dict(self):
        return {"alpha": self.alpha, "lambda": self.lambda_shift,
                "min_margin": self.min_margin, "satisfied": self.satisfied}


def check_coercivity(A: OperatorProcess, B: OperatorProcess, space: GalerkinSpace,
                     grid: TimeGrid, probe_count: int, seed: int, *,
                     lambda_cap: float = 100.0, alpha_max: float | None = None,
                     iterations: int = 60, tol: float = 1e-10) -> CoercivityReport:
    """Search for the largest alpha with -2<Ax,x> + lam|x|_H^2 >= alpha|x|_V^2 + |Bx|_H^2.

    The needed shift for a given alpha is the worst Rayleigh quotient of
    ``A + A^T + alpha W + B^T B`` over the probe set: random unit vectors,
    the basis vectors, and the top eigenvector at each grid time. Alpha is
    bisected on ``(0, alpha_max]`` (default twice the A bound) subject to
    ``lam <= lambda_cap``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    N = space.dim
    W = np.diag(space.v_weights)
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((probe_count, N))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    base_probes = np.vstack([np.eye(N), rand])
    sym = A.matrices + np.swapaxes(A.matrices, 1, 2)
    btb = np.swapaxes(B.matrices, 1, 2) @ B.matrices
    hi = 2 * A.bound if alpha_max is None else float(alpha_max)

    def probes_for(alpha):
        S = sym + alpha * W + btb
        top = np.linalg.eigh(S)[1][:, :, -1]
        return S, np.vstack([base_probes, top])

    def needed_shift(alpha):
        S, X = probes_for(alpha)
        quad = np.einsum("pi,kij,pj->kp", X, S, X)
        return float(np.max(quad / np.sum(X**2, axis=1)))

    def feasible(alpha):
        return needed_shift(alpha) <= lambda_cap + tol

    if hi <= 0 or not feasible(min(hi, tol)):
        return CoercivityReport(0.0, float("nan"), float("-inf"), False)
    if feasible(hi):
        alpha = hi
    else:
        lo, up = 0.0, hi
        for _ in range(iterations):
            mid = 0.5 * (lo + up)
            if feasible(mid):
                lo = mid
            else:
                up = mid
        alpha = lo
    lam = max(needed_shift(alpha), 0.0)
    S, X = probes_for(alpha)
    margin = lam * np.sum(X**2, axis=1) - np.einsum("pi,kij,pj->kp", X, S, X)
    margin = float(np.min(margin / np.sum(X**2, axis=1)))
    return CoercivityReport(float(alpha), float(lam), margin,
                            bool(alpha > 0 and margin >= -tol))


def check_superparabolic(a: Coefficient, eta: Coefficient, kappa: float, grid: TimeGrid,
                         z_samples: int, *, domain_length: float = 2 * np.pi,
                         K: float | None = None, tol: float = 1e-12) -> bool:
    """Check kappa + eta^2 <= 2a (<= K when given) at sampled (t, z)."""
    if not 0 < kappa < 1:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    z = np.arange(z_samples) * domain_length / z_samples
    for t in grid.times:
        av = np.broadcast_to(np.asarray(a(t, z), dtype=float), z.shape)
        ev = np.broadcast_to(np.asarray(eta(t, z), dtype=float), z.shape)
        if np.any(kappa + ev**2 > 2 * av + tol):
            return False
        if K is not None and np.any(2 * av > K + tol):
            return False
    return True


def check_lipschitz(coeffs, space: GalerkinSpace, marks, probe_count: int, seed: int,
                    *, times=None, scale: float = 1.0) -> float:
    """Largest sampled ratio (|db|_H + |dg|_H + |dsigma|_{M^{nu,2}}) / |x - x̄|_H."""
    rng = np.random.default_rng(seed)
    N, d = space.dim, coeffs.control_dim
    if times is None:
        times = np.zeros(1)
    times = np.asarray(times, dtype=float)
    x = scale * rng.standard_normal((probe_count, N))
    xb = scale * rng.standard_normal((probe_count, N))
    u = scale * rng.standard_normal((probe_count, d))
    t = float(times[rng.integers(times.size)])
    dist = np.linalg.norm(x - xb, axis=1)
    keep = dist > np.finfo(float).eps * (1 + np.linalg.norm(x, axis=1))
    if not np.any(keep):
        return 0.0
    x, xb, u, dist = x[keep], xb[keep], u[keep], dist[keep]
    num = np.linalg.norm(coeffs.b(t, x, u) - coeffs.b(t, xb, u), axis=1)
    num += np.linalg.norm(coeffs.g(t, x, u) - coeffs.g(t, xb, u), axis=1)
    jump_sq = np.zeros(x.shape[0])
    for i, nu in enumerate(marks.weights):
        diff = coeffs.sigma(t, i, x, u) - coeffs.sigma(t, i, xb, u)
        jump_sq += nu * np.sum(diff**2, axis=1)
    num += np.sqrt(jump_sq)
    return float(np.max(num / dist))
