import numpy as np
import pytest

from _support import lq_setup, scalar_problem
from jumpsee.forward import (BlowUpError, PicardDivergence, SingularStepError,
                             continuous_dependence_experiment, ensemble_m2_distance,
                             estimate_apriori, ito_energy_audit, simulate, solve_forward,
                             solve_forward_picard)
from jumpsee.noise import MarkSpace, TimeGrid, coarsen, sample_noise
from jumpsee.problem import ControlLaw, derivative_consistency, linear_coefficients, shifted

NONE = MarkSpace.from_weights([])


def _noise(problem, paths=4, seed=0):
    return sample_noise(problem.grid, problem.marks, paths, seed)


def _zero(problem):
    return problem.zero_control()


@pytest.fixture(scope="module")
def lq_small():
    return lq_setup(steps=64, paths=2000, seed=3)


def test_constant_path():
    pr = scalar_problem(x0=0.7, steps=16)
    st = simulate(pr, _zero(pr), _noise(pr))
    np.testing.assert_array_equal(st.values, 0.7)
    assert st.values.shape == (4, 17, 1)


def test_canon_a_first_order():
    errs = []
    for n in (16, 32, 64, 128):
        pr = scalar_problem(A=-1.0, steps=n)
        X = simulate(pr, _zero(pr), _noise(pr, 1)).terminal[0, 0]
        err = abs(X - np.exp(-1))
        assert err <= 2 * pr.grid.dt
        errs.append(err)
    slope = np.polyfit(np.log([16, 32, 64, 128]), np.log(errs), 1)[0]
    assert abs(slope + 1) < 0.1


def test_canon_j_exact_compensated_poisson():
    pr = scalar_problem(steps=50, marks=[1.0], jump_0=lambda t, i: np.ones(1), x0=0.0)
    noise = _noise(pr, 200, 4)
    st = simulate(pr, _zero(pr), noise)
    expected = np.cumsum(noise.jump_counts[:, :, 0], axis=1) - pr.grid.times[1:]
    assert np.max(np.abs(st.values[:, 1:, 0] - expected)) <= 1e-12


def test_singular_step_reported():
    pr = scalar_problem(A=4.0, steps=4)  # I - dt A = 0
    with pytest.raises(SingularStepError):
        simulate(pr, _zero(pr), _noise(pr))


def test_blow_up_reported():
    pr = scalar_problem(steps=200, drift_x=[[200.0]])
    with pytest.raises(BlowUpError):
        simulate(pr, _zero(pr), _noise(pr))


def test_dimension_mismatch_rejected():
    pr = scalar_problem(steps=4)
    other = sample_noise(TimeGrid(1.0, 8), NONE, 2, 0)
    with pytest.raises(ValueError):
        simulate(pr, _zero(pr), other)


def test_linear_coefficients_derivatives_consistent():
    rng = np.random.default_rng(0)
    marks = MarkSpace.from_weights([1.0, 2.0])
    c = linear_coefficients(3, 2, drift_x=rng.standard_normal((3, 3)),
                            drift_u=rng.standard_normal((3, 2)),
                            diffusion_x=rng.standard_normal((3, 3)),
                            jump_x=[rng.standard_normal((3, 3)) for _ in range(2)],
                            jump_u=[rng.standard_normal((3, 2)) for _ in range(2)], marks=marks)
    assert derivative_consistency(c, 3, marks) <= 1e-5


def test_picard_linear_converges_in_one_iteration():
    pr = scalar_problem(A=-1.0, steps=32, B=0.3)
    noise = _noise(pr, 50)
    ref = simulate(pr, _zero(pr), noise)
    st, trace = solve_forward_picard(pr.space, pr.A, pr.B, pr.coeffs, _zero(pr), pr.x0, noise)
    assert all(it == 1 for it in trace.iterations)
    np.testing.assert_array_equal(st.values, ref.values)


def test_picard_matches_euler_on_canon_lq(lq_small):
    _, pr, ric, noise = lq_small
    law = ric.control_law()
    ref = simulate(pr, law, noise)
    st, trace = solve_forward_picard(pr.space, pr.A, pr.B, pr.coeffs, law, pr.x0, noise,
                                     tol=1e-10)
    assert ensemble_m2_distance(st.values, ref.values, pr.grid.dt) <= 1e-8
    assert 0 < trace.contraction_ratio < 1


def test_picard_divergence_reported(lq_small):
    _, pr, ric, noise = lq_small
    with pytest.raises(PicardDivergence):
        solve_forward_picard(pr.space, pr.A, pr.B, pr.coeffs, ric.control_law(), pr.x0,
                             noise, tol=1e-14, max_iter=2)


def test_ito_audit_zero_coefficients():
    pr = scalar_problem(steps=8)
    noise = _noise(pr)
    st = simulate(pr, _zero(pr), noise)
    assert ito_energy_audit(st, pr.A, pr.B, pr.coeffs, noise, 0) == 0.0


def _audit_slope(make, paths, seed=0):
    steps = [32, 64, 128, 256]
    res = []
    for n in steps:
        pr, law = make(n)
        noise = sample_noise(pr.grid, pr.marks, paths, seed)
        st = simulate(pr, law, noise)
        res.append(np.sqrt(np.mean(ito_energy_audit(st, pr.A, pr.B, pr.coeffs, noise) ** 2)))
    return np.polyfit(np.log(1 / np.array(steps)), np.log(res), 1)[0]


def test_ito_audit_deterministic_rate():
    def make(n):
        pr = scalar_problem(A=-1.0, steps=n)
        return pr, _zero(pr)
    assert abs(_audit_slope(make, 1) - 1) < 0.1


def test_ito_audit_canon_lq_rate():
    def make(n):
        _, pr, ric, _ = lq_setup(steps=n, paths=2)
        return pr, ric.control_law()
    assert _audit_slope(make, 2000) >= 0.4


def test_estimate_zero_data():
    pr = scalar_problem(A=-1.0, B=0.5, x0=0.0, steps=16)
    st = simulate(pr, _zero(pr), _noise(pr, 10))
    rep = estimate_apriori(st, pr.space, pr.coeffs, pr.marks, pr.x0)
    assert rep.sup_h_sq == 0 and rep.int_v_sq == 0 and rep.driver_mass == 0


def test_estimate_scales_quadratically():
    reps = []
    for x0 in (1.0, 3.0):
        pr = scalar_problem(A=-1.0, x0=x0, steps=32)
        st = simulate(pr, _zero(pr), _noise(pr, 10))
        reps.append(estimate_apriori(st, pr.space, pr.coeffs, pr.marks, pr.x0))
    assert reps[1].sup_h_sq == pytest.approx(9 * reps[0].sup_h_sq, rel=1e-12)
    assert reps[1].ratio == pytest.approx(reps[0].ratio, rel=1e-12)
    assert all(v >= 0 for r in reps for v in r.as_dict().values())


def test_estimate_ratio_stable_in_paths():
    ratios = []
    for M in (1000, 10_000):
        _, pr, ric, noise = lq_setup(steps=32, paths=M, seed=1)
        st = simulate(pr, ric.control_law(), noise)
        ratios.append(estimate_apriori(st, pr.space, pr.coeffs, pr.marks, pr.x0).ratio)
    assert np.isfinite(ratios).all()
    assert abs(ratios[1] / ratios[0] - 1) < 0.2


def test_dependence_zero_shift(lq_small):
    _, pr, ric, noise = lq_small
    res = continuous_dependence_experiment(pr, ric.control_law(), lambda d: (pr.coeffs, pr.x0),
                                           [0.0], noise)
    assert res.rows[0]["sup_h_sq"] == 0 and res.rows[0]["int_v_sq"] == 0


def test_dependence_drift_shift_slope(lq_small):
    _, pr, ric, noise = lq_small
    N = pr.state_dim
    res = continuous_dependence_experiment(
        pr, ric.control_law(),
        lambda d: (shifted(pr.coeffs, drift_shift=d * np.ones(N) / np.sqrt(N)), pr.x0),
        [0.1, 0.05, 0.025], noise)
    assert abs(res.slope_sup - 2) <= 0.1
    assert abs(res.slope_int - 2) <= 0.1
    for row in res.rows:
        assert row["data_term"] == pytest.approx(row["delta"] ** 2, rel=1e-12)


def test_dependence_initial_shift_linear():
    _, pr, _, noise = lq_setup(steps=32, paths=500, seed=2, modes=3, x0=[1.0, 0.5, -0.2])
    h = np.ones(3) / np.sqrt(3)
    law = ControlLaw.open_loop(pr.grid, np.full((32, 3), 0.2), 3)
    res = continuous_dependence_experiment(pr, law, lambda d: (pr.coeffs, pr.x0 + d * h),
                                           [0.1, 0.05, 0.025], noise)
    scaled = [r["sup_h_sq"] / r["delta"] ** 2 for r in res.rows]
    assert max(scaled) / min(scaled) - 1 < 0.05


def test_strong_convergence_order():
    fine = 256
    _, pr_f, _, noise_f = lq_setup(steps=fine, paths=2000, seed=5)
    smooth = lambda grid: ControlLaw.open_loop(
        grid, 0.5 * np.sin(np.pi * grid.times[:-1])[:, None], pr_f.state_dim)
    sols = {}
    for n in (16, 32, 64, 128, 256):
        noise = coarsen(noise_f, fine // n)
        _, pr, _, _ = lq_setup(steps=n, paths=2)
        sols[n] = solve_forward(pr.space, pr.A, pr.B, pr.coeffs, smooth(pr.grid), pr.x0,
                                noise).values
    ns = [16, 32, 64, 128]
    diffs = [np.sqrt(np.mean((sols[2 * n][:, ::2] - sols[n]) ** 2)) for n in ns]
    slope = np.polyfit(np.log(1 / np.array(ns)), np.log(diffs), 1)[0]
    assert slope >= 0.45
