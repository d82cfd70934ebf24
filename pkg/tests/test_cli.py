import csv
import json
import math

import numpy as np
import pytest
import yaml

from jumpsee import artifacts
from jumpsee.cli import main
from jumpsee.forward import StateEnsemble
from jumpsee.noise import TimeGrid
from jumpsee.problem import ControlLaw

LQ_SMALL = {"schema_version": 1, "seed": 11, "paths": 2000, "steps": 64}
LINEAR = {"schema_version": 1, "seed": 0, "paths": 50, "steps": 16,
          "problem": {"kind": "linear", "A": [[-1.0]], "B": [[0.2]]}}


def run(tmp_path, cfg, command, *extra, name="cfg.yaml"):
    path = tmp_path / name
    text = json.dumps(cfg) if name.endswith(".json") else yaml.safe_dump(cfg)
    path.write_text(text)
    out = tmp_path / f"out_{command}"
    code = main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


def load(out, name):
    return json.loads((out / name).read_text())


def merge(base, **kw):
    return {**base, **kw}


# simulate -----------------------------------------------------------------------

def test_simulate_constant_paths(tmp_path):
    cfg = merge(LINEAR, problem={"kind": "linear", "x0": [0.7]})
    code, out = run(tmp_path, cfg, "simulate")
    assert code == 0
    X = artifacts.read_states_csv(out / "states.csv")
    assert X.shape == (10, 17, 1)
    assert np.all(X == 0.7)
    est = load(out, "estimate.json")
    assert est["passed"] and est["estimate"]["sup_h_sq"] == pytest.approx(0.49)


@pytest.mark.parametrize("steps", [64, 128])
def test_simulate_exponential_decay(tmp_path, steps):
    cfg = merge(LINEAR, steps=steps, paths=2, problem={"kind": "linear", "A": [[-1.0]]})
    code, out = run(tmp_path, cfg, "simulate")
    assert code == 0
    XT = artifacts.read_states_csv(out / "states.csv")[:, -1, 0]
    assert np.all(np.abs(XT - math.exp(-1)) <= 2 / steps)


def test_simulate_picard_matches(tmp_path):
    cfg = merge(LQ_SMALL, paths=200, steps=32, control={"kind": "riccati"},
                simulate={"picard": True, "picard_tol": 1e-10})
    code, out = run(tmp_path, cfg, "simulate")
    assert code == 0
    rep = load(out, "estimate.json")
    assert 0 < rep["picard"]["contraction_ratio"] < 0.9


def test_simulate_schema_error(tmp_path, capsys):
    code, out = run(tmp_path, merge(LINEAR, steps=0), "simulate")
    assert code == 2
    assert "steps" in capsys.readouterr().err
    assert not (out / "manifest.json").exists()


def test_unknown_keys_rejected(tmp_path, capsys):
    cfg = merge(LINEAR, problem={"kind": "linear", "A": [[-1.0]], "colour": 1})
    assert run(tmp_path, cfg, "simulate")[0] == 2
    assert "colour" in capsys.readouterr().err
    assert run(tmp_path, {k: v for k, v in LINEAR.items() if k != "schema_version"},
               "simulate")[0] == 2
    assert run(tmp_path, merge(LINEAR, schema_version=2), "simulate")[0] == 2


def test_usage_errors(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["frobnicate", "--config", "x"]) == 2
    assert main([]) == 2
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(LINEAR))
    assert main(["simulate", "--config", str(tmp_path / "c.yaml"), "--threads", "0"]) == 2
    (tmp_path / "bad.yaml").write_text("a: [1, 2")
    assert main(["simulate", "--config", str(tmp_path / "bad.yaml")]) == 2


def test_json_config_and_seed_override(tmp_path):
    code, out = run(tmp_path, LINEAR, "simulate", "--seed", "42", name="cfg.json")
    assert code == 0
    assert load(out, "manifest.json")["seed"] == 42


def test_solver_failure_exit_1(tmp_path):
    # I - dt A is singular at A = steps
    cfg = merge(LINEAR, steps=4, problem={"kind": "linear", "A": [[4.0]]})
    code, out = run(tmp_path, cfg, "simulate")
    assert code == 1
    assert "error" in load(out, "error.json")


# audit --------------------------------------------------------------------------

def test_audit_coercive_passes(tmp_path):
    cfg = merge(LQ_SMALL, paths=300, audit={"ito": {"steps": [32, 64, 128, 256]}})
    code, out = run(tmp_path, cfg, "audit")
    assert code == 0
    summary = load(out, "audit.json")
    assert summary == {"superparabolic": True, "coercivity": True, "lipschitz": True,
                       "ito": True, "passed": True}
    assert load(out, "audit_ito.json")["slope"] >= 0.4


def test_audit_coercivity_failure(tmp_path):
    cfg = merge(LINEAR, problem={"kind": "linear", "state_dim": 2, "A": [[0, 0], [0, 0]],
                                 "B": [[1, 0], [0, 1]], "x0": [1, 0]},
                audit={"coercivity": {}, "lipschitz": None, "ito": None})
    code, out = run(tmp_path, cfg, "audit")
    assert code == 1
    assert load(out, "audit_coercivity.json")["satisfied"] is False


def test_audit_dependence_slope(tmp_path):
    cfg = merge(LQ_SMALL, paths=1000, steps=32, control={"kind": "riccati"},
                audit={"coercivity": None, "lipschitz": None, "ito": None,
                       "dependence": {}})
    code, out = run(tmp_path, cfg, "audit")
    assert code == 0
    dep = load(out, "audit_dependence.json")
    assert abs(dep["slope_sup"] - 2.0) <= 0.1


# optimize -----------------------------------------------------------------------

def test_optimize_canon_lq(tmp_path):
    cfg = merge(LQ_SMALL, optimize={"perturbations": 8})
    code, out = run(tmp_path, cfg, "optimize")
    rep = load(out, "optimize.json")
    assert code == 0, rep
    ham = rep["methods"]["hamiltonian"]
    assert abs(ham["relative_gap_to_riccati"]) <= 0.01
    with open(out / "trace_hamiltonian.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[-1]["J"]) == pytest.approx(ham["J"], rel=1e-15)
    law = artifacts.read_control(out / "control_hamiltonian.txt")
    assert law.kind == "linear_feedback" and law.gains.shape == (64, 1, 1)
    assert load(out, "verification_hamiltonian.json")["passed"]


def test_optimize_zero_coupling_one_step(tmp_path):
    cfg = merge(LINEAR, optimize={"control_class": "open_loop", "perturbations": 4})
    code, out = run(tmp_path, cfg, "optimize")
    assert code == 0
    rep = load(out, "optimize.json")["methods"]["hamiltonian"]
    assert rep["converged"] and rep["iterations"] == 0


def test_optimize_step_underflow(tmp_path):
    cfg = merge(LINEAR, paths=4, steps=8,
                problem={"kind": "linear", "drift_u": [[1.0]]},
                optimize={"method": "gradient", "control_class": "open_loop",
                          "initial_step": 1e-13, "min_step": 1e-12})
    code, out = run(tmp_path, cfg, "optimize")
    assert code == 1
    rep = load(out, "optimize.json")
    assert "underflow" in rep["methods"]["gradient"]["error"]
    with open(out / "trace_gradient.csv") as fh:
        assert len(list(csv.DictReader(fh))) >= 1


# example8 -----------------------------------------------------------------------

def test_example8_default(tmp_path):
    cfg = merge(LQ_SMALL, example8={"perturbations": 8})
    code, out = run(tmp_path, cfg, "example8")
    rep = load(out, "example8_report.json")
    assert code == 0, [s for s in rep["stages"] if not s["passed"]]
    with open(out / "example8_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["stage"] for r in rows][0] == "validate"
    assert all(r["passed"] == "1" for r in rows)


def test_example8_superparabolic_violation(tmp_path):
    cfg = merge(LQ_SMALL, paths=100, problem={"kind": "cauchy", "a": 0.1, "eta": 1.0})
    code, out = run(tmp_path, cfg, "example8")
    assert code == 1
    stages = load(out, "example8_report.json")["stages"]
    assert stages[0]["name"] == "validate" and not stages[0]["passed"]
    assert all(s["skipped"] for s in stages[1:])


def test_example8_brownian_only(tmp_path):
    cfg = merge(LQ_SMALL, seed=5, example8={"perturbations": 8},
                problem={"kind": "cauchy", "gamma": [0.0], "rho": 0.0, "eta": 0.0})
    assert run(tmp_path, cfg, "example8")[0] == 0


def test_example8_needs_cauchy(tmp_path):
    assert run(tmp_path, LINEAR, "example8")[0] == 2


# artifacts ----------------------------------------------------------------------

def test_manifest_contents(tmp_path):
    code, out = run(tmp_path, LINEAR, "simulate")
    man = load(out, "manifest.json")
    assert man["command"] == "simulate" and man["seed"] == 0
    assert man["config_hash"] == artifacts.config_hash(man["config"])
    assert set(man["versions"]) == {"jumpsee", "numpy", "scipy", "python"}
    assert man["config"]["problem"]["A"] == [[-1.0]]


def _snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.mark.parametrize("command,extra", [
    ("simulate", {}),
    ("optimize", {"optimize": {"perturbations": 4, "max_outer": 5}}),
])
def test_artifacts_bit_identical(tmp_path, command, extra):
    cfg = merge(LQ_SMALL, paths=300, steps=32, control={"kind": "riccati"}, **extra)
    snaps = []
    for i, threads in enumerate(["1", "1", "8"]):
        d = tmp_path / f"r{i}"
        d.mkdir()
        run(d, cfg, command, "--threads", threads)
        snaps.append(_snapshot(d / f"out_{command}"))
    assert snaps[0] == snaps[1] == snaps[2]


def test_json_is_strict(tmp_path):
    artifacts.write_json(tmp_path / "x.json", {"a": float("nan"), "b": np.float64(1.5),
                                               "c": np.arange(2)})
    text = (tmp_path / "x.json").read_text()
    data = json.loads(text, parse_constant=lambda c: pytest.fail(f"literal {c}"))
    assert data == {"a": "nan", "b": 1.5, "c": [0, 1]}


@pytest.mark.parametrize("kind", ["open_loop", "linear_feedback", "tabulated"])
def test_control_file_round_trip(kind):
    grid = TimeGrid(1.0, 5)
    rng = np.random.default_rng(1)
    if kind == "open_loop":
        law = ControlLaw.open_loop(grid, rng.standard_normal((5, 2)), 3,
                                   lower=np.array([-1.0, -2.0]))
    elif kind == "tabulated":
        law = ControlLaw.tabulated(grid, rng.standard_normal((4, 5, 2)), 3)
    else:
        law = ControlLaw.linear_feedback(grid, rng.standard_normal((5, 2, 3)),
                                         rng.standard_normal((5, 2)))
    text = artifacts.format_control(law)
    back = artifacts.parse_control(text)
    assert back.kind == law.kind
    assert artifacts.format_control(back) == text
    for name in ("values", "gains", "offsets", "lower", "upper"):
        a, b = getattr(law, name, None), getattr(back, name, None)
        if a is None:
            assert b is None
        else:
            np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_control_file_rejects_garbage():
    with pytest.raises(ValueError):
        artifacts.parse_control("hello\n")


def test_state_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    st = StateEnsemble(rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 4, 2)),
                       TimeGrid(2.0, 4))
    artifacts.save_states(st, tmp_path / "s.bin")
    back = artifacts.load_states(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.values, st.values)
    np.testing.assert_array_equal(back.controls, st.controls)
    assert back.grid.horizon == 2.0 and back.grid.steps == 4
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        artifacts.load_states(tmp_path / "bad.bin")


def test_states_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    st = StateEnsemble(rng.standard_normal((3, 5, 2)), np.zeros((3, 4, 2)), TimeGrid(1.0, 4))
    artifacts.write_states_csv(tmp_path / "s.csv", st)
    np.testing.assert_array_equal(artifacts.read_states_csv(tmp_path / "s.csv"), st.values)
