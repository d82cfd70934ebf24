"""On-disk formats: state CSV and cache, optimisation traces, control files, JSON reports.

Control text format (one record per line, floats in shortest round-trip form)::

    jumpsee-control 1
    kind <open_loop|linear_feedback|tabulated>
    grid <horizon> <steps>
    dims <control_dim> <state_dim> <paths>
    lower <d floats | none>
    upper <d floats | none>
    <block name> <rows> <cols>
    <rows lines of cols floats>
    ...

Blocks: ``values`` (open_loop: steps x d; tabulated: paths*steps x d, path
major), ``gains`` (steps*d x N, row-major per step) and ``offsets`` (steps x d).
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
from importlib import metadata
from pathlib import Path

import numpy as np

from .forward import StateEnsemble
from .noise import TimeGrid
from .problem import ControlLaw

CONTROL_MAGIC = "jumpsee-control 1"
STATE_MAGIC = b"JSEESTAT"
STATE_VERSION = 1


def _num(x) -> str:
    return repr(float(x))


def _finite(obj):
    # strict JSON has no NaN/Infinity literals; write them as strings
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def write_json(path, obj) -> None:
    text = json.dumps(_finite(obj), indent=2, sort_keys=True, default=_json_default,
                      allow_nan=False)
    Path(path).write_text(text + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_states_csv(path, states: StateEnsemble, max_paths: int | None = None) -> None:
    """Long format: path, step, time, coordinate, value."""
    X = states.values
    M = X.shape[0] if max_paths is None else min(max_paths, X.shape[0])
    times = states.grid.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "step", "time", "coordinate", "value"])
        for i in range(M):
            for k in range(X.shape[1]):
                for j in range(X.shape[2]):
                    w.writerow([i, k, _num(times[k]), j, _num(X[i, k, j])])


def read_states_csv(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    M, n1, N = (int(rows[:, c].max()) + 1 for c in (0, 1, 3))
    out = np.empty((M, n1, N))
    out[rows[:, 0].astype(int), rows[:, 1].astype(int), rows[:, 3].astype(int)] = rows[:, 4]
    return out


def save_states(states: StateEnsemble, path) -> None:
    """Binary cache with the same layout as the noise cache: magic, header, raw arrays."""
    header = json.dumps({"horizon": states.grid.horizon, "steps": states.grid.steps,
                         "values_shape": list(states.values.shape),
                         "controls_shape": list(states.controls.shape)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC + struct.pack("<II", STATE_VERSION, len(header)) + header)
        fh.write(np.ascontiguousarray(states.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(states.controls, dtype="<f8").tobytes())


def load_states(path) -> StateEnsemble:
    data = Path(path).read_bytes()
    if data[:8] != STATE_MAGIC:
        raise ValueError("not a state cache")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != STATE_VERSION:
        raise ValueError(f"unsupported state cache version {version}")
    head = json.loads(data[16:16 + hlen])
    off = 16 + hlen
    vs, cs = tuple(head["values_shape"]), tuple(head["controls_shape"])
    nv = int(np.prod(vs)) * 8
    values = np.frombuffer(data, "<f8", int(np.prod(vs)), off).reshape(vs).copy()
    controls = np.frombuffer(data, "<f8", int(np.prod(cs)), off + nv).reshape(cs).copy()
    return StateEnsemble(values, controls, TimeGrid(head["horizon"], head["steps"]))


TRACE_FIELDS = ("iteration", "J", "stderr", "residual", "step")


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row.iteration] + [_num(getattr(row, f)) for f in TRACE_FIELDS[1:]])


def _block(lines, name, arr):
    arr = np.asarray(arr, dtype=float)
    lines.append(f"{name} {arr.shape[0]} {arr.shape[1]}")
    lines.extend(" ".join(_num(v) for v in row) for row in arr)


def format_control(law: ControlLaw) -> str:
    n, d, N = law.grid.steps, law.control_dim, law.state_dim
    paths = law.values.shape[0] if law.kind == "tabulated" else 0
    lines = [CONTROL_MAGIC, f"kind {law.kind}",
             f"grid {_num(law.grid.horizon)} {n}", f"dims {d} {N} {paths}"]
    for name in ("lower", "upper"):
        v = getattr(law, name)
        vals = "none" if v is None else " ".join(_num(x) for x in np.broadcast_to(v, (d,)))
        lines.append(f"{name} {vals}")
    if law.kind == "open_loop":
        _block(lines, "values", law.values)
    elif law.kind == "tabulated":
        _block(lines, "values", law.values.reshape(paths * n, d))
    else:
        _block(lines, "gains", law.gains.reshape(n * d, N))
        _block(lines, "offsets", law.offsets)
    return "\n".join(lines) + "\n"


def parse_control(text: str) -> ControlLaw:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CONTROL_MAGIC:
        raise ValueError("not a control file")
    it = iter(lines[1:])

    def field(name):
        parts = next(it).split()
        if parts[0] != name:
            raise ValueError(f"expected {name!r}, found {parts[0]!r}")
        return parts[1:]

    kind = field("kind")[0]
    horizon, steps = field("grid")
    grid = TimeGrid(float(horizon), int(steps))
    d, N, paths = (int(v) for v in field("dims"))
    box = {}
    for name in ("lower", "upper"):
        vals = field(name)
        box[name] = None if vals == ["none"] else np.array([float(v) for v in vals])
    blocks = {}
    for head in it:
        if not head.strip():
            continue
        name, r, c = head.split()
        blocks[name] = np.array([[float(v) for v in next(it).split()] for _ in range(int(r))],
                                dtype=float).reshape(int(r), int(c))
    n = grid.steps
    if kind == "open_loop":
        return ControlLaw.open_loop(grid, blocks["values"], N, **box)
    if kind == "tabulated":
        return ControlLaw.tabulated(grid, blocks["values"].reshape(paths, n, d), N, **box)
    if kind == "linear_feedback":
        return ControlLaw.linear_feedback(grid, blocks["gains"].reshape(n, d, N),
                                          blocks["offsets"], **box)
    raise ValueError(f"unknown control kind {kind!r}")


def write_control(path, law: ControlLaw) -> None:
    Path(path).write_text(format_control(law))


def read_control(path) -> ControlLaw:
    return parse_control(Path(path).read_text())


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(canon.encode()).hexdigest()


def _version(name):
    try:
        return metadata.version(name)
    except metadata.PackageNotFoundError:
        return "unknown"


def manifest(payload: dict, seed: int, command: str) -> dict:
    """Everything needed to reproduce a run. No timestamps or thread counts."""
    import numpy
    import scipy
    return {"command": command, "config_hash": config_hash(payload), "seed": seed,
            "config": payload,
            "versions": {"jumpsee": _version("artifact"), "numpy": numpy.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()}}
