"""Brownian increments and marked compound-Poisson counts on a uniform grid.

Every random number used by the solvers comes from :func:`sample_noise`.
Each Monte Carlo path owns two Philox streams keyed by ``(seed, channel,
path)``, so an ensemble is bit-identical no matter how many worker threads
generate it.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_BROWNIAN = 0
_JUMPS = 1
_MAGIC = b"JSEENOIS"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.steps >= 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark space: atoms ``e_i`` carrying intensity ``nu_i``."""

    atoms: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if len(self.atoms) != w.size:
            raise ValueError("atoms and weights differ in length")
        if len(set(self.atoms)) != len(self.atoms):
            raise ValueError("mark atoms must be distinct")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("mark weights must be positive and finite")

    @classmethod
    def from_weights(cls, weights) -> "MarkSpace":
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        return cls(tuple(range(w.size)), w)

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    grid: TimeGrid
    marks: MarkSpace
    paths: int
    dw: np.ndarray  # (paths, steps)
    jump_counts: np.ndarray  # (paths, steps, marks)
    seed: int
    _compensated: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dw = np.asarray(self.dw, dtype=float)
        counts = np.asarray(self.jump_counts, dtype=np.int64)
        n, m = self.grid.steps, self.marks.size
        if dw.shape != (self.paths, n):
            raise ValueError(f"dw has shape {dw.shape}, expected {(self.paths, n)}")
        if counts.shape != (self.paths, n, m):
            raise ValueError(f"jump_counts has shape {counts.shape}, expected {(self.paths, n, m)}")
        if not np.all(np.isfinite(dw)):
            raise ValueError("non-finite Brownian increment")
        if np.any(counts < 0):
            raise ValueError("negative jump count")
        dw.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "dw", dw)
        object.__setattr__(self, "jump_counts", counts)
        comp = counts - self.marks.weights * self.grid.dt
        comp.setflags(write=False)
        object.__setattr__(self, "_compensated", comp)

    @property
    def compensated(self) -> np.ndarray:
        """Compensated counts ``dN_{k,i} - nu_i dt``, shape (paths, steps, marks)."""
        return self._compensated

    def subset(self, paths) -> "NoiseEnsemble":
        idx = np.arange(self.paths)[paths]
        return NoiseEnsemble(self.grid, self.marks, idx.size, self.dw[idx],
                             self.jump_counts[idx], self.seed)

    def same_as(self, other: "NoiseEnsemble") -> bool:
        return (self.grid == other.grid and self.paths == other.paths
                and self.seed == other.seed
                and np.array_equal(self.marks.weights, other.marks.weights)
                and np.array_equal(self.dw, other.dw)
                and np.array_equal(self.jump_counts, other.jump_counts))


def _path_streams(seed, channel, path):
    key = [seed, (channel << 40) | path]
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, 0]))


def _fill(seed, grid, nu_dt, lo, hi, dw, counts):
    sd = np.sqrt(grid.dt)
    for i in range(lo, hi):
        dw[i] = sd * _path_streams(seed, _BROWNIAN, i).standard_normal(grid.steps)
        counts[i] = _path_streams(seed, _JUMPS, i).poisson(nu_dt, size=(grid.steps, nu_dt.size))


def sample_noise(grid: TimeGrid, marks: MarkSpace, paths: int, seed: int,
                 threads: int = 1) -> NoiseEnsemble:
    """Draw ``paths`` independent realisations of (dW, dN) on ``grid``.

    ``threads`` only changes how the work is split; the result does not
    depend on it.
    """
    if paths < 1:
        raise ValueError(f"paths must be >= 1, got {paths}")
    if not 0 <= seed < 2**63:
        raise ValueError("seed must be a non-negative 63-bit integer")
    if paths >= 2**40:
        raise ValueError("too many paths for the stream key layout")
    dw = np.empty((paths, grid.steps))
    counts = np.empty((paths, grid.steps, marks.size), dtype=np.int64)
    nu_dt = marks.weights * grid.dt
    threads = max(1, min(int(threads), paths))
    if threads == 1:
        _fill(seed, grid, nu_dt, 0, paths, dw, counts)
    else:
        bounds = np.linspace(0, paths, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            futs = [pool.submit(_fill, seed, grid, nu_dt, lo, hi, dw, counts)
                    for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futs:
                f.result()
    return NoiseEnsemble(grid, marks, paths, dw, counts, seed)


def compensated_increment(ensemble: NoiseEnsemble, path: int, step: int) -> np.ndarray:
    if not 0 <= path < ensemble.paths:
        raise IndexError(f"path {path} out of range [0, {ensemble.paths})")
    if not 0 <= step < ensemble.grid.steps:
        raise IndexError(f"step {step} out of range [0, {ensemble.grid.steps})")
    return ensemble.compensated[path, step].copy()


def antithetic_pair(ensemble: NoiseEnsemble) -> NoiseEnsemble:
    """Mirror the Brownian increments; jump counts are left untouched."""
    return NoiseEnsemble(ensemble.grid, ensemble.marks, ensemble.paths,
                         -ensemble.dw, ensemble.jump_counts, ensemble.seed)


def coarsen(ensemble: NoiseEnsemble, factor: int) -> NoiseEnsemble:
    """Aggregate ``factor`` consecutive steps, giving coupled coarse noise."""
    n = ensemble.grid.steps
    if factor < 1 or n % factor:
        raise ValueError(f"cannot coarsen {n} steps by {factor}")
    grid = TimeGrid(ensemble.grid.horizon, n // factor)
    dw = ensemble.dw.reshape(ensemble.paths, grid.steps, factor).sum(axis=2)
    counts = ensemble.jump_counts.reshape(ensemble.paths, grid.steps, factor, -1).sum(axis=2)
    return NoiseEnsemble(grid, ensemble.marks, ensemble.paths, dw, counts, ensemble.seed)


# Binary cache: 8-byte magic, u32 format version, u32 header length,
# UTF-8 JSON header, then dw as little-endian float64 (paths x steps,
# row-major) and jump_counts as little-endian int64 (paths x steps x marks).

def save_noise(ensemble: NoiseEnsemble, path) -> None:
    header = json.dumps({
        "horizon": ensemble.grid.horizon,
        "steps": ensemble.grid.steps,
        "atoms": [str(a) for a in ensemble.marks.atoms],
        "weights": ensemble.marks.weights.tolist(),
        "paths": ensemble.paths,
        "seed": ensemble.seed,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(ensemble.dw, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.jump_counts, dtype="<i8").tobytes())


def load_noise(path) -> NoiseEnsemble:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a noise cache file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    header = json.loads(raw[16:16 + hlen])
    grid = TimeGrid(header["horizon"], header["steps"])
    marks = MarkSpace(tuple(header["atoms"]), np.array(header["weights"]))
    m, n = header["paths"], grid.steps
    off = 16 + hlen
    ndw = m * n * 8
    dw = np.frombuffer(raw, dtype="<f8", count=m * n, offset=off).reshape(m, n)
    counts = np.frombuffer(raw, dtype="<i8", count=m * n * marks.size,
                           offset=off + ndw).reshape(m, n, marks.size)
    return NoiseEnsemble(grid, marks, m, dw.astype(float), counts.astype(np.int64),
                         header["seed"])
