"""Exact stochastic simulation by the Gibson-Bruck next-reaction method.

The inner loop lives in a compiled kernel (``_ssa_kernel``) when it has
been built, otherwise in ``_ssa_py``; both produce identical results.
Set ``PEPAMOD_PURE_PYTHON=1`` to force the fallback.

Random numbers: run ``i`` of an ensemble with base seed ``s`` uses
``numpy.random.Generator(PCG64(SeedSequence(s + i)))``.  A single
:func:`simulate` call with seed ``s`` is run 0 of an ensemble based at
``s``.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _ssa_py
from .model import SpeciesRef
from .network import (
    RateError,
    ReactionNetwork,
    change_lists,
    compile_rates,
    dependency_lists,
    reactant_guards,
)

try:
    if os.environ.get("PEPAMOD_PURE_PYTHON"):
        raise ImportError("pure Python requested")
    from . import _ssa_kernel as _kernel

    COMPILED = True
except ImportError:
    _kernel = _ssa_py
    COMPILED = False

DEFAULT_GRID_POINTS = 200
DEFAULT_MAX_EVENTS = 50_000_000


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


class SimulationWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Trajectory:
    """One realisation: event times, fired reaction indices, initial state."""

    species: tuple[SpeciesRef, ...]
    actions: tuple[str, ...]
    initial: np.ndarray
    times: np.ndarray
    fired: np.ndarray
    changes: np.ndarray  # reactions x species
    end_time: float
    stalled: bool = False

    def __len__(self) -> int:
        return len(self.times)

    def deltas(self) -> np.ndarray:
        return self.changes[self.fired]

    def states(self) -> np.ndarray:
        """State after each event, shape (n_events + 1, n_species)."""
        out = np.empty((len(self.times) + 1, len(self.species)), dtype=np.int64)
        out[0] = self.initial
        if len(self.times):
            np.cumsum(self.deltas(), axis=0, out=out[1:])
            out[1:] += self.initial
        return out

    def sample(self, grid: Sequence[float]) -> np.ndarray:
        """Right-continuous step function evaluated on ``grid``."""
        idx = np.searchsorted(self.times, np.asarray(grid, dtype=float), side="right")
        return self.states()[idx]

    @property
    def final_state(self) -> np.ndarray:
        return self.states()[-1]


@dataclass
class _Moments:
    """Streaming mean and M2 with Chan's pairwise merge."""

    n: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, shape) -> "_Moments":
        return cls(0, np.zeros(shape), np.zeros(shape))

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def merge(self, other: "_Moments") -> "_Moments":
        n = self.n + other.n
        if n == 0:
            return self
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.n / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.n * other.n / n)
        return _Moments(n, mean, m2)

    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.m2)
        return self.m2 / (self.n - 1)


@dataclass(frozen=True)
class EnsembleTrace:
    """Grid-sampled ensemble means and unbiased variances."""

    times: np.ndarray
    species: tuple[SpeciesRef, ...]
    mean: np.ndarray  # grid x species
    variance: np.ndarray
    n_runs: int
    actions: tuple[str, ...] = ()
    firing_mean: Optional[np.ndarray] = None  # per reaction, counts over [0, t_end]
    firing_variance: Optional[np.ndarray] = None
    stalled_runs: int = 0
    maximum: Optional[np.ndarray] = None  # grid x species, max over runs
    seeds: tuple[int, ...] = field(default=(), compare=False)

    def column(self, species: SpeciesRef | str) -> np.ndarray:
        ref = SpeciesRef.parse(species) if isinstance(species, str) else species
        try:
            return self.mean[:, self.species.index(ref)]
        except ValueError:
            raise KeyError(f"trace has no species {ref}") from None

    def std_error(self) -> np.ndarray:
        return np.sqrt(self.variance / max(self.n_runs, 1))

    def to_csv(self, path, values: str = "mean") -> None:
        data = self.mean if values == "mean" else self.variance
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [str(s) for s in self.species])
            for t, row in zip(self.times, data):
                w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path, variance_path=None) -> "EnsembleTrace":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "time":
            raise ValueError(f"{path}: expected a header starting with 'time'")
        species = tuple(SpeciesRef.parse(h) for h in rows[0][1:])
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, len(species) + 1)
        var = np.zeros_like(data[:, 1:])
        n_runs = 1
        if variance_path is not None:
            var = cls.from_csv(variance_path).mean
        return cls(data[:, 0], species, data[:, 1:], var, n_runs)


def _kernel_inputs(network: ReactionNetwork):
    prog = compile_rates(network)
    gptr, gsp, gk = reactant_guards(network)
    cptr, csp, cd = change_lists(network)
    dptr, didx = dependency_lists(network)
    return (prog.ops, prog.args, prog.start, prog.max_stack, gptr, gsp, gk, cptr, csp, cd, dptr, didx)


def _run(network: ReactionNetwork, inputs, t_end: float, grid: np.ndarray, seed: int, record: bool,
         max_events: int, kernel=None):
    kernel = kernel or _kernel
    initial = np.asarray(network.initial, dtype=np.int64)
    try:
        return kernel.simulate(initial, *inputs, float(t_end), grid, make_rng(seed), record, int(max_events))
    except _ssa_py.KernelRateError as exc:
        raise RateError(network.reactions[exc.reaction].action, exc.reason) from None


def simulate(network: ReactionNetwork, t_end: float, seed: int = 0, *,
             max_events: int = DEFAULT_MAX_EVENTS, pure_python: bool = False) -> Trajectory:
    """Simulate one trajectory on [0, t_end]; deterministic in ``seed``."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    inputs = _kernel_inputs(network)
    times, fired, _, _, _, t_last, status, clamped = _run(
        network, inputs, t_end, np.empty(0), seed, True, max_events, _ssa_py if pure_python else None)
    if clamped:
        warnings.warn(f"{clamped} negative rate evaluations clamped to 0", SimulationWarning, stacklevel=2)
    if status == _ssa_py.STATUS_MAX_EVENTS:
        warnings.warn(f"stopped after {max_events} events at t={t_last}", SimulationWarning, stacklevel=2)
    stalled = status == _ssa_py.STATUS_STALLED
    return Trajectory(
        species=network.species,
        actions=tuple(network.actions),
        initial=np.asarray(network.initial, dtype=np.int64),
        times=times,
        fired=fired,
        changes=network.stoichiometry(),
        end_time=t_last if stalled or status == _ssa_py.STATUS_MAX_EVENTS else float(t_end),
        stalled=stalled,
    )


def record_firing_counts(trajectory: Trajectory) -> dict[str, int]:
    counts = np.bincount(trajectory.fired, minlength=len(trajectory.actions))
    return {a: int(c) for a, c in zip(trajectory.actions, counts)}


def make_grid(t_end: float, grid_step: Optional[float] = None) -> np.ndarray:
    if grid_step is None:
        return np.linspace(0.0, t_end, DEFAULT_GRID_POINTS)
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    n = int(math.floor(t_end / grid_step + 1e-9))
    return np.linspace(0.0, n * grid_step, n + 1)


def _ensemble_chunk(network: ReactionNetwork, t_end: float, grid: np.ndarray, seeds: Sequence[int],
                    max_events: int, pure_python: bool = False):
    kernel = _ssa_py if pure_python else None
    inputs = _kernel_inputs(network)
    states = _Moments.empty((len(grid), len(network.species)))
    fires = _Moments.empty(len(network.reactions))
    peak = np.full((len(grid), len(network.species)), -np.inf)
    stalled = clamped = 0
    for seed in seeds:
        _, _, samples, counts, _, _, status, c = _run(network, inputs, t_end, grid, seed, False, max_events, kernel)
        states.add(samples.astype(float))
        np.maximum(peak, samples, out=peak)
        fires.add(counts.astype(float))
        stalled += status == _ssa_py.STATUS_STALLED
        clamped += c
    return states, fires, stalled, clamped, peak


def ensemble(network: ReactionNetwork, t_end: float, grid_step: Optional[float] = None, n_runs: int = 100,
             base_seed: int = 0, *, workers: int = 1, max_events: int = DEFAULT_MAX_EVENTS,
             pure_python: bool = False) -> EnsembleTrace:
    """Mean and unbiased variance of ``n_runs`` runs sampled on a uniform grid.

    Without ``grid_step`` the grid has 200 points over [0, t_end].  Runs
    use seeds ``base_seed .. base_seed + n_runs - 1`` whatever the number
    of workers; per-worker moments are merged pairwise.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    grid = make_grid(t_end, grid_step)
    seeds = list(range(base_seed, base_seed + n_runs))
    if workers > 1 and n_runs > 1:
        chunks = [seeds[i::workers] for i in range(workers) if seeds[i::workers]]
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_ensemble_chunk, [network] * len(chunks), [t_end] * len(chunks),
                                  [grid] * len(chunks), chunks, [max_events] * len(chunks),
                                  [pure_python] * len(chunks)))
    else:
        parts = [_ensemble_chunk(network, t_end, grid, seeds, max_events, pure_python)]
    states, fires, stalled, clamped, peak = parts[0]
    for s, f, st, c, pk in parts[1:]:
        states, fires = states.merge(s), fires.merge(f)
        stalled += st
        clamped += c
        peak = np.maximum(peak, pk)
    if clamped:
        warnings.warn(f"{clamped} negative rate evaluations clamped to 0", SimulationWarning, stacklevel=2)
    return EnsembleTrace(
        times=grid,
        species=network.species,
        mean=states.mean,
        variance=states.variance(),
        n_runs=n_runs,
        actions=tuple(network.actions),
        firing_mean=fires.mean,
        firing_variance=fires.variance(),
        stalled_runs=int(stalled),
        maximum=peak,
        seeds=tuple(seeds),
    )


def final_states(network: ReactionNetwork, t_end: float, n_runs: int, base_seed: int = 0,
                 max_events: int = DEFAULT_MAX_EVENTS) -> np.ndarray:
    """State at ``t_end`` of each run, shape (n_runs, n_species)."""
    inputs = _kernel_inputs(network)
    grid = np.array([float(t_end)])
    out = np.empty((n_runs, len(network.species)), dtype=np.int64)
    for i in range(n_runs):
        out[i] = _run(network, inputs, t_end, grid, base_seed + i, False, max_events)[2][0]
    return out


def derive_max_amounts(trace: EnsembleTrace, step_sizes: dict[SpeciesRef, float],
                       sigmas: float = 3.0) -> dict[SpeciesRef, float]:
    """Maximum amounts for level abstraction from an ensemble.

    The maximum over the grid of mean + ``sigmas`` standard errors of the
    mean, capped by the largest amount any run reached at that grid point,
    rounded up to a multiple of the species' step size.
    """
    upper = trace.mean + sigmas * trace.std_error()
    if trace.maximum is not None:
        upper = np.minimum(upper, trace.maximum)
    out: dict[SpeciesRef, float] = {}
    for ref, h in step_sizes.items():
        col = upper[:, trace.species.index(ref)]
        peak = float(col.max())
        levels = max(1, math.ceil(peak / h - 1e-9))
        out[ref] = levels * h
    return out
