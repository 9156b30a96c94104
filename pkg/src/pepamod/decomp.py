"""Decomposition of a reaction network into modules.

A module is a named set of reactions; its species are the participants of
those reactions.  Relative to a module, a species is local when no other
module touches it, an external regulator when other modules only use it
as activator, inhibitor or modifier, and an external reagent when some
other module consumes or produces it.  External reagents need an
environment stub before the module can be analysed on its own.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import yaml

from .model import (
    BioPepaSystem,
    Instance,
    MassAction,
    Name,
    PrefixTerm,
    Role,
    SpeciesComponent,
    SpeciesRef,
    cooperate,
    free_names,
)
from .network import Reaction, ReactionNetwork
from .ssa import EnsembleTrace


class DecompositionError(Exception):
    pass


# --- partitions -------------------------------------------------------------


@dataclass(frozen=True)
class ModulePartition:
    """Assignment of reactions to modules, modules kept in declaration order."""

    assignment: Mapping[str, str]
    modules: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.modules:
            order = list(dict.fromkeys(self.assignment.values()))
            object.__setattr__(self, "modules", tuple(order))

    @classmethod
    def from_modules(cls, modules: Mapping[str, Iterable[str]]) -> "ModulePartition":
        assignment: dict[str, str] = {}
        for name, reactions in modules.items():
            for r in reactions:
                if r in assignment:
                    raise DecompositionError(f"reaction {r} assigned to both {assignment[r]} and {name}")
                assignment[r] = name
        return cls(assignment, tuple(modules))

    @classmethod
    def single(cls, network: ReactionNetwork, name: str = "all") -> "ModulePartition":
        return cls.from_modules({name: network.actions})

    @classmethod
    def load(cls, path) -> "ModulePartition":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        modules = data.get("modules")
        if not isinstance(modules, dict):
            raise DecompositionError(f"{path}: expected a 'modules' mapping")
        return cls.from_modules({str(k): [str(r) for r in (v or [])] for k, v in modules.items()})

    def to_dict(self) -> dict:
        return {"modules": {m: self.reactions(m) for m in self.modules}}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def reactions(self, module: str) -> list[str]:
        if module not in self.modules:
            raise KeyError(f"unknown module {module}")
        return [r for r, m in self.assignment.items() if m == module]

    def module_of(self, action: str) -> str:
        return self.assignment[action]

    def merge(self, a: str, b: str, name: Optional[str] = None) -> "ModulePartition":
        """Partition with modules ``a`` and ``b`` replaced by their union."""
        name = name or f"{a}+{b}"
        assignment = {r: (name if m in (a, b) else m) for r, m in self.assignment.items()}
        modules = []
        for m in self.modules:
            target = name if m in (a, b) else m
            if target not in modules:
                modules.append(target)
        return ModulePartition(assignment, tuple(modules))

    def check(self, network: ReactionNetwork) -> None:
        """Every reaction in exactly one module and no unknown reactions."""
        actions = set(network.actions)
        missing = [a for a in network.actions if a not in self.assignment]
        unknown = sorted(set(self.assignment) - actions)
        problems = []
        if missing:
            problems.append("unassigned reactions: " + ", ".join(missing))
        if unknown:
            problems.append("unknown reactions: " + ", ".join(unknown))
        if problems:
            raise DecompositionError("; ".join(problems))

    def module_species(self, network: ReactionNetwork, module: str) -> list[SpeciesRef]:
        touched: set[SpeciesRef] = set()
        for a in self.reactions(module):
            touched |= network.reaction(a).participants()
        return [s for s in network.species if s in touched]


# --- classification ---------------------------------------------------------


class SpeciesClass(Enum):
    LOCAL = "Local"
    EXTERNAL_REGULATOR = "ExternalRegulator"
    EXTERNAL_REAGENT = "ExternalReagent"


@dataclass(frozen=True)
class ClassEntry:
    kind: SpeciesClass
    foreign_modules: frozenset[str] = frozenset()


SpeciesClassification = dict[str, dict[SpeciesRef, ClassEntry]]


def _changes(r: Reaction, s: SpeciesRef) -> bool:
    return any(x == s for x, _ in r.reactants) or any(x == s for x, _ in r.products)


def classify_species(network: ReactionNetwork, partition: ModulePartition) -> SpeciesClassification:
    partition.check(network)
    out: SpeciesClassification = {}
    for module in partition.modules:
        table: dict[SpeciesRef, ClassEntry] = {}
        for s in partition.module_species(network, module):
            foreign = [r for r in network.reactions
                       if partition.module_of(r.action) != module and s in r.participants()]
            mods = frozenset(partition.module_of(r.action) for r in foreign)
            if not foreign:
                kind = SpeciesClass.LOCAL
            elif any(_changes(r, s) for r in foreign):
                kind = SpeciesClass.EXTERNAL_REAGENT
            else:
                kind = SpeciesClass.EXTERNAL_REGULATOR
            table[s] = ClassEntry(kind, mods)
        out[module] = table
    return out


def format_classification(classification: SpeciesClassification) -> str:
    lines = []
    for module, table in classification.items():
        lines.append(f"module {module}")
        width = max((len(str(s)) for s in table), default=7)
        for s, entry in table.items():
            others = ", ".join(sorted(entry.foreign_modules)) or "-"
            lines.append(f"  {str(s):<{width}}  {entry.kind.value:<17}  {others}")
    return "\n".join(lines)


# --- environment stubs ------------------------------------------------------


class StubStrategy(Enum):
    FIXED_INITIAL = "FixedInitial"
    ZERO_ORDER_CREATION = "ZeroOrderCreation"
    FIRST_ORDER_DEGRADATION = "FirstOrderDegradation"


@dataclass(frozen=True)
class EnvironmentStub:
    species: SpeciesRef
    strategy: StubStrategy
    amount: Optional[float] = None  # initial amount; required for FixedInitial
    rate: Optional[float] = None  # k0 or the decay constant
    note: str = ""

    def __post_init__(self):
        if self.amount is not None and self.amount < 0:
            raise ValueError(f"stub for {self.species}: negative amount")
        if self.rate is not None and self.rate < 0:
            raise ValueError(f"stub for {self.species}: negative rate")
        if self.strategy is StubStrategy.FIXED_INITIAL and self.amount is None:
            raise ValueError(f"stub for {self.species}: FixedInitial needs an amount")
        if self.strategy is not StubStrategy.FIXED_INITIAL and self.rate is None:
            raise ValueError(f"stub for {self.species}: {self.strategy.value} needs a rate")

    @classmethod
    def fixed(cls, species: SpeciesRef, amount: float, note: str = "") -> "EnvironmentStub":
        return cls(species, StubStrategy.FIXED_INITIAL, amount=amount, note=note)

    @classmethod
    def creation(cls, species: SpeciesRef, rate: float, initial: float = 0.0, note: str = "") -> "EnvironmentStub":
        return cls(species, StubStrategy.ZERO_ORDER_CREATION, amount=initial, rate=rate, note=note)

    @classmethod
    def degradation(cls, species: SpeciesRef, rate: float, initial: Optional[float] = None,
                    note: str = "") -> "EnvironmentStub":
        return cls(species, StubStrategy.FIRST_ORDER_DEGRADATION, amount=initial, rate=rate, note=note)

    def to_dict(self) -> dict:
        d: dict = {"species": str(self.species), "strategy": self.strategy.value}
        if self.amount is not None:
            d["amount"] = float(self.amount)
        if self.rate is not None:
            d["rate"] = float(self.rate)
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnvironmentStub":
        try:
            strategy = StubStrategy(d["strategy"])
        except (KeyError, ValueError):
            raise DecompositionError(
                f"stub {d!r}: strategy must be one of {', '.join(s.value for s in StubStrategy)}") from None
        if "species" not in d:
            raise DecompositionError(f"stub {d!r}: missing species")
        amount = d.get("amount")
        rate = d.get("rate")
        try:
            return cls(SpeciesRef.parse(str(d["species"])), strategy,
                       None if amount is None else float(amount),
                       None if rate is None else float(rate), str(d.get("note", "")))
        except ValueError as exc:
            raise DecompositionError(str(exc)) from None


def load_stubs(path) -> dict[str, list[EnvironmentStub]]:
    """Stub file: ``stubs: {module: [ {species, strategy, amount?, rate?, note?}, ...]}``."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    stubs = data.get("stubs", {})
    if not isinstance(stubs, dict):
        raise DecompositionError(f"{path}: expected a 'stubs' mapping")
    return {str(m): [EnvironmentStub.from_dict(d) for d in (lst or [])] for m, lst in stubs.items()}


def save_stubs(path, stubs: Mapping[str, Sequence[EnvironmentStub]]) -> None:
    data = {"stubs": {m: [s.to_dict() for s in lst] for m, lst in stubs.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


def _stub_name(prefix: str, species: SpeciesRef) -> str:
    return f"{prefix}_{species.species}_{species.location}"


def extract_module(network: ReactionNetwork, partition: ModulePartition, module: str,
                   stubs: Sequence[EnvironmentStub] = ()) -> ReactionNetwork:
    """Standalone network for ``module`` with its environment replaced by stubs."""
    classes = classify_species(network, partition)[module]
    by_species: dict[SpeciesRef, EnvironmentStub] = {}
    for stub in stubs:
        if stub.species not in classes:
            raise DecompositionError(f"stub targets {stub.species}, which is not in module {module}")
        if classes[stub.species].kind is SpeciesClass.LOCAL:
            raise DecompositionError(f"stub targets local species {stub.species}")
        if stub.species in by_species:
            raise DecompositionError(f"two stubs for {stub.species}")
        by_species[stub.species] = stub
    missing = [str(s) for s, e in classes.items()
               if e.kind is SpeciesClass.EXTERNAL_REAGENT and s not in by_species]
    if missing:
        raise DecompositionError(f"module {module}: external reagents without a stub: " + ", ".join(missing))

    species = tuple(classes)
    reactions = [network.reaction(a) for a in network.actions if partition.module_of(a) == module]
    n_module = len(reactions)
    used = set()
    for r in reactions:
        used |= free_names(r.rate)
    params = {k: v for k, v in network.parameters.items() if k in used}
    init = dict(zip(network.species, network.initial))
    for s, stub in by_species.items():
        if stub.amount is not None:
            init[s] = int(math.floor(stub.amount + 0.5))
        if stub.strategy is StubStrategy.ZERO_ORDER_CREATION:
            action = _stub_name("stub_create", s)
            k = "k_" + action
            reactions.append(Reaction(action, products=((s, 1),), rate=MassAction(Name(k))))
            params[k] = float(stub.rate)
        elif stub.strategy is StubStrategy.FIRST_ORDER_DEGRADATION:
            action = _stub_name("stub_decay", s)
            k = "k_" + action
            reactions.append(Reaction(action, reactants=((s, 1),), rate=MassAction(Name(k))))
            params[k] = float(stub.rate)
    clash = sorted(set(network.actions) & {r.action for r in reactions[n_module:]})
    if clash:
        raise DecompositionError("stub actions clash with existing reactions: " + ", ".join(clash))
    locs = {s.location for s in species}
    return ReactionNetwork(
        species=species,
        reactions=tuple(reactions),
        initial=tuple(init[s] for s in species),
        parameters=params,
        locations=tuple(l for l in network.locations if l.name in locs),
        species_info={s: i for s, i in network.species_info.items() if s in classes},
    )


def network_to_system(network: ReactionNetwork) -> BioPepaSystem:
    """A Bio-PEPA system whose flattening is ``network``."""
    prefixes: dict[SpeciesRef, list[PrefixTerm]] = {s: [] for s in network.species}
    for r in network.reactions:
        for s, k in r.reactants:
            prefixes[s].append(PrefixTerm(r.action, k, Role.REACTANT))
        for s, k in r.products:
            prefixes[s].append(PrefixTerm(r.action, k, Role.PRODUCT))
        for s in r.activators:
            prefixes[s].append(PrefixTerm(r.action, 1, Role.ACTIVATOR))
        for s in r.inhibitors:
            prefixes[s].append(PrefixTerm(r.action, 1, Role.INHIBITOR))
        for s in r.modifiers:
            prefixes[s].append(PrefixTerm(r.action, 1, Role.MODIFIER))
    components = tuple(SpeciesComponent(s, tuple(p)) for s, p in prefixes.items())
    model = cooperate([Instance(s, float(a)) for s, a in zip(network.species, network.initial)])
    return BioPepaSystem(
        locations=tuple(network.locations),
        species_info=tuple(network.species_info[s] for s in network.species if s in network.species_info),
        parameters=dict(network.parameters),
        rates={r.action: r.rate for r in network.reactions},
        components=components,
        model=model,
    )


# --- fitting ----------------------------------------------------------------


def fit_stub(reference: EnsembleTrace, species: SpeciesRef | str, hint: str = "auto",
             window: Optional[tuple[float, float]] = None, quantile: Optional[float] = None,
             tol: float = 1e-9) -> EnvironmentStub:
    """Fit an environment stub to the reference mean of ``species``.

    ``creation`` fits ``y(t) = y(t0) + k0 (t - t0)`` by least squares,
    ``degradation`` fits ``y(t) = y(t0) exp(-k (t - t0))`` on the log scale,
    ``fixed`` takes the maximum (or ``quantile``) of the trace.  ``auto``
    picks fixed for a constant trace and otherwise creation or degradation
    by the sign of the fitted slope.
    """
    ref = SpeciesRef.parse(species) if isinstance(species, str) else species
    if ref not in reference.species:
        raise DecompositionError(f"reference has no species {ref}")
    t = np.asarray(reference.times, dtype=float)
    y = np.asarray(reference.column(ref), dtype=float)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, y = t[keep], y[keep]
    if len(t) < 2:
        raise DecompositionError("fit window holds fewer than two points")
    span = f"[{t[0]:g}, {t[-1]:g}]"
    dt = t - t[0]
    dy = y - y[0]

    if hint not in ("auto", "creation", "fixed", "degradation"):
        raise ValueError(f"unknown stub hint {hint}")
    if hint == "auto":
        if np.ptp(y) <= tol * max(1.0, float(np.abs(y).max())):
            hint = "fixed"
        else:
            hint = "creation" if float(dt @ dy) >= 0 else "degradation"

    if hint == "fixed":
        amount = float(np.quantile(y, quantile)) if quantile is not None else float(y.max())
        what = f"quantile {quantile:g}" if quantile is not None else "maximum"
        return EnvironmentStub.fixed(ref, amount, note=f"{what} of reference mean over {span}")
    if hint == "creation":
        slope = float(dt @ dy / (dt @ dt))
        k0 = max(0.0, slope)
        resid = float(np.sqrt(np.mean((dy - k0 * dt) ** 2)))
        return EnvironmentStub.creation(
            ref, k0, initial=max(0.0, float(y[0])),
            note=f"least-squares slope through y({t[0]:g}) over {span}, rms residual {resid:.4g}")
    if y[0] <= 0:
        raise DecompositionError(f"cannot fit decay of {ref}: reference starts at {y[0]:g}")
    pos = y > 0
    ly = np.log(y[pos] / y[0])
    k = max(0.0, float(-(dt[pos] @ ly) / (dt[pos] @ dt[pos])))
    resid = float(np.sqrt(np.mean((y - y[0] * np.exp(-k * dt)) ** 2)))
    return EnvironmentStub.degradation(
        ref, k, initial=float(y[0]),
        note=f"log-linear fit over {span}, rms residual {resid:.4g}")


# --- trace comparison -------------------------------------------------------


@dataclass(frozen=True)
class SpeciesMetrics:
    rmse: float
    nrmse: float
    max_abs: float
    peak_shift: float


@dataclass(frozen=True)
class TraceComparison:
    metrics: Mapping[SpeciesRef, SpeciesMetrics]
    skipped: tuple[SpeciesRef, ...] = ()

    @property
    def worst_nrmse(self) -> float:
        return max((m.nrmse for m in self.metrics.values()), default=0.0)

    def passes(self, threshold: float = 0.10) -> bool:
        return self.worst_nrmse <= threshold

    def table(self) -> str:
        width = max((len(str(s)) for s in self.metrics), default=7)
        lines = [f"{'species':<{width}}  {'rmse':>12}  {'nrmse':>10}  {'max_abs':>12}  {'peak_shift':>10}"]
        for s, m in self.metrics.items():
            lines.append(f"{str(s):<{width}}  {m.rmse:12.6g}  {m.nrmse:10.6g}  {m.max_abs:12.6g}  {m.peak_shift:10.6g}")
        for s in self.skipped:
            lines.append(f"{str(s):<{width}}  skipped (reference maximum is 0)")
        lines.append(f"worst nrmse: {self.worst_nrmse:.6g}")
        return "\n".join(lines)


def resample(trace: EnsembleTrace, times: np.ndarray) -> np.ndarray:
    """Step-function values of ``trace.mean`` at ``times``."""
    pos = np.searchsorted(trace.times, times, side="right") - 1
    return trace.mean[np.clip(pos, 0, len(trace.times) - 1)]


def compare_traces(candidate: EnsembleTrace, reference: EnsembleTrace,
                   species: Optional[Iterable[SpeciesRef | str]] = None) -> TraceComparison:
    if species is None:
        chosen = [s for s in reference.species if s in candidate.species]
        if not chosen:
            raise DecompositionError("traces share no species")
    else:
        chosen = [SpeciesRef.parse(s) if isinstance(s, str) else s for s in species]
        absent = [str(s) for s in chosen if s not in candidate.species or s not in reference.species]
        if absent:
            raise DecompositionError("species missing from a trace: " + ", ".join(absent))
    t = np.asarray(reference.times, dtype=float)
    same = len(candidate.times) == len(t) and np.array_equal(candidate.times, t)
    cand = candidate.mean if same else resample(candidate, t)
    metrics: dict[SpeciesRef, SpeciesMetrics] = {}
    skipped = []
    for s in chosen:
        y_ref = reference.mean[:, reference.species.index(s)]
        y_c = cand[:, candidate.species.index(s)]
        peak = float(np.max(y_ref))
        if peak == 0:
            warnings.warn(f"reference maximum of {s} is 0; skipped", RuntimeWarning, stacklevel=2)
            skipped.append(s)
            continue
        diff = y_c - y_ref
        rmse = float(np.sqrt(np.mean(diff ** 2)))
        metrics[s] = SpeciesMetrics(
            rmse=rmse,
            nrmse=rmse / abs(peak),
            max_abs=float(np.max(np.abs(diff))),
            peak_shift=float(abs(t[int(np.argmax(y_c))] - t[int(np.argmax(y_ref))])),
        )
    return TraceComparison(metrics, tuple(skipped))


__all__ = [
    "DecompositionError", "ModulePartition", "SpeciesClass", "ClassEntry", "classify_species",
    "format_classification", "StubStrategy", "EnvironmentStub", "load_stubs", "save_stubs",
    "extract_module", "network_to_system", "fit_stub", "TraceComparison", "SpeciesMetrics",
    "compare_traces", "resample",
]
