"""Domain types for Bio-PEPA systems and global well-formedness checks.

A system is the 6-tuple of locations, species information, parameters,
functional rates, species components and the model component.  All types
are frozen dataclasses; source spans are carried for diagnostics but are
excluded from equality so that parsed and serialized systems compare
structurally.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Union


@dataclass(frozen=True)
class SourceSpan:
    file: str
    line: int
    column: int
    length: int = 1

    def __str__(self) -> str:
        return f"{self.file}:{self.line}:{self.column}"


class Severity(enum.Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    message: str
    span: Optional[SourceSpan] = None

    def __str__(self) -> str:
        where = f"{self.span}: " if self.span is not None else ""
        return f"{where}{self.severity.value}: {self.message}"


class LocationKind(enum.Enum):
    COMPARTMENT = "C"
    MEMBRANE = "M"


@dataclass(frozen=True)
class Location:
    name: str
    size: float
    kind: LocationKind = LocationKind.COMPARTMENT
    unit: str = "ul"
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, order=True)
class SpeciesRef:
    """A species in a location; ``C@L`` is the unit of identity."""

    species: str
    location: str

    def __str__(self) -> str:
        return f"{self.species}@{self.location}"

    @classmethod
    def parse(cls, text: str) -> "SpeciesRef":
        name, sep, loc = text.partition("@")
        if not sep or not name or not loc:
            raise ValueError(f"not a species reference: {text!r}")
        return cls(name.strip(), loc.strip())


class Role(enum.Enum):
    REACTANT = "<<"
    PRODUCT = ">>"
    ACTIVATOR = "(+)"
    INHIBITOR = "(-)"
    MODIFIER = "(.)"

    @property
    def changes_amount(self) -> bool:
        return self in (Role.REACTANT, Role.PRODUCT)


@dataclass(frozen=True)
class PrefixTerm:
    action: str
    stoichiometry: int
    op: Role
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class SpeciesComponent:
    subject: SpeciesRef
    prefixes: tuple[PrefixTerm, ...]
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)

    def actions(self) -> set[str]:
        return {p.action for p in self.prefixes}


# --- rate expressions -------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Name:
    """Reference to a parameter."""

    name: str


@dataclass(frozen=True)
class Amount:
    """Amount of a species in the current state."""

    ref: SpeciesRef


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]


@dataclass(frozen=True)
class MassAction:
    """``fMA(k)``: k times the product of reactant and activator amounts."""

    constant: "Expr"


Expr = Union[Num, Name, Amount, BinOp, Neg, Call, MassAction]

FUNCTIONS = {
    "exp": 1,
    "log": 1,
    "sqrt": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
}


def neg(operand: Expr) -> Expr:
    """Negate, folding numeric literals so that ``-3`` is a single literal."""
    if isinstance(operand, Num):
        return Num(-operand.value)
    return Neg(operand)


def walk(expr: Expr) -> Iterator[Expr]:
    yield expr
    if isinstance(expr, BinOp):
        yield from walk(expr.left)
        yield from walk(expr.right)
    elif isinstance(expr, Neg):
        yield from walk(expr.operand)
    elif isinstance(expr, Call):
        for arg in expr.args:
            yield from walk(arg)
    elif isinstance(expr, MassAction):
        yield from walk(expr.constant)


def free_species(expr: Expr) -> set[SpeciesRef]:
    return {node.ref for node in walk(expr) if isinstance(node, Amount)}


def free_names(expr: Expr) -> set[str]:
    return {node.name for node in walk(expr) if isinstance(node, Name)}


def uses_mass_action(expr: Expr) -> bool:
    return any(isinstance(node, MassAction) for node in walk(expr))


# --- model component --------------------------------------------------------


@dataclass(frozen=True)
class Instance:
    subject: SpeciesRef
    initial: float
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Cooperation:
    left: "ModelComponent"
    right: "ModelComponent"
    sync: Optional[frozenset[str]] = None  # None means <*>
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)


ModelComponent = Union[Instance, Cooperation]


def instances(model: Optional[ModelComponent]) -> Iterator[Instance]:
    """Instances of a model component, left to right."""
    if model is None:
        return
    stack = [model]
    while stack:
        node = stack.pop()
        if isinstance(node, Instance):
            yield node
        else:
            stack.append(node.right)
            stack.append(node.left)


def cooperate(parts: list[ModelComponent], sync: Optional[frozenset[str]] = None) -> Optional[ModelComponent]:
    """Left-nested cooperation of ``parts``."""
    if not parts:
        return None
    tree = parts[0]
    for part in parts[1:]:
        tree = Cooperation(tree, part, sync)
    return tree


# --- species information ----------------------------------------------------


@dataclass(frozen=True)
class SpeciesInfo:
    subject: SpeciesRef
    step_size: float
    max_amount: Optional[float] = None
    span: Optional[SourceSpan] = field(default=None, compare=False, repr=False)

    @property
    def max_level(self) -> int:
        if self.max_amount is None:
            raise ValueError(f"no maximum amount for {self.subject}")
        return int(math.ceil(self.max_amount / self.step_size - 1e-9))


def amount_to_level(amount: float, info: SpeciesInfo) -> int:
    """Level of ``amount``: nearest multiple of the step size, clamped."""
    if amount < 0:
        raise ValueError(f"negative amount {amount} for {info.subject}")
    level = int(math.floor(amount / info.step_size + 0.5))
    if info.max_amount is not None:
        level = min(level, info.max_level)
    return level


# --- the system -------------------------------------------------------------


@dataclass(frozen=True)
class BioPepaSystem:
    locations: tuple[Location, ...] = ()
    species_info: tuple[SpeciesInfo, ...] = ()
    parameters: Mapping[str, float] = field(default_factory=dict)
    rates: Mapping[str, Expr] = field(default_factory=dict)
    components: tuple[SpeciesComponent, ...] = ()
    model: Optional[ModelComponent] = None
    # spans of rate definitions, keyed by action
    rate_spans: Mapping[str, SourceSpan] = field(default_factory=dict, compare=False, repr=False)

    def species(self) -> list[SpeciesRef]:
        """Species in model-declaration order."""
        return [inst.subject for inst in instances(self.model)]

    def component(self, ref: SpeciesRef) -> Optional[SpeciesComponent]:
        for comp in self.components:
            if comp.subject == ref:
                return comp
        return None

    def info(self, ref: SpeciesRef) -> Optional[SpeciesInfo]:
        for info in self.species_info:
            if info.subject == ref:
                return info
        return None

    def initial_amounts(self) -> dict[SpeciesRef, float]:
        return {inst.subject: inst.initial for inst in instances(self.model)}


def alphabet(model: ModelComponent, system: BioPepaSystem) -> set[str]:
    acts: set[str] = set()
    for inst in instances(model):
        comp = system.component(inst.subject)
        if comp is not None:
            acts |= comp.actions()
    return acts


def sync_problems(system: BioPepaSystem) -> list[Diagnostic]:
    """Explicit cooperation sets that do not cover the shared actions."""
    out: list[Diagnostic] = []

    def visit(node: Optional[ModelComponent]) -> None:
        if not isinstance(node, Cooperation):
            return
        visit(node.left)
        visit(node.right)
        if node.sync is None:
            return
        left, right = alphabet(node.left, system), alphabet(node.right, system)
        for act in sorted(node.sync):
            if act not in left or act not in right:
                out.append(Diagnostic(
                    Severity.ERROR,
                    f"action {act} in cooperation set is missing from a participant",
                    node.span))
        for act in sorted((left & right) - node.sync):
            out.append(Diagnostic(
                Severity.ERROR,
                f"action {act} is shared but not synchronised; independent "
                f"copies of one reaction are not supported",
                node.span))

    visit(system.model)
    return out


def check_wellformed(system: BioPepaSystem) -> list[Diagnostic]:
    """Cross-reference checks over all six parts of a system.

    Never raises; an empty list means the system is clean.  Actions used
    only in regulator roles and lacking a rate are reported as warnings
    (they cannot fire); any other missing rate is an error.
    """
    diags: list[Diagnostic] = []

    def error(msg: str, span: Optional[SourceSpan] = None) -> None:
        diags.append(Diagnostic(Severity.ERROR, msg, span))

    def warn(msg: str, span: Optional[SourceSpan] = None) -> None:
        diags.append(Diagnostic(Severity.WARNING, msg, span))

    loc_names: set[str] = set()
    for loc in system.locations:
        if loc.name in loc_names:
            error(f"duplicate location {loc.name}", loc.span)
        loc_names.add(loc.name)
        if not loc.size > 0:
            error(f"location {loc.name} must have positive size", loc.span)

    declared: set[SpeciesRef] = set()
    for comp in system.components:
        if comp.subject in declared:
            error(f"duplicate species component {comp.subject}", comp.span)
        declared.add(comp.subject)
        if comp.subject.location not in loc_names:
            error(f"unknown location {comp.subject.location} in {comp.subject}", comp.span)
        seen: set[tuple[str, Role]] = set()
        for p in comp.prefixes:
            if (p.action, p.op) in seen:
                error(f"duplicate prefix ({p.action}, {p.op.value}) in {comp.subject}", p.span)
            seen.add((p.action, p.op))
            if p.stoichiometry < 1:
                error(f"stoichiometry of {p.action} in {comp.subject} must be >= 1", p.span)

    changing: set[str] = set()
    used: dict[str, Optional[SourceSpan]] = {}
    for comp in system.components:
        for p in comp.prefixes:
            used.setdefault(p.action, p.span)
            if p.op.changes_amount:
                changing.add(p.action)
    for act, span in used.items():
        if act in system.rates:
            continue
        if act in changing:
            error(f"action {act} has no functional rate", span)
        else:
            warn(f"action {act} has no functional rate and only regulates; it is dropped", span)

    for act, expr in system.rates.items():
        span = system.rate_spans.get(act)
        if act not in used:
            warn(f"rate {act} is not used by any species component", span)
        for name in sorted(free_names(expr)):
            if name not in system.parameters:
                error(f"unknown parameter {name} in rate {act}", span)
        for ref in sorted(free_species(expr)):
            if ref not in declared:
                error(f"unknown species {ref} in rate {act}", span)

    seen_inst: set[SpeciesRef] = set()
    for inst in instances(system.model):
        if inst.subject in seen_inst:
            error(f"species {inst.subject} appears more than once in the model", inst.span)
        seen_inst.add(inst.subject)
        if inst.subject not in declared:
            error(f"species {inst.subject} has no species component", inst.span)
        if not inst.initial >= 0 or not math.isfinite(inst.initial):
            error(f"initial amount of {inst.subject} must be nonnegative", inst.span)
        info = system.info(inst.subject)
        if info is not None and info.max_amount is not None and inst.initial > info.max_amount:
            error(f"initial amount of {inst.subject} exceeds its maximum {info.max_amount:g}", inst.span)
    for ref in sorted(declared - seen_inst):
        comp = system.component(ref)
        error(f"species {ref} is not part of the model component", comp.span if comp else None)

    info_seen: set[SpeciesRef] = set()
    for info in system.species_info:
        if info.subject in info_seen:
            error(f"duplicate species information for {info.subject}", info.span)
        info_seen.add(info.subject)
        if info.subject not in declared:
            error(f"species information for undeclared species {info.subject}", info.span)
        if not info.step_size > 0:
            error(f"step size of {info.subject} must be positive", info.span)
        if info.max_amount is not None and not info.max_amount > 0:
            error(f"maximum amount of {info.subject} must be positive", info.span)

    diags.extend(sync_problems(system))
    return diags


def has_errors(diags: list[Diagnostic]) -> bool:
    return any(d.severity is Severity.ERROR for d in diags)
