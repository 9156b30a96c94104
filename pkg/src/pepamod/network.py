"""Flattening of a Bio-PEPA system into a reaction network.

One :class:`Reaction` is produced per action that carries a functional
rate.  Participants and their roles are collected across all species
components that synchronise on the action.

Rates are evaluated two ways: :func:`evaluate_rate` walks the expression
tree (reference semantics), and :func:`compile_rates` lowers every rate to
a small stack program with parameters folded in.  The stack programs are
what the simulation kernels and the vectorised CTMC builder run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .model import (
    Amount,
    BinOp,
    BioPepaSystem,
    Call,
    Diagnostic,
    Expr,
    Location,
    MassAction,
    Name,
    Neg,
    Num,
    Role,
    Severity,
    SpeciesInfo,
    SpeciesRef,
    free_species,
    sync_problems,
)


class NetworkError(Exception):
    pass


class RateError(ArithmeticError):
    """A rate could not be evaluated (division by zero, non-finite value)."""

    def __init__(self, action: str, reason: str):
        self.action = action
        super().__init__(f"rate of {action}: {reason}")


class RateClampWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Reaction:
    action: str
    reactants: tuple[tuple[SpeciesRef, int], ...] = ()
    products: tuple[tuple[SpeciesRef, int], ...] = ()
    activators: tuple[SpeciesRef, ...] = ()
    inhibitors: tuple[SpeciesRef, ...] = ()
    modifiers: tuple[SpeciesRef, ...] = ()
    rate: Expr = field(default_factory=lambda: Num(0.0))

    def participants(self) -> set[SpeciesRef]:
        return ({s for s, _ in self.reactants} | {s for s, _ in self.products}
                | set(self.activators) | set(self.inhibitors) | set(self.modifiers))

    def net_change(self) -> dict[SpeciesRef, int]:
        delta: dict[SpeciesRef, int] = {}
        for s, k in self.reactants:
            delta[s] = delta.get(s, 0) - k
        for s, k in self.products:
            delta[s] = delta.get(s, 0) + k
        return {s: d for s, d in delta.items() if d != 0}

    def rate_inputs(self) -> set[SpeciesRef]:
        """Species whose amounts can change this reaction's rate."""
        return free_species(self.rate) | {s for s, _ in self.reactants} | set(self.activators)


@dataclass(frozen=True)
class ReactionNetwork:
    species: tuple[SpeciesRef, ...]
    reactions: tuple[Reaction, ...]
    initial: tuple[int, ...]
    parameters: Mapping[str, float] = field(default_factory=dict)
    locations: tuple[Location, ...] = ()
    species_info: Mapping[SpeciesRef, SpeciesInfo] = field(default_factory=dict)
    diagnostics: tuple[Diagnostic, ...] = field(default=(), compare=False)

    @property
    def index(self) -> dict[SpeciesRef, int]:
        return {s: i for i, s in enumerate(self.species)}

    @property
    def actions(self) -> list[str]:
        return [r.action for r in self.reactions]

    def reaction(self, action: str) -> Reaction:
        for r in self.reactions:
            if r.action == action:
                return r
        raise KeyError(action)

    def initial_state(self) -> dict[SpeciesRef, int]:
        return dict(zip(self.species, self.initial))

    def with_parameters(self, **values: float) -> "ReactionNetwork":
        for name in values:
            if name not in self.parameters:
                raise KeyError(f"unknown parameter {name}")
        return replace(self, parameters={**self.parameters, **values})

    def with_initial(self, amounts: Mapping[SpeciesRef, float]) -> "ReactionNetwork":
        init = list(self.initial)
        idx = self.index
        for ref, value in amounts.items():
            init[idx[ref]] = int(math.floor(value + 0.5))
        return replace(self, initial=tuple(init))

    def with_species_info(self, infos: Mapping[SpeciesRef, SpeciesInfo]) -> "ReactionNetwork":
        return replace(self, species_info={**self.species_info, **infos})

    def stoichiometry(self) -> np.ndarray:
        """Net change matrix, reactions x species."""
        idx = self.index
        mat = np.zeros((len(self.reactions), len(self.species)), dtype=np.int64)
        for j, r in enumerate(self.reactions):
            for s, d in r.net_change().items():
                mat[j, idx[s]] = d
        return mat

    def apply(self, state: Sequence[int], action: str) -> tuple[int, ...]:
        """Fire ``action`` once: reactants drop by kappa, products rise by kappa."""
        out = list(state)
        idx = self.index
        for s, d in self.reaction(action).net_change().items():
            out[idx[s]] += d
        if min(out, default=0) < 0:
            raise NetworkError(f"firing {action} would make a count negative")
        return tuple(out)


def derive_reactions(system: BioPepaSystem) -> ReactionNetwork:
    """Flatten ``system`` into one reaction per rated action."""
    problems = sync_problems(system)
    if problems:
        raise NetworkError("; ".join(d.message for d in problems))
    species = system.species()
    known = set(species)
    for comp in system.components:
        if comp.subject not in known:
            raise NetworkError(f"species {comp.subject} is not part of the model component")

    diags: list[Diagnostic] = []
    roles: dict[str, dict[Role, list[tuple[SpeciesRef, int]]]] = {}
    order: list[str] = []
    for ref in species:
        comp = system.component(ref)
        if comp is None:
            raise NetworkError(f"species {ref} has no species component")
        for p in comp.prefixes:
            if p.action not in roles:
                roles[p.action] = {role: [] for role in Role}
                order.append(p.action)
            roles[p.action][p.op].append((ref, p.stoichiometry))

    reactions: list[Reaction] = []
    rated = [a for a in system.rates if a in roles]
    for act in order:
        if act in system.rates:
            continue
        if roles[act][Role.REACTANT] or roles[act][Role.PRODUCT]:
            raise NetworkError(f"action {act} has no functional rate")
        diags.append(Diagnostic(Severity.WARNING, f"action {act} only regulates and has no rate; dropped"))
    for act in rated:
        by_role = roles[act]
        rxn = Reaction(
            action=act,
            reactants=tuple(by_role[Role.REACTANT]),
            products=tuple(by_role[Role.PRODUCT]),
            activators=tuple(s for s, _ in by_role[Role.ACTIVATOR]),
            inhibitors=tuple(s for s, _ in by_role[Role.INHIBITOR]),
            modifiers=tuple(s for s, _ in by_role[Role.MODIFIER]),
            rate=system.rates[act],
        )
        stray = free_species(rxn.rate) - rxn.participants()
        for ref in sorted(stray):
            diags.append(Diagnostic(Severity.WARNING, f"rate of {act} uses {ref}, which has no role in it",
                                    system.rate_spans.get(act)))
        reactions.append(rxn)

    amounts = system.initial_amounts()
    initial = tuple(int(math.floor(amounts[s] + 0.5)) for s in species)
    infos = {info.subject: info for info in system.species_info if info.subject in known}
    return ReactionNetwork(
        species=tuple(species),
        reactions=tuple(reactions),
        initial=initial,
        parameters=dict(system.parameters),
        locations=system.locations,
        species_info=infos,
        diagnostics=tuple(diags),
    )


# --- tree evaluation --------------------------------------------------------


def _eval(expr: Expr, rxn: Reaction, amounts: Mapping[SpeciesRef, float],
          params: Mapping[str, float]) -> float:
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Name):
        try:
            return float(params[expr.name])
        except KeyError:
            raise RateError(rxn.action, f"unknown parameter {expr.name}") from None
    if isinstance(expr, Amount):
        try:
            return float(amounts[expr.ref])
        except KeyError:
            raise RateError(rxn.action, f"unknown species {expr.ref}") from None
    if isinstance(expr, Neg):
        return -_eval(expr.operand, rxn, amounts, params)
    if isinstance(expr, MassAction):
        value = _eval(expr.constant, rxn, amounts, params)
        for s, k in rxn.reactants:
            value *= float(amounts[s]) ** k
        for s in rxn.activators:
            value *= float(amounts[s])
        return value
    if isinstance(expr, Call):
        args = [_eval(a, rxn, amounts, params) for a in expr.args]
        try:
            if expr.func == "exp":
                return math.exp(args[0])
            if expr.func == "log":
                return math.log(args[0])
            if expr.func == "sqrt":
                return math.sqrt(args[0])
            if expr.func == "abs":
                return abs(args[0])
            if expr.func == "min":
                return min(args)
            return max(args)
        except (ValueError, OverflowError) as exc:
            raise RateError(rxn.action, f"{expr.func}: {exc}") from None
    a = _eval(expr.left, rxn, amounts, params)
    b = _eval(expr.right, rxn, amounts, params)
    if expr.op == "+":
        return a + b
    if expr.op == "-":
        return a - b
    if expr.op == "*":
        return a * b
    if expr.op == "/":
        if b == 0:
            raise RateError(rxn.action, "division by zero")
        return a / b
    try:
        return float(a) ** b
    except (OverflowError, ZeroDivisionError) as exc:
        raise RateError(rxn.action, f"power: {exc}") from None


def evaluate_rate(reaction: Reaction, state: Mapping[SpeciesRef, float],
                  parameters: Mapping[str, float]) -> float:
    """Rate of ``reaction`` in ``state`` (species -> amount).

    A reaction whose reactants are not all available (count below kappa)
    has rate 0.  Negative results are clamped to 0 with a warning.
    """
    for s, k in reaction.reactants:
        if state[s] < k:
            return 0.0
    value = _eval(reaction.rate, reaction, state, parameters)
    if isinstance(value, complex) or not math.isfinite(value):
        raise RateError(reaction.action, f"non-finite value {value}")
    if value < 0:
        warnings.warn(f"rate of {reaction.action} is negative ({value}); clamped to 0", RateClampWarning,
                      stacklevel=2)
        return 0.0
    return value


def dependency_graph(network: ReactionNetwork) -> dict[str, set[str]]:
    """Edges r -> r' where firing r changes an input of r' 's rate."""
    inputs = {r.action: r.rate_inputs() for r in network.reactions}
    graph: dict[str, set[str]] = {}
    for r in network.reactions:
        changed = set(r.net_change())
        graph[r.action] = {r2.action for r2 in network.reactions if changed & inputs[r2.action]}
    return graph


# --- stack programs ---------------------------------------------------------

OP_CONST, OP_LOAD, OP_ADD, OP_SUB, OP_MUL, OP_DIV, OP_POW, OP_NEG = range(8)
OP_EXP, OP_LOG, OP_SQRT, OP_ABS, OP_MIN, OP_MAX = range(8, 14)
_BIN_OPS = {"+": OP_ADD, "-": OP_SUB, "*": OP_MUL, "/": OP_DIV, "^": OP_POW}
_CALL_OPS = {"exp": OP_EXP, "log": OP_LOG, "sqrt": OP_SQRT, "abs": OP_ABS, "min": OP_MIN, "max": OP_MAX}


@dataclass(frozen=True)
class RateProgram:
    """All rate expressions of a network as flat stack code.

    ``ops[start[j]:start[j+1]]`` with operands ``args`` computes the rate
    of reaction ``j``.  ``OP_LOAD`` operands are species indices.
    """

    ops: np.ndarray  # int32
    args: np.ndarray  # float64
    start: np.ndarray  # int32, n_reactions + 1
    max_stack: int
    actions: tuple[str, ...]


def _lower(expr: Expr, rxn: Reaction, idx: Mapping[SpeciesRef, int], params: Mapping[str, float],
           ops: list[int], args: list[float]) -> tuple[int, int]:
    """Append code for ``expr``; return (stack depth now, max depth)."""
    if isinstance(expr, Num):
        ops.append(OP_CONST); args.append(expr.value)
        return 1, 1
    if isinstance(expr, Name):
        if expr.name not in params:
            raise RateError(rxn.action, f"unknown parameter {expr.name}")
        ops.append(OP_CONST); args.append(float(params[expr.name]))
        return 1, 1
    if isinstance(expr, Amount):
        if expr.ref not in idx:
            raise RateError(rxn.action, f"unknown species {expr.ref}")
        ops.append(OP_LOAD); args.append(float(idx[expr.ref]))
        return 1, 1
    if isinstance(expr, Neg):
        _, m = _lower(expr.operand, rxn, idx, params, ops, args)
        ops.append(OP_NEG); args.append(0.0)
        return 1, m
    if isinstance(expr, MassAction):
        _, m = _lower(expr.constant, rxn, idx, params, ops, args)
        factors = [(idx[s], k) for s, k in rxn.reactants] + [(idx[s], 1) for s in rxn.activators]
        for i, k in factors:
            ops.append(OP_LOAD); args.append(float(i))
            if k != 1:
                ops.append(OP_CONST); args.append(float(k))
                ops.append(OP_POW); args.append(0.0)
            ops.append(OP_MUL); args.append(0.0)
        return 1, max(m, 3 if any(k != 1 for _, k in factors) else 2)
    if isinstance(expr, Call):
        depth_max = 0
        for pos, a in enumerate(expr.args):
            _, m = _lower(a, rxn, idx, params, ops, args)
            depth_max = max(depth_max, pos + m)
        ops.append(_CALL_OPS[expr.func]); args.append(0.0)
        return 1, depth_max
    _, m1 = _lower(expr.left, rxn, idx, params, ops, args)
    _, m2 = _lower(expr.right, rxn, idx, params, ops, args)
    ops.append(_BIN_OPS[expr.op]); args.append(0.0)
    return 1, max(m1, 1 + m2)


def compile_rates(network: ReactionNetwork) -> RateProgram:
    idx = network.index
    ops: list[int] = []
    args: list[float] = []
    start = [0]
    max_stack = 1
    for rxn in network.reactions:
        _, m = _lower(rxn.rate, rxn, idx, network.parameters, ops, args)
        max_stack = max(max_stack, m)
        start.append(len(ops))
    return RateProgram(
        ops=np.asarray(ops, dtype=np.int32),
        args=np.asarray(args, dtype=np.float64),
        start=np.asarray(start, dtype=np.int32),
        max_stack=max_stack,
        actions=tuple(network.actions),
    )


def run_program(prog: RateProgram, j: int, amounts: np.ndarray, ratio_zero: bool = False) -> np.ndarray:
    """Evaluate reaction ``j`` 's program on a batch of states.

    ``amounts`` has shape (n_states, n_species).  Division by zero raises
    :class:`RateError` unless ``ratio_zero`` is set, in which case 0/0 is
    0 (reward semantics) and x/0 for x != 0 is left non-finite.
    """
    n = amounts.shape[0]
    stack: list[np.ndarray] = []
    action = prog.actions[j] if j < len(prog.actions) else f"#{j}"
    with np.errstate(all="ignore"):
        for pc in range(prog.start[j], prog.start[j + 1]):
            op = prog.ops[pc]
            if op == OP_CONST:
                stack.append(np.full(n, prog.args[pc]))
            elif op == OP_LOAD:
                stack.append(amounts[:, int(prog.args[pc])].astype(np.float64))
            elif op == OP_NEG:
                stack.append(-stack.pop())
            elif op in (OP_EXP, OP_LOG, OP_SQRT, OP_ABS):
                x = stack.pop()
                fn = {OP_EXP: np.exp, OP_LOG: np.log, OP_SQRT: np.sqrt, OP_ABS: np.abs}[op]
                stack.append(fn(x))
            else:
                b = stack.pop()
                a = stack.pop()
                if op == OP_ADD:
                    stack.append(a + b)
                elif op == OP_SUB:
                    stack.append(a - b)
                elif op == OP_MUL:
                    stack.append(a * b)
                elif op == OP_DIV:
                    zero = b == 0
                    if zero.any():
                        if not ratio_zero:
                            raise RateError(action, "division by zero")
                        out = np.where(zero, np.where(a == 0, 0.0, np.inf), a / np.where(zero, 1.0, b))
                        stack.append(out)
                    else:
                        stack.append(a / b)
                elif op == OP_POW:
                    stack.append(np.power(a, b))
                elif op == OP_MIN:
                    stack.append(np.minimum(a, b))
                elif op == OP_MAX:
                    stack.append(np.maximum(a, b))
                else:  # pragma: no cover
                    raise ValueError(f"bad opcode {op}")
    return stack[-1]


def reactant_guards(network: ReactionNetwork) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """CSR arrays (ptr, species index, kappa) of reactant requirements."""
    idx = network.index
    ptr, sp, kap = [0], [], []
    for r in network.reactions:
        for s, k in r.reactants:
            sp.append(idx[s])
            kap.append(k)
        ptr.append(len(sp))
    return (np.asarray(ptr, dtype=np.int32), np.asarray(sp, dtype=np.int32),
            np.asarray(kap, dtype=np.int64))


def change_lists(network: ReactionNetwork) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """CSR arrays (ptr, species index, delta) of net changes per reaction."""
    idx = network.index
    ptr, sp, delta = [0], [], []
    for r in network.reactions:
        for s, d in sorted(r.net_change().items(), key=lambda kv: idx[kv[0]]):
            sp.append(idx[s])
            delta.append(d)
        ptr.append(len(sp))
    return (np.asarray(ptr, dtype=np.int32), np.asarray(sp, dtype=np.int32),
            np.asarray(delta, dtype=np.int64))


def dependency_lists(network: ReactionNetwork) -> tuple[np.ndarray, np.ndarray]:
    """CSR arrays (ptr, reaction index) of the dependency graph, sorted."""
    graph = dependency_graph(network)
    pos = {a: j for j, a in enumerate(network.actions)}
    ptr, dep = [0], []
    for r in network.reactions:
        dep.extend(sorted(pos[a] for a in graph[r.action]))
        ptr.append(len(dep))
    return np.asarray(ptr, dtype=np.int32), np.asarray(dep, dtype=np.int32)




def compile_expression(expr: Expr, species: Sequence[SpeciesRef], parameters: Mapping[str, float],
                       label: str = "expression") -> RateProgram:
    """Lower a free-standing expression over species amounts to one stack program."""
    ops: list[int] = []
    args: list[float] = []
    idx = {s: i for i, s in enumerate(species)}
    _, m = _lower(expr, Reaction(action=label, rate=expr), idx, parameters, ops, args)
    return RateProgram(
        ops=np.asarray(ops, dtype=np.int32),
        args=np.asarray(args, dtype=np.float64),
        start=np.asarray([0, len(ops)], dtype=np.int32),
        max_stack=m,
        actions=(label,),
    )
