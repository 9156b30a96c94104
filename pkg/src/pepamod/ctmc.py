"""CTMC with levels: construction, transient solution and queries.

Each species amount is abstracted to a level ``l`` standing for the amount
``l * h``.  A reaction moves every changed species by its stoichiometry in
level units and fires at ``f(levels * h) / h_r``, where ``h_r`` is the
common step size of the species it changes.

Transient distributions are computed by uniformization.  Poisson weights
are truncated on both sides so that the dropped mass is below ``eps`` and
then renormalised, which keeps every distribution summing to one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.stats import poisson

from .model import Expr, SpeciesInfo, SpeciesRef, amount_to_level
from .network import RateClampWarning, RateError, ReactionNetwork, compile_expression, compile_rates, run_program
from .parser import ParseError, _Parser, format_expr

DEFAULT_STATE_CAP = 5_000_000
DEFAULT_EPS = 1e-10
UNIFORMIZATION_FACTOR = 1.02


class CTMCBuildError(Exception):
    pass


class StateCapError(CTMCBuildError):
    """The reachable state space exceeds the configured cap."""

    def __init__(self, cap: int, explored: int, transitions: int, depth: int, frontier: int):
        self.cap = cap
        self.explored = explored
        self.transitions = transitions
        self.depth = depth
        self.frontier = frontier
        super().__init__(
            f"state cap {cap} exceeded: {explored} states and {transitions} transitions "
            f"after {depth} BFS layers, {frontier} states still unexplored")


@dataclass(frozen=True, eq=False)
class LevelCTMC:
    species: tuple[SpeciesRef, ...]
    steps: np.ndarray  # float, per species
    max_levels: np.ndarray  # int64, per species
    states: np.ndarray  # (n_states, n_species) int64 levels
    src: np.ndarray
    dst: np.ndarray
    rate: np.ndarray
    label: np.ndarray  # index into labels
    labels: tuple[str, ...]
    label_steps: np.ndarray  # h_r per label
    initial: int = 0
    parameters: Mapping[str, float] = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_transitions(self) -> int:
        return self.src.shape[0]

    def level_counts(self) -> dict[SpeciesRef, int]:
        return {s: int(m) for s, m in zip(self.species, self.max_levels)}

    def amounts(self) -> np.ndarray:
        return self.states * self.steps

    def exit_rates(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.rate, minlength=self.n_states)

    def generator(self) -> sparse.csr_matrix:
        n = self.n_states
        off = sparse.coo_matrix((self.rate, (self.src, self.dst)), shape=(n, n))
        return (off - sparse.diags(self.exit_rates())).tocsr()

    def state(self, sid: int) -> dict[SpeciesRef, int]:
        return {s: int(v) for s, v in zip(self.species, self.states[sid])}

    def describe_state(self, sid: int) -> str:
        return "{" + ", ".join(f"{s}={v}" for s, v in self.state(sid).items()) + "}"

    @classmethod
    def from_transitions(cls, n_states: int, src: Sequence[int], dst: Sequence[int], rate: Sequence[float],
                         initial: int = 0, label: Optional[Sequence[int]] = None,
                         labels: Sequence[str] = ("t",)) -> "LevelCTMC":
        """A chain over states ``0..n-1`` seen as the levels of one species ``s@chain``."""
        src = np.asarray(src, dtype=np.int64)
        lab = np.zeros(len(src), dtype=np.int32) if label is None else np.asarray(label, dtype=np.int32)
        return cls(
            species=(SpeciesRef("s", "chain"),),
            steps=np.ones(1),
            max_levels=np.array([n_states - 1], dtype=np.int64),
            states=np.arange(n_states, dtype=np.int64)[:, None],
            src=src,
            dst=np.asarray(dst, dtype=np.int64),
            rate=np.asarray(rate, dtype=np.float64),
            label=lab,
            labels=tuple(labels),
            label_steps=np.ones(len(labels)),
            initial=initial,
        )


@dataclass(frozen=True, eq=False)
class TransientDistribution:
    time: float
    probabilities: np.ndarray

    def total(self) -> float:
        return float(self.probabilities.sum())


# --- construction -----------------------------------------------------------

class _Keys:
    """Mixed-radix encoding of level vectors, int64 when it fits."""

    def __init__(self, radix: np.ndarray):
        total = 1
        for r in radix.tolist():
            total *= int(r)
        self.wide = total >= 2 ** 62
        dtype = object if self.wide else np.int64
        weights = [1]
        for r in radix.tolist()[:-1]:
            weights.append(weights[-1] * int(r))
        self.weights = np.array(weights, dtype=dtype)
        self.dtype = dtype

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        if self.wide:
            return (rows.astype(object) * self.weights).sum(axis=1)
        return rows @ self.weights


def _reaction_table(network: ReactionNetwork, steps: np.ndarray):
    idx = network.index
    table = []
    for j, r in enumerate(network.reactions):
        change = r.net_change()
        if not change:
            continue
        hs = {float(steps[idx[s]]) for s in change}
        if len(hs) > 1:
            raise CTMCBuildError(
                f"reaction {r.action} changes species with different step sizes "
                + ", ".join(f"{s}: {steps[idx[s]]:g}" for s in sorted(change)))
        delta = np.zeros(len(network.species), dtype=np.int64)
        for s, d in change.items():
            delta[idx[s]] = d
        guard = [(idx[s], k) for s, k in r.reactants]
        table.append((j, delta, hs.pop(), guard))
    return table


def build_level_ctmc(network: ReactionNetwork, species_info: Optional[Mapping[SpeciesRef, SpeciesInfo]] = None,
                     state_cap: int = DEFAULT_STATE_CAP) -> LevelCTMC:
    """Explore the level state space breadth first from the initial state.

    Every species needs a step size and a maximum amount.  A transition
    exists when all resulting levels stay within ``[0, max_level]`` and
    its rate is positive.
    """
    info = {**network.species_info, **(species_info or {})}
    missing = [str(s) for s in network.species if s not in info or info[s].max_amount is None]
    if missing:
        raise CTMCBuildError("no step size and maximum amount for " + ", ".join(missing))
    infos = [info[s] for s in network.species]
    steps = np.array([i.step_size for i in infos], dtype=np.float64)
    max_levels = np.array([i.max_level for i in infos], dtype=np.int64)
    init = np.array([amount_to_level(a, i) for i, a in zip(infos, network.initial)], dtype=np.int64)

    prog = compile_rates(network)
    table = _reaction_table(network, steps)
    keys = _Keys(max_levels + 1)

    known_keys = keys(init[None, :])
    known_ids = np.zeros(1, dtype=np.int64)
    blocks = [init[None, :]]
    n_states = 1
    frontier = init[None, :]
    frontier_ids = np.zeros(1, dtype=np.int64)
    src_parts, dst_parts, rate_parts, label_parts = [], [], [], []
    n_trans = 0
    depth = 0
    clamped = 0

    while frontier.shape[0]:
        depth += 1
        amounts = frontier * steps
        cand_rows, cand_src, cand_rate, cand_label = [], [], [], []
        for j, delta, h, guard in table:
            target = frontier + delta
            ok = np.all((target >= 0) & (target <= max_levels), axis=1)
            for i, k in guard:
                ok &= amounts[:, i] >= k
            if not ok.any():
                continue
            vals = run_program(prog, j, amounts[ok])
            bad = ~np.isfinite(vals)
            if bad.any():
                sid = int(frontier_ids[ok][np.argmax(bad)])
                raise RateError(network.reactions[j].action,
                                f"non-finite value {vals[bad][0]} at levels {frontier[ok][np.argmax(bad)].tolist()}"
                                f" (state {sid})")
            clamped += int((vals < 0).sum())
            pos = vals > 0
            if not pos.any():
                continue
            cand_rows.append(target[ok][pos])
            cand_src.append(frontier_ids[ok][pos])
            cand_rate.append(vals[pos] / h)
            cand_label.append(np.full(int(pos.sum()), j, dtype=np.int32))
        if not cand_rows:
            break
        rows = np.concatenate(cand_rows)
        ck = keys(rows)
        uniq, first, inverse = np.unique(ck, return_index=True, return_inverse=True)
        order = np.argsort(known_keys, kind="stable")
        sk = known_keys[order]
        where = np.searchsorted(sk, uniq)
        where_c = np.minimum(where, len(sk) - 1)
        seen = sk[where_c] == uniq
        uniq_ids = np.empty(len(uniq), dtype=np.int64)
        uniq_ids[seen] = known_ids[order][where_c[seen]]
        fresh = ~seen
        n_new = int(fresh.sum())
        uniq_ids[fresh] = np.arange(n_states, n_states + n_new)
        dst = uniq_ids[inverse.ravel()]
        n_trans += len(dst)
        src_parts.append(np.concatenate(cand_src))
        dst_parts.append(dst)
        rate_parts.append(np.concatenate(cand_rate))
        label_parts.append(np.concatenate(cand_label))
        if n_states + n_new > state_cap:
            raise StateCapError(state_cap, n_states + n_new, n_trans, depth, n_new)
        frontier = rows[first[fresh]]
        frontier_ids = uniq_ids[fresh]
        blocks.append(frontier)
        known_keys = np.concatenate([known_keys, uniq[fresh]])
        known_ids = np.concatenate([known_ids, frontier_ids])
        n_states += n_new

    if clamped:
        warnings.warn(f"{clamped} negative rates clamped to 0 while building the CTMC", RateClampWarning,
                      stacklevel=2)
    states = np.concatenate(blocks)
    assert states.min() >= 0 and np.all(states <= max_levels), "level out of bounds"
    label_steps = np.ones(len(network.reactions))
    for j, _, h, _ in table:
        label_steps[j] = h
    cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.empty(0, dtype=dt))
    return LevelCTMC(
        species=network.species,
        steps=steps,
        max_levels=max_levels,
        states=states,
        src=cat(src_parts, np.int64),
        dst=cat(dst_parts, np.int64),
        rate=cat(rate_parts, np.float64),
        label=cat(label_parts, np.int32),
        labels=tuple(network.actions),
        label_steps=label_steps,
        initial=0,
        parameters=dict(network.parameters),
    )


# --- uniformization ---------------------------------------------------------

class _Solver:
    def __init__(self, ctmc: LevelCTMC, eps: float):
        exit_rates = ctmc.exit_rates()
        self.lam = UNIFORMIZATION_FACTOR * float(exit_rates.max(initial=0.0))
        self.qt = ctmc.generator().T.tocsr()
        self.eps = eps

    def advance(self, v: np.ndarray, dt: float, integral: bool = False):
        """Return ``v e^{Q dt}`` and, if asked, ``int_0^dt v e^{Qu} du``."""
        if self.lam == 0.0 or dt == 0.0:
            return v.copy(), (v * dt if integral else None)
        lt = self.lam * dt
        left = int(poisson.ppf(self.eps / 2, lt))
        right = int(poisson.isf(self.eps / 2, lt))
        left = max(0, min(left, right))
        k = np.arange(left, right + 1)
        w = poisson.pmf(k, lt)
        w /= w.sum()
        last = right
        if integral:
            # sum_k sf(k) = lt; renormalise the truncated tail weights to it
            last = max(right, int(poisson.isf(self.eps * 1e-3, lt)) + 1)
            tail = poisson.sf(np.arange(last + 1), lt)
            tail *= lt / tail.sum()
            acc_int = np.zeros_like(v)
        out = np.zeros_like(v)
        term = v.copy()
        for n in range(last + 1):
            if left <= n <= right:
                out += w[n - left] * term
            if integral:
                acc_int += tail[n] * term
            if n < last:
                term = term + (self.qt @ term) / self.lam
        return out, (acc_int / self.lam if integral else None)


def _check_times(times: Iterable[float]) -> list[float]:
    ts = [float(t) for t in times]
    if any(t < 0 for t in ts):
        raise ValueError("time points must be >= 0")
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError("time points must be sorted")
    return ts


def _initial_vector(ctmc: LevelCTMC) -> np.ndarray:
    v = np.zeros(ctmc.n_states)
    v[ctmc.initial] = 1.0
    return v


def transient(ctmc: LevelCTMC, t: Union[float, Sequence[float]], eps: float = DEFAULT_EPS):
    """Transient distribution at ``t``, or a list of them for a sorted list of times."""
    scalar = np.ndim(t) == 0
    ts = _check_times([t] if scalar else t)
    solver = _Solver(ctmc, eps)
    v = _initial_vector(ctmc)
    now = 0.0
    out = []
    for ti in ts:
        v, _ = solver.advance(v, ti - now)
        now = ti
        out.append(TransientDistribution(ti, v.copy()))
    return out[0] if scalar else out


def _transient_with_integrals(ctmc: LevelCTMC, ts: list[float], eps: float, integral: bool):
    solver = _Solver(ctmc, eps)
    v = _initial_vector(ctmc)
    acc = np.zeros(ctmc.n_states)
    now = 0.0
    for ti in ts:
        v_next, part = solver.advance(v, ti - now, integral)
        if integral:
            acc = acc + part
        v, now = v_next, ti
        yield ti, v, acc


# --- queries ----------------------------------------------------------------

COMPARISONS = {">": np.greater, ">=": np.greater_equal, "<": np.less, "<=": np.less_equal, "=": np.equal}


@dataclass(frozen=True)
class ProbQuery:
    """Probability that the level of ``species`` compares to ``level``."""

    species: SpeciesRef
    op: str
    level: int
    times: tuple[float, ...] = (0.0,)
    name: str = "q"


@dataclass(frozen=True)
class RewardQuery:
    """Expected value of an expression over species amounts."""

    expr: Expr
    times: tuple[float, ...] = (0.0,)
    name: str = "q"


@dataclass(frozen=True)
class CountQuery:
    """Expected number of firings of a set of reactions up to each time."""

    actions: tuple[str, ...]
    times: tuple[float, ...] = (0.0,)
    name: str = "q"


Query = Union[ProbQuery, RewardQuery, CountQuery]


def _state_values(ctmc: LevelCTMC, query: Query) -> np.ndarray:
    if isinstance(query, ProbQuery):
        if query.species not in ctmc.species:
            raise KeyError(f"unknown species {query.species}")
        if query.op not in COMPARISONS:
            raise ValueError(f"unknown comparison {query.op}")
        col = ctmc.states[:, ctmc.species.index(query.species)]
        return COMPARISONS[query.op](col, query.level).astype(np.float64)
    if isinstance(query, RewardQuery):
        prog = compile_expression(query.expr, ctmc.species, ctmc.parameters, label=query.name)
        vals = run_program(prog, 0, ctmc.amounts(), ratio_zero=True)
        bad = ~np.isfinite(vals)
        if bad.any():
            sid = int(np.argmax(bad))
            raise RateError(query.name, f"non-finite value {vals[sid]} in state {ctmc.describe_state(sid)}")
        return vals
    unknown = [a for a in query.actions if a not in ctmc.labels]
    if unknown:
        raise KeyError("unknown reactions " + ", ".join(unknown))
    wanted = np.array([ctmc.labels.index(a) for a in query.actions])
    mask = np.isin(ctmc.label, wanted)
    # each level transition of reaction r stands for h_r firings
    weights = ctmc.rate[mask] * ctmc.label_steps[ctmc.label[mask]]
    return np.bincount(ctmc.src[mask], weights=weights, minlength=ctmc.n_states)


def evaluate_queries(ctmc: LevelCTMC, queries: Sequence[Query],
                     eps: float = DEFAULT_EPS) -> list[tuple[str, float, float]]:
    """Evaluate queries in one transient pass; rows are (query name, time, value)."""
    values = [_state_values(ctmc, q) for q in queries]
    for q in queries:
        _check_times(q.times)
    ts = sorted({float(t) for q in queries for t in q.times})
    need_int = any(isinstance(q, CountQuery) for q in queries)
    results: dict[tuple[int, float], float] = {}
    for t, v, acc in _transient_with_integrals(ctmc, ts, eps, need_int):
        total = v.sum()
        assert abs(total - 1.0) <= 1e-9, f"probability mass {total} at t={t}"
        for qi, (q, vals) in enumerate(zip(queries, values)):
            if t in q.times:
                base = acc if isinstance(q, CountQuery) else v
                results[(qi, t)] = float(base @ vals)
    return [(q.name, float(t), results[(qi, float(t))]) for qi, q in enumerate(queries) for t in q.times]


def _single(ctmc: LevelCTMC, query: Query, times: Optional[Sequence[float]], eps: float) -> list[float]:
    if times is not None:
        query = type(query)(**{**query.__dict__, "times": tuple(float(t) for t in times)})
    return [v for _, _, v in evaluate_queries(ctmc, [query], eps)]


def eval_prob(ctmc: LevelCTMC, query: ProbQuery, times: Optional[Sequence[float]] = None,
              eps: float = DEFAULT_EPS) -> list[float]:
    return _single(ctmc, query, times, eps)


def eval_instantaneous_reward(ctmc: LevelCTMC, expr: Union[Expr, RewardQuery],
                              times: Optional[Sequence[float]] = None, eps: float = DEFAULT_EPS) -> list[float]:
    query = expr if isinstance(expr, RewardQuery) else RewardQuery(expr)
    return _single(ctmc, query, times, eps)


def eval_cumulative_reward(ctmc: LevelCTMC, actions: Union[Sequence[str], CountQuery],
                           times: Optional[Sequence[float]] = None, eps: float = DEFAULT_EPS) -> list[float]:
    query = actions if isinstance(actions, CountQuery) else CountQuery(tuple(actions))
    return _single(ctmc, query, times, eps)


def sweep(network: ReactionNetwork, parameter: str, values: Sequence[float], query: Query,
          species_info: Optional[Mapping[SpeciesRef, SpeciesInfo]] = None,
          state_cap: int = DEFAULT_STATE_CAP, eps: float = DEFAULT_EPS) -> list[tuple[float, float, float]]:
    """Rebuild the CTMC for each parameter value; rows are (value, time, result)."""
    if parameter not in network.parameters:
        raise KeyError(f"unknown parameter {parameter}")
    rows = []
    for value in values:
        ctmc = build_level_ctmc(network.with_parameters(**{parameter: float(value)}), species_info, state_cap)
        for _, t, r in evaluate_queries(ctmc, [query], eps):
            rows.append((float(value), t, r))
    return rows


# --- query files ------------------------------------------------------------

class _QueryParser(_Parser):
    def comparison(self) -> str:
        tok = self.tok
        if tok.text in ("<", ">"):
            self.next()
            if self.at("="):
                self.next()
                return tok.text + "="
            return tok.text
        if tok.text == "=":
            self.next()
            return "="
        raise self.fail("expected comparison", list(COMPARISONS))

    def times(self) -> tuple[float, ...]:
        out: list[float] = []
        while True:
            start = self.number()
            if self.at(".."):
                self.next()
                stop = self.number()
                if not (self.tok.kind == "IDENT" and self.tok.text == "step"):
                    raise self.fail("expected 'step'", ["step"])
                self.next()
                step = self.number()
                if step <= 0 or stop < start:
                    raise ParseError("bad time range", self.tok.span)
                n = int(math.floor((stop - start) / step + 1e-9))
                out.extend(float(x) for x in np.round(start + step * np.arange(n + 1), 12))
            else:
                out.append(start)
            if not self.at(","):
                break
            self.next()
        if any(b <= a for a, b in zip(out, out[1:])):
            raise ParseError("time points must be strictly increasing", self.tok.span)
        return tuple(out)

    def query(self, default_name: str) -> Query:
        name = default_name
        if self.tok.kind == "IDENT" and self.peek().text == ":":
            name = self.next().text
            self.next()
        kind = self.ident("P or R")
        self.expect("[")
        if kind.text == "P":
            ref = self.species_ref()
            op = self.comparison()
            level = self.number()
            if level != int(level):
                raise ParseError("level thresholds are integers", kind.span)
            self.expect("]")
            self.expect("@")
            return ProbQuery(ref, op, int(level), self.times(), name)
        if kind.text != "R":
            raise ParseError(f"unknown query kind {kind.text}", kind.span, ["P", "R"])
        fn = self.ident("amount or count")
        self.expect("(")
        if fn.text == "amount":
            expr = self.expr()
            self.expect(")")
            self.expect("]")
            self.expect("@")
            return RewardQuery(expr, self.times(), name)
        if fn.text == "count":
            actions = [self.ident("action").text]
            while self.at(","):
                self.next()
                actions.append(self.ident("action").text)
            self.expect(")")
            self.expect("]")
            self.expect("@")
            return CountQuery(tuple(actions), self.times(), name)
        raise ParseError(f"unknown reward {fn.text}", fn.span, ["amount", "count"])


def parse_queries(text: str, file: str = "<string>") -> list[Query]:
    p = _QueryParser(text, file)
    out: list[Query] = []
    names: set[str] = set()
    while p.tok.kind != "EOF":
        start = p.tok
        q = p.query(f"q{len(out) + 1}")
        p.expect(";")
        if q.name in names:
            raise ParseError(f"duplicate query name {q.name}", start.span)
        names.add(q.name)
        out.append(q)
    return out


def parse_query_file(path) -> list[Query]:
    with open(path, encoding="utf-8") as fh:
        return parse_queries(fh.read(), str(path))


def format_query(q: Query) -> str:
    times = ", ".join(repr(t) for t in q.times)
    if isinstance(q, ProbQuery):
        body = f"P[{q.species} {q.op} {q.level}]"
    elif isinstance(q, RewardQuery):
        body = f"R[amount({format_expr(q.expr)})]"
    else:
        body = f"R[count({', '.join(q.actions)})]"
    return f"{q.name}: {body} @ {times};"


__all__ = [
    "CTMCBuildError", "StateCapError", "LevelCTMC", "TransientDistribution", "build_level_ctmc",
    "transient", "ProbQuery", "RewardQuery", "CountQuery", "evaluate_queries", "eval_prob",
    "eval_instantaneous_reward", "eval_cumulative_reward", "sweep", "parse_queries", "parse_query_file",
    "format_query",
]
