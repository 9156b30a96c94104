"""Shared generators and independent oracles for the test suite."""

from __future__ import annotations

import math
import random
from pathlib import Path

import numpy as np

from pepamod.model import (
    Amount,
    BinOp,
    BioPepaSystem,
    Call,
    Instance,
    Location,
    LocationKind,
    MassAction,
    Name,
    Num,
    PrefixTerm,
    Role,
    SpeciesComponent,
    SpeciesInfo,
    SpeciesRef,
    alphabet,
    neg,
)
from pepamod.model import Cooperation
from pepamod.network import ReactionNetwork, evaluate_rate

DATA = Path(__file__).resolve().parents[1] / "src" / "pepamod" / "data"

# one "PASS/FAIL criterion: detail" line per acceptance check, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


# --- random well-formed systems ---------------------------------------------

def _float(rnd: random.Random, lo: float = 0.0, hi: float = 1e3) -> float:
    pick = rnd.random()
    if pick < 0.3:
        return float(rnd.randint(int(lo), int(hi)))
    if pick < 0.4:
        return lo + (hi - lo) * rnd.random() * 10.0 ** rnd.randint(-12, 0)
    return lo + (hi - lo) * rnd.random()


def _expr(rnd: random.Random, params: list[str], species: list[SpeciesRef], depth: int):
    if depth == 0 or rnd.random() < 0.3:
        kind = rnd.random()
        if kind < 0.35 or not (params or species):
            value = _float(rnd, 0.0, 100.0)
            return Num(-value if rnd.random() < 0.2 else value)
        if kind < 0.7 and params:
            return Name(rnd.choice(params))
        if species:
            return Amount(rnd.choice(species))
        return Name(rnd.choice(params))
    kind = rnd.random()
    if kind < 0.6:
        op = rnd.choice("+-*/^")
        return BinOp(op, _expr(rnd, params, species, depth - 1), _expr(rnd, params, species, depth - 1))
    if kind < 0.75:
        return neg(_expr(rnd, params, species, depth - 1))
    func = rnd.choice(["exp", "log", "sqrt", "abs", "min", "max"])
    n = 2 if func in ("min", "max") else 1
    return Call(func, tuple(_expr(rnd, params, species, depth - 1) for _ in range(n)))


def random_system(rnd: random.Random) -> BioPepaSystem:
    """A syntactically valid, cross-reference clean system."""
    locs = [Location(f"c{i}", _float(rnd, 0.001, 10.0) or 1.0, rnd.choice(list(LocationKind)),
                     rnd.choice(["ul", "nl", "m2"]))
            for i in range(rnd.randint(1, 3))]
    n_species = rnd.randint(1, 5)
    species = []
    for i in range(n_species):
        species.append(SpeciesRef(f"S{i}", rnd.choice(locs).name))
    params = {f"k{i}": (_float(rnd, 0, 50) * (-1 if rnd.random() < 0.1 else 1)) for i in range(rnd.randint(0, 4))}
    actions = [f"v{i}" for i in range(rnd.randint(1, 5))]
    components = []
    used: list[str] = []
    for s in species:
        pairs = set()
        terms = []
        for _ in range(rnd.randint(1, 4)):
            act, op = rnd.choice(actions), rnd.choice(list(Role))
            if (act, op) in pairs:
                continue
            pairs.add((act, op))
            kappa = rnd.randint(1, 3) if rnd.random() < 0.3 else 1
            terms.append(PrefixTerm(act, kappa, op))
            if act not in used:
                used.append(act)
        components.append(SpeciesComponent(s, tuple(terms)))
    rates = {}
    for act in used:
        body = _expr(rnd, list(params), species, rnd.randint(0, 3))
        rates[act] = MassAction(body) if rnd.random() < 0.4 else body
    initial = {s: (float(rnd.randint(0, 500)) if rnd.random() < 0.7 else _float(rnd, 0, 500)) for s in species}
    infos = []
    for s in species:
        if rnd.random() < 0.5:
            mx = initial[s] + _float(rnd, 1, 1000) if rnd.random() < 0.5 else None
            infos.append(SpeciesInfo(s, _float(rnd, 0.5, 50) or 1.0, mx))
    system = BioPepaSystem(tuple(locs), tuple(infos), params, rates, tuple(components), None)
    order = species[:]
    rnd.shuffle(order)
    parts = [Instance(s, initial[s]) for s in order]
    while len(parts) > 1:
        i = rnd.randrange(len(parts) - 1)
        left, right = parts[i], parts[i + 1]
        shared = alphabet(left, system) & alphabet(right, system)
        sync = frozenset(shared) if shared and rnd.random() < 0.5 else None
        parts[i:i + 2] = [Cooperation(left, right, sync)]
    return BioPepaSystem(tuple(locs), tuple(infos), params, rates, tuple(components), parts[0])


# --- small models -----------------------------------------------------------

def birth_death_text(birth: float = 2.0, death: float = 0.25, initial: int = 0, cap: int = 40) -> str:
    return f"""
location c : 1 ul, C;
parameter kb = {birth};
parameter kd = {death};
rate b = kb;
rate d = fMA(kd);
X@c = b >> X@c + d << X@c;
info X@c : step 1, max {cap};
model X@c[{initial}];
"""


def death_text(a0: int = 1000, k: float = 0.1) -> str:
    return f"""
location c : 1 ul, C;
parameter k = {k};
rate d = fMA(k);
A@c = d << A@c;
info A@c : step 1, max {a0};
model A@c[{a0}];
"""


def random_ctmc(rng: np.random.Generator, n_max: int = 20, density: float = 0.3):
    """Random sparse generator: (n, src, dst, rate) with no self loops."""
    n = int(rng.integers(2, n_max + 1))
    mask = rng.random((n, n)) < density
    np.fill_diagonal(mask, False)
    # a ring keeps the chain connected from state 0
    for i in range(n - 1):
        mask[i, i + 1] = True
    src, dst = np.nonzero(mask)
    rate = rng.uniform(0.05, 5.0, len(src)) * 10.0 ** rng.uniform(-1, 1, len(src))
    return n, src, dst, rate


def dense_generator(n, src, dst, rate) -> np.ndarray:
    q = np.zeros((n, n))
    np.add.at(q, (src, dst), rate)
    q -= np.diag(q.sum(axis=1))
    return q


# --- direct-method simulation (oracle for the next-reaction kernels) --------

def direct_method(network: ReactionNetwork, t_end: float, rng: np.random.Generator,
                  grid: np.ndarray) -> np.ndarray:
    """Gillespie's direct method with tree-walking rates; samples at ``grid``."""
    x = dict(zip(network.species, network.initial))
    out = np.zeros((len(grid), len(network.species)))
    changes = [r.net_change() for r in network.reactions]
    t, gi = 0.0, 0
    while True:
        props = np.array([evaluate_rate(r, x, network.parameters) for r in network.reactions])
        total = props.sum()
        dt = rng.exponential(1.0 / total) if total > 0 else math.inf
        t_next = t + dt
        while gi < len(grid) and grid[gi] < t_next:
            out[gi] = [x[s] for s in network.species]
            gi += 1
        if t_next > t_end:
            break
        j = int(np.searchsorted(np.cumsum(props), rng.random() * total, side="right"))
        j = min(j, len(props) - 1)
        for s, d in changes[j].items():
            x[s] += d
        t = t_next
    while gi < len(grid):
        out[gi] = [x[s] for s in network.species]
        gi += 1
    return out
