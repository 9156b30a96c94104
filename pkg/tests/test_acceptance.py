"""Acceptance criteria, each checked at its stated tolerance and time budget.

Every test appends one ``PASS``/``FAIL`` line to the acceptance summary
printed at the end of the pytest run.
"""

import math
import random
import time

import numpy as np
import pytest
from scipy import integrate, linalg, stats

from pepamod.ctmc import (
    LevelCTMC,
    ProbQuery,
    build_level_ctmc,
    eval_cumulative_reward,
    evaluate_queries,
    parse_query_file,
    sweep,
    transient,
)
from pepamod.decomp import (
    EnvironmentStub,
    ModulePartition,
    compare_traces,
    extract_module,
    fit_stub,
)
from pepamod.model import MassAction, Name, SpeciesInfo, SpeciesRef
from pepamod.network import Reaction, derive_reactions
from pepamod.parser import parse, parse_file, serialize
from pepamod.ssa import derive_max_amounts, ensemble, final_states, simulate

from support import (
    ACCEPTANCE_LINES,
    DATA,
    birth_death_text,
    death_text,
    dense_generator,
    random_ctmc,
    random_system,
)

ALPHA, STE2 = SpeciesRef("alpha", "extra"), SpeciesRef("Ste2", "mem")
BAR1X, ACTIVE = SpeciesRef("Bar1active", "extra"), SpeciesRef("Ste2active", "mem")
FUS3 = SpeciesRef("Fus3PP", "cyto")
MODULE1_SPECIES = (ALPHA, STE2, ACTIVE, BAR1X)


def record(name: str, ok: bool, detail: str, elapsed: float, budget: float | None = None) -> None:
    within = budget is None or elapsed < budget
    limit = f" (budget {budget:g} s)" if budget is not None else ""
    line = f"{'PASS' if ok and within else 'FAIL'}  {name}: {detail}; {elapsed:.2f} s{limit}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


def load(name):
    return derive_reactions(parse_file(DATA / name))


def with_maxima(network, t_end, runs=100, seed=0):
    """Species information completed with maxima derived from an ensemble."""
    trace = ensemble(network, t_end, n_runs=runs, base_seed=seed)
    steps = {s: network.species_info[s].step_size for s in network.species}
    maxima = derive_max_amounts(trace, steps)
    return {s: SpeciesInfo(s, steps[s], maxima[s]) for s in network.species}


@pytest.fixture(scope="module")
def module1_ctmc():
    net = load("module1.biopepa")
    info = with_maxima(net, 30.0)
    return net, info, build_level_ctmc(net, info)


@pytest.fixture(scope="module")
def module7_ctmc():
    net = load("module7.biopepa")
    info = with_maxima(net, 300.0)
    return net, info, build_level_ctmc(net, info)


def test_parser_round_trip():
    start = time.perf_counter()
    bad = [n for n in ("module1.biopepa", "module7.biopepa", "composed.biopepa")
           if parse(serialize(parse_file(DATA / n))) != parse_file(DATA / n)]
    failures = 0
    for seed in range(1000):
        system = random_system(random.Random(seed))
        failures += parse(serialize(system)) != system
    elapsed = time.perf_counter() - start
    record("parser round-trip", not bad and failures == 0,
           f"3 corpus models, 1000 random systems, {len(bad) + failures} mismatches", elapsed, 5.0)


def test_reaction_derivation_oracle():
    start = time.perf_counter()
    expected = (
        Reaction("v1", reactants=((ALPHA, 1),), activators=(BAR1X,), rate=MassAction(Name("k1"))),
        Reaction("v2", reactants=((STE2, 1),), products=((ACTIVE, 1),), activators=(ALPHA,),
                 rate=MassAction(Name("k2"))),
        Reaction("v3", reactants=((ACTIVE, 1),), products=((STE2, 1),), rate=MassAction(Name("k3"))),
        Reaction("v4", reactants=((ACTIVE, 1),), rate=MassAction(Name("k4"))),
        Reaction("v5", reactants=((STE2, 1),), rate=MassAction(Name("k5"))),
        Reaction("v38", products=((BAR1X, 1),), rate=MassAction(Name("k0"))),
    )
    got = load("module1.biopepa").reactions
    record("reaction derivation", got == expected, f"{len(got)} reactions, exact structural match",
           time.perf_counter() - start)


def test_ssa_exactness_analytic():
    start = time.perf_counter()
    a0, k, n = 1000, 0.1, 1000
    trace = ensemble(derive_reactions(parse(death_text(a0, k))), 30.0, grid_step=1.5, n_runs=n)
    t = trace.times[1:21]
    mean = trace.mean[1:21, 0]
    p = np.exp(-k * t)
    sigma = np.sqrt(a0 * p * (1 - p))
    z = np.abs(mean - a0 * p) / (sigma / math.sqrt(n))
    elapsed = time.perf_counter() - start
    record("SSA exactness (analytic)", len(t) == 20 and bool((z <= 3).all()),
           f"{len(t)} grid points, largest deviation {z.max():.2f} sigma/sqrt(n)", elapsed, 10.0)


def test_ssa_exactness_ctmc_cross_oracle():
    start = time.perf_counter()
    network = derive_reactions(parse(birth_death_text(2.0, 0.25, initial=0, cap=40)))
    chain = build_level_ctmc(network)
    t, n = 4.0, 10_000
    exact = np.zeros(chain.max_levels[0] + 1)
    exact[chain.states[:, 0]] = transient(chain, t).probabilities
    counts = np.bincount(final_states(network, t, n, base_seed=2024)[:, 0], minlength=len(exact))
    observed, expected, acc_o, acc_e = [], [], 0.0, 0.0
    for o, e in zip(counts[:len(exact)], exact * n):
        acc_o, acc_e = acc_o + o, acc_e + e
        if acc_e >= 5:
            observed.append(acc_o)
            expected.append(acc_e)
            acc_o = acc_e = 0.0
    observed[-1] += acc_o + counts[len(exact):].sum()
    expected[-1] += acc_e
    pvalue = stats.chisquare(observed, expected).pvalue
    record("SSA exactness (CTMC cross-oracle)", chain.n_states <= 50 and pvalue > 0.01,
           f"{chain.n_states} states, {n} runs, {len(observed)} bins, p = {pvalue:.3f}",
           time.perf_counter() - start, 60.0)


def test_uniformization_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(12345)
    worst_abs = worst_rel = 0.0
    for _ in range(100):
        n, src, dst, rate = random_ctmc(rng, n_max=20)
        labels = rng.integers(0, 2, len(src))
        chain = LevelCTMC.from_transitions(n, src, dst, rate, label=labels, labels=("a", "b"))
        q = dense_generator(n, src, dst, rate)
        t = float(rng.uniform(0.1, 3.0))
        worst_abs = max(worst_abs, float(np.max(np.abs(transient(chain, t).probabilities - linalg.expm(q * t)[0]))))
        reward = np.bincount(src[labels == 0], weights=rate[labels == 0], minlength=n)
        exact, _ = integrate.quad_vec(lambda u: linalg.expm(q * u)[0] @ reward, 0.0, t,
                                      epsabs=1e-13, epsrel=1e-11)
        got = eval_cumulative_reward(chain, ["a"], [t])[0]
        if exact > 0:
            worst_rel = max(worst_rel, abs(got - float(exact)) / float(exact))
    record("uniformization oracle", worst_abs <= 1e-8 and worst_rel <= 1e-6,
           f"100 chains, max-norm error {worst_abs:.2e}, cumulative relative error {worst_rel:.2e}",
           time.perf_counter() - start, 30.0)


def test_level_count_reproduction(module1_ctmc, module7_ctmc):
    start = time.perf_counter()
    _, _, m1 = module1_ctmc
    _, _, m7 = module7_ctmc
    c1 = m1.level_counts()
    c7 = m7.level_counts()
    target1 = {STE2: 35, ALPHA: 20, ACTIVE: 17, BAR1X: 5}
    ok1 = all(abs(c1[s] - v) <= 2 for s, v in target1.items())
    ok7 = abs(c7[FUS3] - 12) <= 1 and all(abs(v - 8) <= 1 for s, v in c7.items() if s != FUS3)
    exact = all(c1[s] == v for s, v in target1.items()) and c7[FUS3] == 12 and \
        all(v == 8 for s, v in c7.items() if s != FUS3)
    detail = ("module 1 " + "/".join(str(c1[s]) for s in target1) + " vs 35/20/17/5, module 7 "
              + f"{c7[FUS3]} for Fus3PP@cyto and "
              + "/".join(str(v) for s, v in c7.items() if s != FUS3) + " for the rest"
              + ("; exact" if exact else "; not exact"))
    record("level-count reproduction", ok1 and ok7, detail, time.perf_counter() - start)


@pytest.fixture(scope="module")
def composed_setup():
    net = load("composed.biopepa")
    return net, ModulePartition.load(DATA / "composed_partition.yaml")


def test_stub_fitting(composed_setup):
    net, _ = composed_setup
    reference = ensemble(net, 30.0, n_runs=100, base_seed=0)
    start = time.perf_counter()
    stub = fit_stub(reference, BAR1X, hint="creation")
    elapsed = time.perf_counter() - start
    record("stub fitting", 1.5 <= stub.rate <= 1.8, f"k0 = {stub.rate:.4f} (target range [1.5, 1.8])",
           elapsed, 5.0)


def test_decomposition_fidelity_ordering(composed_setup):
    start = time.perf_counter()
    net, part = composed_setup
    rows = []
    for seed in range(10):
        base = 1000 * seed
        reference = ensemble(net, 30.0, n_runs=100, base_seed=base)
        fitted = extract_module(net, part, "module1", [fit_stub(reference, BAR1X, hint="creation")])
        fixed = extract_module(net, part, "module1", [EnvironmentStub.fixed(BAR1X, 25)])
        e_fit = compare_traces(ensemble(fitted, 30.0, n_runs=100, base_seed=base + 500), reference,
                               MODULE1_SPECIES).worst_nrmse
        e_fix = compare_traces(ensemble(fixed, 30.0, n_runs=100, base_seed=base + 500), reference,
                               MODULE1_SPECIES).worst_nrmse
        rows.append((e_fit, e_fix))
    ok = all(a <= 0.10 and a < b for a, b in rows)
    fits = [a for a, _ in rows]
    fixes = [b for _, b in rows]
    record("decomposition fidelity ordering", ok,
           f"10 seeds, fitted-stub NRMSE {min(fits):.3f}..{max(fits):.3f}, "
           f"FixedInitial-25 NRMSE {min(fixes):.3f}..{max(fixes):.3f}", time.perf_counter() - start)


def test_query_shapes(module1_ctmc, module7_ctmc):
    start = time.perf_counter()
    net1, info1, m1 = module1_ctmc
    net7, info7, m7 = module7_ctmc
    notes, ok = [], True

    # Module 1: P[Ste2active > 0] rises above 0.95, then falls
    q = next(x for x in parse_query_file(DATA / "module1.queries") if x.name == "active_gt0")
    p = np.array([v for _, _, v in evaluate_queries(m1, [q])])
    peak = int(np.argmax(p))
    shape1 = p[peak] > 0.95 and p[-1] < p[peak]
    ok &= shape1
    notes.append(f"P[Ste2active>0] peak {p[peak]:.3f} at t={q.times[peak]:g}, final {p[-1]:.3f}")

    # Module 1: k0 sweep ordered pointwise over the late half
    qs = parse_query_file(DATA / "module1_sweep.queries")[0]
    rows = sweep(net1, "k0", [0.0, 1.66, 3.32], qs, info1)
    curves = {}
    for v, t, r in rows:
        curves.setdefault(v, []).append((t, r))
    late = [[r for t, r in curves[v] if t >= 15.0] for v in (0.0, 1.66, 3.32)]
    ordered = all(a >= b - 1e-12 for a, b in zip(late[0], late[1])) and \
        all(a >= b - 1e-12 for a, b in zip(late[1], late[2]))
    ok &= ordered
    notes.append("k0 sweep at t=30: " + ", ".join(f"{c[-1]:.3f}" for c in late))

    # Module 7: larger k38 reaches 1 faster
    q7 = parse_query_file(DATA / "module7_sweep.queries")[0]
    rows7 = sweep(net7, "k38", [0.01, 0.1], q7, info7)
    slow = np.array([r for v, _, r in rows7 if v == 0.01])
    fast = np.array([r for v, _, r in rows7 if v == 0.1])
    fig9 = bool((fast >= slow - 1e-12).all() and (fast > slow).any())
    ok &= fig9
    mid = len(slow) // 10
    notes.append(f"k38 sweep at t={q7.times[mid]:g}: {slow[mid]:.3f} vs {fast[mid]:.3f}")

    # Module 7: Ste12 activation ratio nondecreasing up to 0.02 ripple
    qr = next(x for x in parse_query_file(DATA / "module7.queries") if x.name == "ste12_ratio")
    ratio = np.array([v for _, _, v in evaluate_queries(m7, [qr])])
    ripple = float(np.max(np.maximum.accumulate(ratio) - ratio))
    ok &= ripple <= 0.02 and ratio[-1] > 0.9
    notes.append(f"Ste12 ratio final {ratio[-1]:.4f}, ripple {ripple:.2e}")

    record("query shape checks", bool(ok), "; ".join(notes), time.perf_counter() - start)


def test_conservation_invariants(module1_ctmc, module7_ctmc):
    start = time.perf_counter()
    worst = 0.0
    negative = 0
    chains = [module1_ctmc[2], module7_ctmc[2],
              build_level_ctmc(derive_reactions(parse(birth_death_text())))]
    horizons = [30.0, 300.0, 10.0]
    for chain, horizon in zip(chains, horizons):
        negative += int((chain.states < 0).sum()) + int((chain.states > chain.max_levels).sum())
        for d in transient(chain, list(np.linspace(0, horizon, 7))):
            worst = max(worst, abs(d.total() - 1.0))
    rng = np.random.default_rng(7)
    for _ in range(50):
        n, src, dst, rate = random_ctmc(rng)
        for d in transient(LevelCTMC.from_transitions(n, src, dst, rate), [0.5, 2.0]):
            worst = max(worst, abs(d.total() - 1.0))
    for name in ("module1.biopepa", "module7.biopepa", "composed.biopepa"):
        net = load(name)
        for seed in range(5):
            negative += int((simulate(net, 30.0, seed=seed).states() < 0).sum())
    record("conservation invariants", worst <= 1e-9 and negative == 0,
           f"largest mass defect {worst:.1e}, {negative} negative counts or out-of-range levels",
           time.perf_counter() - start)
