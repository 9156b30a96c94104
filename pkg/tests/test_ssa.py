import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pepamod import ssa
from pepamod.model import SpeciesRef
from pepamod.network import RateError, derive_reactions
from pepamod.parser import parse, parse_file
from pepamod.ssa import (
    EnsembleTrace,
    _Moments,
    derive_max_amounts,
    ensemble,
    make_grid,
    record_firing_counts,
    simulate,
)

from support import DATA, birth_death_text, death_text, direct_method, random_system

A = SpeciesRef("A", "c")
X = SpeciesRef("X", "c")


def net(text):
    return derive_reactions(parse(text))


def test_single_event_death():
    tr = simulate(net(death_text(1, 0.5)), 1e6, seed=3)
    assert len(tr) == 1 and tr.stalled
    assert record_firing_counts(tr) == {"d": 1}
    assert tr.final_state.tolist() == [0]


def test_empty_trajectory_counts():
    tr = simulate(net(death_text(0, 0.5)), 10.0)
    assert len(tr) == 0 and record_firing_counts(tr) == {"d": 0}


def test_single_event_time_is_exponential():
    n, k = 4000, 0.5
    network = net(death_text(1, k))
    times = np.array([simulate(network, 1e9, seed=s).times[0] for s in range(n)])
    # mean of Exp(k) is 1/k with standard error 1/(k sqrt(n))
    assert abs(times.mean() - 1 / k) < 4 / (k * math.sqrt(n))


@pytest.mark.skipif(not ssa.COMPILED, reason="compiled kernel not built")
@pytest.mark.parametrize("name", ["module1.biopepa", "module7.biopepa", "composed.biopepa"])
def test_compiled_and_pure_kernels_agree(name):
    network = derive_reactions(parse_file(DATA / name))
    for seed in range(3):
        a = simulate(network, 20.0, seed=seed)
        b = simulate(network, 20.0, seed=seed, pure_python=True)
        assert np.array_equal(a.times, b.times) and np.array_equal(a.fired, b.fired)


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(0, 2**31))
def test_kernels_agree_on_random_systems(rnd, seed):
    network = derive_reactions(random_system(rnd))
    results = []
    for pure in (False, True):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                tr = simulate(network, 1.0, seed=seed, max_events=2000, pure_python=pure)
                results.append((tr.times.tobytes(), tr.fired.tobytes()))
            except RateError as exc:
                results.append(str(exc))
    assert results[0] == results[1]


@settings(max_examples=40, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(0, 2**31))
def test_no_negative_counts_and_increasing_times(rnd, seed):
    network = derive_reactions(random_system(rnd))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            tr = simulate(network, 1.0, seed=seed, max_events=2000)
        except RateError:
            return
    assert (tr.states() >= 0).all()
    assert (np.diff(tr.times) > 0).all()
    assert len(tr.times) == 0 or tr.times[-1] <= 1.0


def test_determinism_byte_for_byte():
    network = derive_reactions(parse_file(DATA / "module1.biopepa"))
    a, b = simulate(network, 30.0, seed=11), simulate(network, 30.0, seed=11)
    assert a.times.tobytes() == b.times.tobytes() and a.fired.tobytes() == b.fired.tobytes()
    c = simulate(network, 30.0, seed=12)
    assert c.times.tobytes() != a.times.tobytes()


def test_ensemble_of_one_is_the_trajectory():
    network = derive_reactions(parse_file(DATA / "module1.biopepa"))
    trace = ensemble(network, 30.0, grid_step=1.5, n_runs=1, base_seed=5)
    tr = simulate(network, 30.0, seed=5)
    assert np.array_equal(trace.mean, tr.sample(trace.times))
    assert not trace.variance.any()


def test_ensemble_is_worker_independent():
    network = derive_reactions(parse_file(DATA / "module1.biopepa"))
    one = ensemble(network, 10.0, n_runs=12, base_seed=2)
    three = ensemble(network, 10.0, n_runs=12, base_seed=2, workers=3)
    assert np.allclose(one.mean, three.mean, rtol=0, atol=1e-9)
    assert np.allclose(one.variance, three.variance, rtol=1e-9, atol=1e-9)


def test_pure_death_mean_matches_analytic():
    a0, k, n = 1000, 0.1, 200
    trace = ensemble(net(death_text(a0, k)), 20.0, grid_step=1.0, n_runs=n)
    expected = a0 * np.exp(-k * trace.times)
    sigma = np.sqrt(a0 * np.exp(-k * trace.times) * (1 - np.exp(-k * trace.times)))
    assert (np.abs(trace.mean[:, 0] - expected) <= 3 * sigma / math.sqrt(n) + 1e-12).all()


def test_matches_direct_method_oracle():
    network = net(birth_death_text(3.0, 0.3, initial=5))
    grid = np.linspace(0, 8, 9)
    n = 1500
    nrm = ensemble(network, 8.0, grid_step=1.0, n_runs=n, base_seed=100)
    rng = np.random.default_rng(7)
    direct = np.array([direct_method(network, 8.0, rng, grid)[:, 0] for _ in range(n)])
    # two independent sample means of the same process
    se = np.sqrt(nrm.variance[:, 0] / n + direct.var(axis=0, ddof=1) / n)
    assert (np.abs(nrm.mean[:, 0] - direct.mean(axis=0)) <= 4 * se + 1e-9).all()


def test_birth_death_firing_balance():
    # started at the stationary mean, births and deaths fire equally often
    network = net(birth_death_text(5.0, 0.5, initial=10))
    trace = ensemble(network, 200.0, n_runs=50)
    fm = dict(zip(trace.actions, trace.firing_mean))
    se = math.sqrt((trace.firing_variance.sum()) / trace.n_runs)
    assert abs(fm["b"] - fm["d"]) <= 4 * se + 1
    assert fm["b"] == pytest.approx(5.0 * 200, rel=0.05)


def test_welford_merge_is_order_independent():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(37, 3))
    parts = []
    for chunk in (data[:5], data[5:20], data[20:]):
        m = _Moments.empty(3)
        for row in chunk:
            m.add(row)
        parts.append(m)
    fwd = parts[0].merge(parts[1]).merge(parts[2])
    rev = parts[2].merge(parts[1].merge(parts[0]))
    for m in (fwd, rev):
        assert np.allclose(m.mean, data.mean(axis=0))
        assert np.allclose(m.variance(), data.var(axis=0, ddof=1))


def test_grid():
    assert len(make_grid(30.0)) == 200
    assert make_grid(1.0, 0.25).tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    with pytest.raises(ValueError):
        make_grid(1.0, 0.0)
    with pytest.raises(ValueError):
        ensemble(net(death_text(3)), 1.0, n_runs=0)
    with pytest.raises(ValueError):
        simulate(net(death_text(3)), 0.0)


def test_csv_round_trip(tmp_path):
    trace = ensemble(net(birth_death_text()), 5.0, grid_step=0.5, n_runs=4)
    trace.to_csv(tmp_path / "m.csv")
    trace.to_csv(tmp_path / "v.csv", values="variance")
    back = EnsembleTrace.from_csv(tmp_path / "m.csv", tmp_path / "v.csv")
    assert back.species == trace.species
    assert np.array_equal(back.times, trace.times)
    assert np.array_equal(back.mean, trace.mean) and np.array_equal(back.variance, trace.variance)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "time,X@c"


def test_derive_max_amounts_by_hand():
    times = np.array([0.0, 1.0, 2.0])
    mean = np.array([[0.0], [40.0], [20.0]])
    var = np.array([[0.0], [100.0], [4.0]])
    trace = EnsembleTrace(times, (X,), mean, var, 25, maximum=np.array([[0.0], [47.0], [30.0]]))
    # mean + 3 * sqrt(100 / 25) = 46 at t = 1, rounded up to a multiple of 10
    assert derive_max_amounts(trace, {X: 10.0}) == {X: 50.0}
    assert derive_max_amounts(trace, {X: 1.0}) == {X: 46.0}
    capped = EnsembleTrace(times, (X,), mean, var, 25, maximum=np.array([[0.0], [41.0], [30.0]]))
    assert derive_max_amounts(capped, {X: 1.0}) == {X: 41.0}


def test_stall_is_not_an_error():
    tr = simulate(net(death_text(3, 1.0)), 1e6, seed=0)
    assert tr.stalled and tr.end_time == tr.times[-1] and tr.final_state.tolist() == [0]


def test_pure_kernel_pops_in_time_order():
    network = derive_reactions(parse_file(DATA / "composed.biopepa"))
    tr = simulate(network, 5.0, seed=1, pure_python=True)
    assert (np.diff(tr.times) >= 0).all()
