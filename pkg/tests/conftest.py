import numpy as np
import pytest

from modsoh.data_model import QVProfile
from modsoh.synthgen import AgingSpec, CellCurve, CellSpec, synth_dataset


def voltage_sampled_profile(spec: CellSpec, n=64, window=(3.4, 4.1), noise=0.0, seed=0, **kw):
    """Profile of one cell sampled uniformly in voltage.

    Capacity is counted from the window's lower end.  ``noise`` perturbs
    the voltages; the record is re-sorted so it stays a valid charge.
    """
    cell = CellCurve(spec)
    v = np.linspace(*window, n)
    q = cell(v) - cell(window[0])
    if noise > 0:
        v = np.sort(v + np.random.default_rng(seed).normal(0.0, noise, n))
    kw.setdefault("temperature", 25.0)
    kw.setdefault("c_rate", 0.5)
    return QVProfile(q, v, **kw)


def dense_argmax(f, lo, hi, n=65536):
    """Locations of strict local maxima of ``f`` on an ``n``-point grid."""
    x = np.linspace(lo, hi, n)
    y = f(x)
    i = np.flatnonzero((y[1:-1] > y[:-2]) & (y[1:-1] >= y[2:])) + 1
    return x[i]


def dense_argmin(f, lo, hi, n=65536):
    return dense_argmax(lambda x: -f(x), lo, hi, n)


@pytest.fixture(scope="session")
def small_dataset():
    """Three modules, eight checkpoints: quick to extract, still labelled."""
    profiles, truth = synth_dataset(AgingSpec(n_modules=3, n_checkpoints=8))
    return profiles, truth


@pytest.fixture(scope="session")
def small_extraction(small_dataset):
    from modsoh.featext import build_feature_table

    return build_feature_table(small_dataset[0])


def planted_table(n=1000, seed=0):
    """x1 signal, x3 = 2 x1, x2 weaker signal, x4 independent noise."""
    from modsoh.data_model import FeatureTable

    rng = np.random.default_rng(seed)
    x1, x2, x4 = rng.standard_normal((3, n))
    y = np.sin(x1) + 0.5 * x2 + 0.1 * rng.standard_normal(n)
    return FeatureTable(("x1", "x2", "x3", "x4"), np.column_stack([x1, x2, 2 * x1, x4]), y)


def trace_violations(state, trace):
    """Every breach of the partition, greedy-step and removal rules in a run."""
    out = []
    universe = set(state.all)
    selected = list(state.preselected)
    removed = {r.feature for r in trace.initial_removals}
    for r in trace.initial_removals:
        if r.removed_by not in state.preselected or r.value < state.threshold:
            out.append(f"initial removal {r}")
    for n, it in enumerate(trace.iterations):
        s, rm, u = set(it.selected_before), set(it.removed_before), set(it.candidates_before)
        if list(it.selected_before) != selected or rm != removed:
            out.append(f"iteration {n}: state does not continue the previous one")
        if s | rm | u != universe or s & rm or s & u or rm & u:
            out.append(f"iteration {n}: not a partition")
        if {e.candidate for e in it.evaluations} != u:
            out.append(f"iteration {n}: evaluated set differs from candidates")
        best = max(e.j for e in it.evaluations)
        win = trace.winner_evaluation(it)
        if win.j < best:
            out.append(f"iteration {n}: winner {it.winner} is not the argmax")
        for r in it.removals:
            if r.removed_by != it.winner or r.value < state.threshold or r.feature not in u:
                out.append(f"iteration {n}: unsound removal {r}")
        selected.append(it.winner)
        removed |= {r.feature for r in it.removals}
    if not state.is_partition() or state.candidates:
        out.append("final state is not a complete partition")
    if selected != state.selected or removed != state.removed:
        out.append("trace does not reproduce the final state")
    return out


def random_selection_instance(seed):
    """A small table with planted twins, signals and noise."""
    from modsoh.data_model import FeatureTable

    rng = np.random.default_rng(seed)
    n = int(rng.integers(60, 160))
    p = int(rng.integers(2, 9))
    base = rng.standard_normal((n, p))
    for j in range(1, p):
        if rng.random() < 0.3:
            base[:, j] = rng.uniform(0.5, 3) * base[:, int(rng.integers(0, j))]
    w = rng.normal(size=p) * (rng.random(p) < 0.6)
    y = np.tanh(base @ w) + 0.1 * rng.standard_normal(n)
    names = tuple(f"f{j}" for j in range(p))
    threshold = float(rng.choice([0.6, 0.9, 1.0]))
    return FeatureTable(names, base, y), threshold
