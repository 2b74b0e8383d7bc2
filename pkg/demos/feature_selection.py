"""
Greedy feature ranking with redundancy removal
==============================================

A planted table: ``x1`` drives the label through a sine, ``x3`` is an exact
rescaling of ``x1``, ``x2`` contributes linearly and ``x4`` is noise.  The
ranking should keep one of the twins, drop the other and put the noise last.
"""

import numpy as np

from modsoh.data_model import FeatureTable
from modsoh.featsel import rank_report, select_features

rng = np.random.default_rng(0)
n = 1000
x1, x2, x4 = rng.standard_normal((3, n))
y = np.sin(x1) + 0.5 * x2 + 0.1 * rng.standard_normal(n)
table = FeatureTable(("x1", "x2", "x3", "x4"), np.column_stack([x1, x2, 2 * x1, x4]), y)

state, trace = select_features(table, threshold=0.9)

# each round scores every remaining candidate
for i, it in enumerate(trace.iterations, 1):
    print(f"round {i}")
    for e in it.evaluations:
        mark = "*" if e.candidate == it.winner else " "
        print(f"  {mark} {e.candidate}: J = {e.j:.3f} = {e.relevance:.3f} - {e.avg_redundancy:.3f}"
              f" + {e.avg_complementarity:.3f}")
    for r in it.removals:
        print(f"    removed {r.feature} (normalized MI {r.value:.3f} with {r.removed_by})")

print("ranking:", [r.feature for r in rank_report(state, trace)])
print("removed:", sorted(state.removed))

# starting from a preselected feature removes its twin before any round
state, trace = select_features(table, preselected=["x1"])
print("with x1 preselected, removed up front:", [r.feature for r in trace.initial_removals])
