"""
Cell-level reproduction on the Oxford degradation data
======================================================

Requires ``Oxford_Battery_Degradation_Dataset_1.mat`` from the University
of Oxford battery intelligence lab (eight LCO pouch cells, characterised
every 100 cycles with a 1C charge and a pseudo-OCV charge).  Pass the file
path as the first argument.  The script is not part of the test suite.

Both charge rates enter the same table, so the C-rate is a feature.  SOH
is the 1C discharge capacity over the cell's first characterisation.  With
the top two ranked features the held-out RMSE should stay at or below
1% SOH.
"""

import sys
import warnings
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from modsoh.curvefit import MonotonicityWarning
from modsoh.data_model import QVProfile, SplitSpec, clean_samples, split, standardize_fit
from modsoh.errors import SohError
from modsoh.featext import ExtractionConfig, build_feature_table
from modsoh.featsel import select_features
from modsoh.pipeline import complete_rows, usable_columns
from modsoh.rvr import evaluate, train_table

warnings.simplefilter("ignore", MonotonicityWarning)
CHARGES = {"C1ch": 1.0, "OCVch": 1.0 / 18}
NOMINAL_MAH = 740.0

path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("Oxford_Battery_Degradation_Dataset_1.mat")
if not path.exists():
    sys.exit(f"dataset not found: {path}")
mat = loadmat(path, squeeze_me=True, struct_as_record=False)

# one profile per cell, characterisation and charge rate
profiles = []
for cell in sorted(k for k in mat if k.startswith("Cell")):
    cycles = sorted(c for c in mat[cell]._fieldnames if c.startswith("cyc"))
    rec0 = getattr(mat[cell], cycles[0]).C1dc
    fresh = abs(rec0.q[-1] - rec0.q[0])
    for cyc in cycles:
        rec = getattr(mat[cell], cyc)
        soh = abs(rec.C1dc.q[-1] - rec.C1dc.q[0]) / fresh
        for name, rate in CHARGES.items():
            ch = getattr(rec, name)
            q, v, _ = clean_samples(np.asarray(ch.q, float) / 1000.0, np.asarray(ch.v, float))
            try:
                profiles.append(QVProfile(q - q[0], v, float(np.mean(ch.T)), rate, soh,
                                          f"{cell}-{name}", int(cyc[3:])))
            except SohError as exc:
                print(f"skipping {cell} {cyc} {name}: {exc}")
print(f"{len(profiles)} charging profiles")

# cell-level feature family: three IC peaks, three areas, C-rate
result = build_feature_table(profiles, ExtractionConfig.cell_family())
table, dropped = usable_columns(result.table)
print(f"{len(table.feature_names)} usable features (dropped {dropped})")

# 80/20 split; ranking and scaling see only the training part
train_t, test_t = split(table, SplitSpec(0.8, seed=0))
state, _ = select_features(standardize_fit(train_t), threshold=0.9)
print("ranking:", state.selected)
print("removed:", sorted(state.removed))

top2 = state.selected[:2]
model = train_table(complete_rows(train_t, top2))
m = evaluate(model, complete_rows(test_t, top2))
print(f"features {top2}: test RMSE {100 * m['rmse']:.2f} % SOH, {model.n_rv} relevance vectors, "
      f"avg 3-sigma {100 * m['avg_three_sigma']:.2f} %, coverage {m['coverage_997']:.2f}")
print("target met" if m["rmse"] <= 0.01 else "target missed (RMSE above 1% SOH)")
