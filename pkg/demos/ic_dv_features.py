"""
Incremental-capacity and differential-voltage features of a module
==================================================================

A module of three parallel cells is charged at constant current.  The
charged capacity is fitted as a smooth function of voltage, and peaks,
valleys and areas are read off the analytic derivatives.
"""

import warnings

import numpy as np

from modsoh.curvefit import MonotonicityWarning, fit_qv
from modsoh.featext import ExtractionConfig, extract_features, find_extrema
from modsoh.synthgen import CellSpec, aged_cell, synth_module_profile

warnings.simplefilter("ignore", MonotonicityWarning)

# three cells that have lost 2%, 6% and 10% of their capacity; the
# graphite plateaus drift to higher voltage as the cells age
base = CellSpec()
cells = [aged_cell(base, fade, 0.3, 1e-3) for fade in (0.02, 0.06, 0.10)]
profile = synth_module_profile(cells, current=30.0, noise_sigma_v=1e-3, seed=1)
print(f"{len(profile.voltage_samples)} samples, "
      f"{profile.capacity_samples[-1]:.2f} Ah charged between "
      f"{profile.voltage_samples[0]:.3f} and {profile.voltage_samples[-1]:.3f} V")

# fit Q(V); the IC curve is the analytic derivative of the fit
curve = fit_qv(profile)
print(f"bandwidth {curve.bandwidth:.4f} V, ridge {curve.ridge:.2e}, "
      f"residual {curve.residual_rms:.2e} Ah (noise estimate {curve.noise_level:.2e} Ah)")

v = np.linspace(*curve.v_range, 8)
for vi, ic in zip(v, curve.ic(v)):
    print(f"  IC({vi:.3f} V) = {ic:8.2f} Ah/V")

# peaks and valleys of IC, and the matching valleys and peaks of DV
peaks, valleys = find_extrema(curve)
for p in peaks:
    print(f"IC peak   at {p.location:.4f} V, height {p.height:.2f} Ah/V")
for p in valleys:
    print(f"IC valley at {p.location:.4f} V, height {p.height:.2f} Ah/V")
dv_peaks, dv_valleys = find_extrema(curve, "dv")
for p in dv_valleys:
    print(f"DV valley at {p.location:.3f} Ah, height {p.height:.3e} V/Ah")

# the full feature vector, module-level family: peak heights and
# locations plus two partial areas around the dominant peak
for f in extract_features(profile, ExtractionConfig.module_family()):
    print(f"  {f.name:<8} {f.value:12.5g}")
