"""Peak, valley, area and partial-area features from fitted IC/DV curves.

The functions here only need a curve object exposing ``qc(v)``, ``ic(v)``
and ``v_range``; :class:`~modsoh.curvefit.IcDvCurve` additionally offers
``ic_slope`` (used to polish extremum locations to machine precision) and
``supported`` (used to ignore shape between widely spaced samples).

DV extrema are not searched separately.  Since ``DV(Qc(V)) = 1 / IC(V)`` and
``Qc`` is increasing wherever IC is positive, every IC peak is a DV valley
and every IC valley a DV peak, at capacity ``Qc(V) - Qc(v_min)``.  Deriving
one set from the other keeps the reciprocal and area identities exact.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .curvefit import IcDvCurve, fit_qv
from .data_model import FeatureTable, QVProfile, fmt_float
from .errors import RangeError, ValidationError

GOLDEN_TOL = 1e-5
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

CHARGING_FEATURES = ("TEMP", "C_RATE")


@dataclass(frozen=True)
class Extremum:
    location: float
    height: float


@dataclass(frozen=True)
class Extrema:
    """Alternating peaks and valleys of one curve, each sorted by location."""

    peaks: tuple[Extremum, ...]
    valleys: tuple[Extremum, ...]

    def __iter__(self):
        return iter((self.peaks, self.valleys))


@dataclass(frozen=True)
class CurveFeature:
    name: str
    value: float


@dataclass(frozen=True)
class PartialAreaSpec:
    """How to measure a partial IC area around one peak.

    ``target_peak_index`` is 1-based; ``None`` targets the highest peak.
    """

    mode: str = "voltage_window"
    cutoff: float = 0.0
    half_width: float = 0.025
    target_peak_index: int | None = None

    def __post_init__(self):
        if self.mode == "cutoff_line":
            if not self.cutoff > 0:
                raise ValidationError("cutoff_line mode needs cutoff > 0")
        elif self.mode == "voltage_window":
            if not self.half_width > 0:
                raise ValidationError("voltage_window mode needs half_width > 0")
        else:
            raise ValidationError(f"unknown partial-area mode {self.mode!r}")
        if self.target_peak_index is not None and self.target_peak_index < 1:
            raise ValidationError("target_peak_index is 1-based")


@dataclass(frozen=True)
class ExtractionConfig:
    """Settings for :func:`extract_features`.

    ``min_prominence`` is a fraction of the largest IC value on the grid;
    adjacent peak/valley pairs closer than that in height are treated as
    noise and dropped together.
    """

    bandwidth: float | None = None
    ridge: float | None = None
    grid_size: int = 512
    edge_fraction: float = 0.01
    min_prominence: float = 0.05
    partial_areas: tuple[PartialAreaSpec, ...] = (PartialAreaSpec(),)
    include_peak_areas: bool = True
    charging_features: tuple[str, ...] = CHARGING_FEATURES

    def __post_init__(self):
        object.__setattr__(self, "partial_areas", tuple(self.partial_areas))
        object.__setattr__(self, "charging_features", tuple(self.charging_features))
        if self.grid_size < 64:
            raise ValidationError("grid_size must be at least 64")
        bad = set(self.charging_features) - set(CHARGING_FEATURES)
        if bad:
            raise ValidationError(f"unknown charging features {sorted(bad)}")

    @classmethod
    def cell_family(cls, **kw) -> "ExtractionConfig":
        """Peak/valley features, peak areas and C-rate; no partial areas."""
        kw.setdefault("partial_areas", ())
        kw.setdefault("charging_features", ("C_RATE",))
        return cls(**kw)

    @classmethod
    def module_family(cls, **kw) -> "ExtractionConfig":
        """Heights, locations and two partial areas of a merged module peak."""
        kw.setdefault("partial_areas", (PartialAreaSpec(half_width=0.025),
                                        PartialAreaSpec(half_width=0.05)))
        kw.setdefault("include_peak_areas", False)
        kw.setdefault("charging_features", ())
        return cls(**kw)


# ---------------------------------------------------------------------------
# extrema

def _golden(f, a, b, tol=GOLDEN_TOL):
    """Golden-section search for a minimum of ``f`` on ``[a, b]``."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _refine(curve, a, b, sign):
    """Locate the extremum of ``sign * IC`` bracketed by ``[a, b]``."""
    x = _golden(lambda t: -sign * float(curve.ic(t)), a, b)
    slope = getattr(curve, "ic_slope", None)
    if slope is not None:
        lo, hi = max(a, x - 2 * GOLDEN_TOL), min(b, x + 2 * GOLDEN_TOL)
        s_lo, s_hi = float(slope(lo)), float(slope(hi))
        if s_lo * s_hi < 0:
            x = brentq(slope, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return x


def _prune(items, left, right, threshold):
    """Drop low-prominence extrema from an alternating ``(v, h, kind)`` list.

    ``left`` and ``right`` are the curve values at the range ends.  An end
    extremum that barely rises above (or dips below) its end value is
    dropped alone; an interior peak/valley pair with a small height step is
    dropped together, which preserves alternation.
    """
    items = list(items)
    while items:
        worst, drop = threshold, None
        for i in range(len(items) - 1):
            step = abs(items[i][1] - items[i + 1][1])
            if step < worst:
                worst, drop = step, (i, i + 1)
        for i, end in ((0, left), (len(items) - 1, right)):
            v, h, kind = items[i]
            step = (h - end) if kind == "peak" else (end - h)
            if step < worst:
                worst, drop = step, (i,)
        if drop is None:
            break
        items = [it for j, it in enumerate(items) if j not in drop]
    return items


def _alternate(items):
    """Collapse runs of the same kind to the most extreme member."""
    out = []
    for it in items:
        if out and out[-1][2] == it[2]:
            keep_new = it[1] > out[-1][1] if it[2] == "peak" else it[1] < out[-1][1]
            if keep_new:
                out[-1] = it
        else:
            out.append(it)
    return out


def _ic_extrema(curve, grid_size=512, edge_fraction=0.01, min_prominence=0.05):
    v_lo, v_hi = curve.v_range
    grid = np.linspace(v_lo, v_hi, grid_size)
    y = np.asarray(curve.ic(grid), dtype=float)
    dy = np.diff(y)
    items = []
    for i in range(1, grid_size - 1):
        if dy[i - 1] > 0 and dy[i] <= 0 and (dy[i] < 0 or _next_nonzero(dy, i) < 0):
            kind = "peak"
        elif dy[i - 1] < 0 and dy[i] >= 0 and (dy[i] > 0 or _next_nonzero(dy, i) > 0):
            kind = "valley"
        else:
            continue
        x = _refine(curve, grid[i - 1], grid[i + 1], 1.0 if kind == "peak" else -1.0)
        items.append((x, float(curve.ic(x)), kind))

    margin = edge_fraction * (v_hi - v_lo)
    items = [it for it in items if v_lo + margin < it[0] < v_hi - margin]
    supported = getattr(curve, "supported", None)
    if supported is not None:
        items = [it for it in items if bool(supported(it[0]))]
    # DV is undefined where IC is not positive
    items = _alternate([it for it in items if it[1] > 0])
    if min_prominence > 0 and items:
        inside = (grid > v_lo + margin) & (grid < v_hi - margin)
        if supported is not None:
            inside &= np.asarray(supported(grid), dtype=bool)
        ends = y[inside] if inside.any() else y
        threshold = min_prominence * float(np.max(np.abs(ends)))
        items = _alternate(_prune(items, float(ends[0]), float(ends[-1]), threshold))
    # a valley separates two peaks; one before the first peak is only the foot
    while items and items[0][2] == "valley":
        items.pop(0)
    while items and items[-1][2] == "valley":
        items.pop()
    return items


def _next_nonzero(dy, i):
    for d in dy[i:]:
        if d != 0:
            return d
    return 0.0


def find_extrema(curve, which: str = "ic", grid_size: int = 512, *,
                 edge_fraction: float = 0.01, min_prominence: float = 0.05) -> Extrema:
    """Peaks and valleys of the IC or DV curve.

    Candidates come from sign changes of the slope on a ``grid_size`` point
    voltage grid and are refined by golden-section search to 1e-5 V, then
    polished on the analytic slope when the curve provides one.  Extrema
    within ``edge_fraction`` of either end, in poorly sampled stretches, at
    non-positive IC, or less prominent than ``min_prominence`` are dropped,
    as are valleys not enclosed by two peaks.

    For ``which="dv"`` locations are capacities measured from
    ``Qc(v_min)`` and heights are ``1 / IC``; DV peaks correspond to IC
    valleys and DV valleys to IC peaks.
    """
    if grid_size < 64:
        raise ValidationError("grid_size must be at least 64")
    items = _ic_extrema(curve, grid_size, edge_fraction, min_prominence)
    if which == "ic":
        peaks = [Extremum(v, h) for v, h, k in items if k == "peak"]
        valleys = [Extremum(v, h) for v, h, k in items if k == "valley"]
    elif which == "dv":
        q0 = float(curve.qc(curve.v_range[0]))
        peaks = [Extremum(float(curve.qc(v)) - q0, 1.0 / h) for v, h, k in items if k == "valley"]
        valleys = [Extremum(float(curve.qc(v)) - q0, 1.0 / h) for v, h, k in items if k == "peak"]
    else:
        raise ValidationError(f"which must be 'ic' or 'dv', not {which!r}")
    return Extrema(tuple(peaks), tuple(valleys))


# ---------------------------------------------------------------------------
# areas

def ic_peak_areas(curve, valleys: Sequence[float]) -> list[float]:
    """Capacity charged between consecutive IC valleys.

    Area 1 runs from the lower end of the range to the first valley and the
    last area from the last valley to the upper end, so the areas telescope
    to the total fitted capacity.
    """
    valleys = [float(getattr(x, "location", x)) for x in valleys]
    v_lo, v_hi = curve.v_range
    if any(b <= a for a, b in zip(valleys, valleys[1:])):
        raise ValidationError("valleys must be strictly increasing")
    if any(not (v_lo <= x <= v_hi) for x in valleys):
        raise RangeError("valley outside the fitted voltage range")
    q = np.asarray(curve.qc(np.array([v_lo, *valleys, v_hi])), dtype=float)
    return [float(b - a) for a, b in zip(q[:-1], q[1:])]


def _target_peak(spec: PartialAreaSpec, peaks):
    if not peaks:
        raise ValidationError("partial area requested but the curve has no peaks")
    if spec.target_peak_index is None:
        return max(peaks, key=lambda p: p.height)
    if spec.target_peak_index > len(peaks):
        raise ValidationError(f"peak {spec.target_peak_index} requested but only {len(peaks)} found")
    return peaks[spec.target_peak_index - 1]


def ic_partial_area(curve, spec: PartialAreaSpec, peaks, valleys=()) -> tuple[float, bool]:
    """Partial IC area around the target peak.

    Returns ``(area, flag)``.  ``flag`` is True when the cutoff lies at or
    above the peak so the area is zero.  In cutoff mode the area above the
    line over the contiguous interval ``[a, b]`` where IC exceeds the cutoff
    is ``Qc(b) - Qc(a) - cutoff * (b - a)``, which is exact for the fitted
    curve.
    """
    peak = _target_peak(spec, peaks)
    p = float(peak.location)
    v_lo, v_hi = curve.v_range
    if spec.mode == "voltage_window":
        a, b = p - spec.half_width, p + spec.half_width
        if b <= v_lo or a >= v_hi:
            raise RangeError("partial-area window lies outside the fitted range")
        a, b = max(a, v_lo), min(b, v_hi)
        return float(curve.qc(b) - curve.qc(a)), False

    cutoff = spec.cutoff
    if float(curve.ic(p)) <= cutoff:
        return 0.0, True
    f = lambda t: float(curve.ic(t)) - cutoff
    a = _crossing(f, p, v_lo)
    b = _crossing(f, p, v_hi)
    return float(curve.qc(b) - curve.qc(a) - cutoff * (b - a)), False


def _crossing(f, start, end, n=512):
    """First point from ``start`` toward ``end`` where ``f`` drops to zero."""
    xs = np.linspace(start, end, n)
    prev = start
    for x in xs[1:]:
        if f(x) <= 0:
            return brentq(f, prev, x, xtol=1e-14) if f(prev) > 0 else prev
        prev = x
    return end


# ---------------------------------------------------------------------------
# per-profile extraction and alignment

@dataclass(frozen=True)
class ProfileFeatures:
    """Everything extracted from one profile before alignment."""

    profile: QVProfile
    curve: IcDvCurve
    peaks: tuple[Extremum, ...]
    valleys: tuple[Extremum, ...]


@dataclass(frozen=True)
class Reference:
    """Expected extremum layout, taken from the freshest profile."""

    peak_locations: tuple[float, ...]
    valley_locations: tuple[float, ...]
    dominant: int = 0

    @classmethod
    def from_features(cls, pf: ProfileFeatures) -> "Reference":
        peaks = pf.peaks
        dominant = int(np.argmax([p.height for p in peaks])) if peaks else 0
        return cls(tuple(p.location for p in peaks), tuple(v.location for v in pf.valleys), dominant)


def analyse_profile(profile: QVProfile, config: ExtractionConfig = ExtractionConfig()) -> ProfileFeatures:
    curve = fit_qv(profile, config.bandwidth, config.ridge)
    peaks, valleys = find_extrema(curve, "ic", config.grid_size, edge_fraction=config.edge_fraction,
                                  min_prominence=config.min_prominence)
    return ProfileFeatures(profile, curve, peaks, valleys)


def _match(found: Sequence[Extremum], ref: Sequence[float]) -> list[Extremum | None]:
    """Order-preserving assignment of found extrema to reference slots.

    With equal counts this is rank by location.  Otherwise the subset
    pairing that minimizes total absolute location error is used and
    unmatched slots are ``None``.
    """
    if len(found) == len(ref):
        return list(found)
    slots: list[Extremum | None] = [None] * len(ref)
    m = min(len(found), len(ref))
    best, best_cost = None, math.inf
    for fi in itertools.combinations(range(len(found)), m):
        for ri in itertools.combinations(range(len(ref)), m):
            cost = sum(abs(found[a].location - ref[b]) for a, b in zip(fi, ri))
            if cost < best_cost:
                best, best_cost = (fi, ri), cost
    if best is not None:
        for a, b in zip(*best):
            slots[b] = found[a]
    return slots


def feature_names(reference: Reference, config: ExtractionConfig) -> list[str]:
    """Column names implied by a reference layout, in output order."""
    n_p, n_v = len(reference.peak_locations), len(reference.valley_locations)
    names = []
    for k in range(1, n_p + 1):
        names += [f"IC_PH_{k}", f"IC_PL_{k}"]
    for k in range(1, n_v + 1):
        names += [f"IC_VH_{k}", f"IC_VL_{k}"]
    for k in range(1, n_v + 1):
        names += [f"DV_PH_{k}", f"DV_PL_{k}"]
    for k in range(1, n_p + 1):
        names += [f"DV_VH_{k}", f"DV_VL_{k}"]
    if config.include_peak_areas and n_p > 0:
        names += [f"IC_AR_{k}" for k in range(1, n_v + 2)]
    if n_p > 0:
        names += [f"IC_PA_{k}" for k in range(1, len(config.partial_areas) + 1)]
    names += list(config.charging_features)
    return names


def feature_values(pf: ProfileFeatures, config: ExtractionConfig,
                   reference: Reference | None = None) -> dict[str, float]:
    """Feature values for one profile; absent features are left out.

    Without a ``reference`` the profile is its own reference, so every
    extremum found is reported.
    """
    if reference is None:
        reference = Reference.from_features(pf)
    curve = pf.curve
    q0 = float(curve.qc(curve.v_range[0]))
    peaks = _match(pf.peaks, reference.peak_locations)
    valleys = _match(pf.valleys, reference.valley_locations)
    out: dict[str, float] = {}
    for k, p in enumerate(peaks, 1):
        if p is not None:
            out[f"IC_PH_{k}"] = p.height
            out[f"IC_PL_{k}"] = p.location
            out[f"DV_VH_{k}"] = 1.0 / p.height
            out[f"DV_VL_{k}"] = float(curve.qc(p.location)) - q0
    for k, v in enumerate(valleys, 1):
        if v is not None:
            out[f"IC_VH_{k}"] = v.height
            out[f"IC_VL_{k}"] = v.location
            out[f"DV_PH_{k}"] = 1.0 / v.height
            out[f"DV_PL_{k}"] = float(curve.qc(v.location)) - q0
    if config.include_peak_areas and peaks:
        bounds = [curve.v_range[0]] + [None if v is None else v.location for v in valleys] \
            + [curve.v_range[1]]
        for k in range(1, len(bounds)):
            a, b = bounds[k - 1], bounds[k]
            if a is not None and b is not None:
                out[f"IC_AR_{k}"] = float(curve.qc(b) - curve.qc(a))
    if peaks:
        for k, spec in enumerate(config.partial_areas, 1):
            if spec.target_peak_index is None:
                target = peaks[reference.dominant]
            elif spec.target_peak_index <= len(peaks):
                target = peaks[spec.target_peak_index - 1]
            else:
                target = None
            if target is not None:
                fixed = PartialAreaSpec(spec.mode, spec.cutoff, spec.half_width, 1)
                out[f"IC_PA_{k}"] = ic_partial_area(curve, fixed, [target])[0]
    if "TEMP" in config.charging_features:
        out["TEMP"] = pf.profile.temperature
    if "C_RATE" in config.charging_features:
        out["C_RATE"] = pf.profile.c_rate
    return out


def extract_features(profile: QVProfile, config: ExtractionConfig = ExtractionConfig(),
                     reference: Reference | None = None) -> list[CurveFeature]:
    """Fit the profile and return every catalog feature found on its curves."""
    pf = analyse_profile(profile, config)
    if reference is None:
        reference = Reference.from_features(pf)
    values = feature_values(pf, config, reference)
    return [CurveFeature(n, values[n]) for n in feature_names(reference, config) if n in values]


def _freshest(analysed: Sequence[ProfileFeatures]) -> ProfileFeatures:
    def key(pf):
        p = pf.profile
        soh = -math.inf if p.soh_label is None else p.soh_label
        return (-soh, p.cycle, p.source_id)
    return min(analysed, key=key)


@dataclass
class ExtractionResult:
    table: FeatureTable
    reference: Reference
    analysed: list[ProfileFeatures] = field(repr=False)


def build_feature_table(profiles: Sequence[QVProfile], config: ExtractionConfig = ExtractionConfig(),
                        reference: Reference | None = None, analysed=None) -> ExtractionResult:
    """Extract and align features for many profiles into one table.

    The expected extremum layout comes from the freshest profile (highest
    SOH label, then lowest cycle) unless ``reference`` is given.  Entries a
    profile lacks are NaN and masked.
    """
    if not profiles:
        raise ValidationError("no profiles to extract")
    if analysed is None:
        analysed = [analyse_profile(p, config) for p in profiles]
    if reference is None:
        reference = Reference.from_features(_freshest(analysed))
    names = feature_names(reference, config)
    rows = np.full((len(analysed), len(names)), np.nan)
    for i, pf in enumerate(analysed):
        values = feature_values(pf, config, reference)
        for j, n in enumerate(names):
            if n in values:
                rows[i, j] = values[n]
    labels = None
    if all(pf.profile.soh_label is not None for pf in analysed):
        labels = [pf.profile.soh_label for pf in analysed]
    keys = [pf.profile.key for pf in analysed]
    return ExtractionResult(FeatureTable(names, rows, labels, keys=keys), reference, list(analysed))


def write_curve_dump(curve: IcDvCurve, path, source_id: str = "", cycle: int = 0,
                     n: int = 512, append: bool = False) -> None:
    """Write ``(v, qc_fit, ic, dv)`` samples of a fitted curve.

    DV is left blank where ``|IC| < 1e-9``.
    """
    v = np.linspace(*curve.v_range, n)
    q = curve.qc(v)
    ic = curve.ic(v)
    with Path(path).open("a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(["source_id", "cycle", "v", "qc_fit", "ic", "dv"])
        for a, b, c in zip(v, q, ic):
            dv = "" if abs(c) < 1e-9 else fmt_float(1.0 / c)
            w.writerow([source_id, cycle, fmt_float(a), fmt_float(b), fmt_float(c), dv])
