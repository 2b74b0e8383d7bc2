"""Synthetic aging data for modules of parallel-connected cells.

Each cell is a phenomenological sigmoid mixture: its charged capacity as a
function of open-circuit voltage is a weighted sum of logistic steps, so its
IC curve is a sum of bell-shaped peaks.  A module shares one terminal voltage
across its cells; the charging current splits in proportion to cell capacity
and each cell sees its curve shifted by its own ohmic drop.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data_model import QVProfile, fmt_float
from .errors import ValidationError


@dataclass(frozen=True)
class CellSpec:
    capacity: float = 69.0
    peak_centers: tuple[float, ...] = (3.62, 3.86)
    peak_widths: tuple[float, ...] = (0.035, 0.05)
    peak_weights: tuple[float, ...] = (0.45, 0.55)
    resistance: float = 1.0e-3

    def __post_init__(self):
        for name in ("peak_centers", "peak_widths", "peak_weights"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        n = len(self.peak_centers)
        if n == 0 or len(self.peak_widths) != n or len(self.peak_weights) != n:
            raise ValidationError("peak centers, widths and weights must have equal non-zero length")
        if not self.capacity > 0:
            raise ValidationError("cell capacity must be positive")
        if any(w <= 0 for w in self.peak_widths):
            raise ValidationError("peak widths must be positive")
        if any(w < 0 for w in self.peak_weights) or abs(sum(self.peak_weights) - 1.0) > 1e-9:
            raise ValidationError("peak weights must be non-negative and sum to 1")
        if self.resistance < 0:
            raise ValidationError("resistance must be non-negative")


class CellCurve:
    """Charged capacity of one cell as a function of its open-circuit voltage."""

    def __init__(self, spec: CellSpec):
        self.spec = spec
        self._c = np.array(spec.peak_centers)
        self._s = np.array(spec.peak_widths)
        self._w = np.array(spec.peak_weights)

    @property
    def capacity(self) -> float:
        return self.spec.capacity

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        z = (v[..., None] - self._c) / self._s
        return self.spec.capacity * np.sum(self._w * expit(z), axis=-1)

    def ic(self, v):
        v = np.asarray(v, dtype=float)
        sig = expit((v[..., None] - self._c) / self._s)
        return self.spec.capacity * np.sum(self._w * sig * (1.0 - sig) / self._s, axis=-1)


def synth_cell_curve(spec: CellSpec) -> CellCurve:
    return CellCurve(spec)


class ModuleCurve:
    """Quasi-static parallel module: cells share the terminal voltage."""

    def __init__(self, cells: Sequence[CellSpec], current: float):
        if len(cells) < 1:
            raise ValidationError("a module needs at least one cell")
        self.cells = [CellCurve(c) for c in cells]
        total = sum(c.capacity for c in cells)
        # ohmic drop per cell with the current split by capacity
        self.offsets = np.array([current * c.capacity / total * c.resistance for c in cells])

    @property
    def capacity(self) -> float:
        return float(sum(c.capacity for c in self.cells))

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        return sum(cell(v - d) for cell, d in zip(self.cells, self.offsets))

    def ic(self, v):
        v = np.asarray(v, dtype=float)
        return sum(cell.ic(v - d) for cell, d in zip(self.cells, self.offsets))

    def voltage_at(self, q, lo: float, hi: float):
        """Invert the curve by vectorized bisection on [lo, hi]."""
        q = np.asarray(q, dtype=float)
        a = np.full(q.shape, lo)
        b = np.full(q.shape, hi)
        for _ in range(64):
            mid = 0.5 * (a + b)
            below = self(mid) < q
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
        return 0.5 * (a + b)


def synth_module_profile(cells: Sequence[CellSpec], current: float, noise_sigma_v: float = 0.0,
                         seed: int = 0, *, n_samples: int = 160,
                         v_window: tuple[float, float] = (3.4, 4.1), temperature: float = 25.0,
                         c_rate: float | None = None, soh_label: float | None = None,
                         source_id: str = "", cycle: int = 0) -> QVProfile:
    """Sample a module charge on a uniform capacity grid over ``v_window``.

    Capacity is counted from the window's lower voltage.  Gaussian noise is
    added to the voltages, which are then re-sorted so the record stays a
    valid constant-current charge.
    """
    curve = ModuleCurve(cells, current)
    v_lo, v_hi = v_window
    q0 = float(curve(v_lo))
    q_grid = np.linspace(0.0, float(curve(v_hi)) - q0, n_samples)
    v = curve.voltage_at(q_grid + q0, v_lo, v_hi)
    v[0], v[-1] = v_lo, v_hi
    if noise_sigma_v > 0:
        v = np.sort(v + np.random.default_rng(seed).normal(0.0, noise_sigma_v, size=v.shape))
    if c_rate is None:
        c_rate = current / curve.capacity
    return QVProfile(q_grid, v, temperature, c_rate, soh_label, source_id, cycle)


@dataclass(frozen=True)
class AgingSpec:
    n_modules: int = 12
    cells_per_module: int = 3
    n_checkpoints: int = 20
    soh_end: float = 0.86
    variation_cv: float | tuple[float, ...] = 0.03
    peak_shift_per_fade: float = 0.3
    noise_sigma_v: float = 1.0e-3
    seed: int = 0
    n_samples: int = 160
    c_rate_range: tuple[float, float] = (0.4, 0.5)
    temperature_range: tuple[float, float] = (20.0, 30.0)
    v_window: tuple[float, float] = (3.4, 4.1)

    def __post_init__(self):
        if not (0.0 < self.soh_end < 1.0):
            raise ValidationError("soh_end must lie in (0, 1)")
        if self.n_checkpoints < 2:
            raise ValidationError("need at least 2 checkpoints")
        if self.n_modules < 1 or self.cells_per_module < 1:
            raise ValidationError("need at least one module and one cell")
        if np.any(np.asarray(self.cv_schedule()) < 0):
            raise ValidationError("variation_cv must be non-negative")

    def cv_schedule(self) -> np.ndarray:
        """Per-checkpoint coefficient of variation of the cell fade."""
        cv = np.atleast_1d(np.asarray(self.variation_cv, dtype=float))
        if cv.size == 1:
            return np.full(self.n_checkpoints, cv[0])
        if cv.size != self.n_checkpoints:
            raise ValidationError("variation_cv schedule length must equal n_checkpoints")
        return cv


@dataclass(frozen=True)
class GroundTruthRow:
    module_id: str
    checkpoint: int
    cell_index: int
    cell_capacity_ah: float


def fade_progress(n_checkpoints: int) -> np.ndarray:
    """Log-shaped fade progress in [0, 1]: fast early, slower later."""
    tau = np.linspace(0.0, 1.0, n_checkpoints)
    return np.log1p(9.0 * tau) / np.log(10.0)


def aged_cell(base: CellSpec, fade: float, shift_per_fade: float, resistance: float) -> CellSpec:
    return replace(base, capacity=base.capacity * (1.0 - fade),
                   peak_centers=tuple(c + shift_per_fade * fade for c in base.peak_centers),
                   resistance=resistance)


def synth_dataset(aging: AgingSpec = AgingSpec(), base: CellSpec = CellSpec()
                  ) -> tuple[list[QVProfile], list[GroundTruthRow]]:
    """Generate labelled module profiles and the per-cell ground truth.

    Each cell gets one standard-normal draw that scales its fade; the
    spread at checkpoint ``t`` is ``cv_schedule()[t]`` times that draw, so a
    schedule can make cells converge or diverge.  Labels are the module
    capacity over its fresh capacity.
    """
    cv = aging.cv_schedule()
    progress = (1.0 - aging.soh_end) * fade_progress(aging.n_checkpoints)
    children = np.random.SeedSequence(aging.seed).spawn(aging.n_modules)
    profiles: list[QVProfile] = []
    truth: list[GroundTruthRow] = []
    for m, seq in enumerate(children):
        rng = np.random.default_rng(seq)
        module_id = f"M{m:03d}"
        z_fade = rng.standard_normal(aging.cells_per_module)
        z_res = rng.standard_normal(aging.cells_per_module)
        fresh_total = base.capacity * aging.cells_per_module
        for t in range(aging.n_checkpoints):
            fades = np.clip(progress[t] * (1.0 + cv[t] * z_fade), 0.0, 0.95)
            res = base.resistance * np.clip(1.0 + cv[t] * z_res, 0.05, None)
            cells = [aged_cell(base, f, aging.peak_shift_per_fade, r) for f, r in zip(fades, res)]
            c_rate = rng.uniform(*aging.c_rate_range)
            temperature = rng.uniform(*aging.temperature_range)
            noise_seed = int(rng.integers(2**31))
            label = sum(c.capacity for c in cells) / fresh_total
            profiles.append(synth_module_profile(
                cells, c_rate * fresh_total, aging.noise_sigma_v, noise_seed,
                n_samples=aging.n_samples, v_window=aging.v_window, temperature=temperature,
                c_rate=c_rate, soh_label=label, source_id=module_id, cycle=t))
            truth.extend(GroundTruthRow(module_id, t, i, c.capacity) for i, c in enumerate(cells))
    return profiles, truth


def write_ground_truth(rows: Sequence[GroundTruthRow], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module_id", "checkpoint", "cell_index", "cell_capacity_ah"])
        for r in rows:
            w.writerow([r.module_id, r.checkpoint, r.cell_index, fmt_float(r.cell_capacity_ah)])
