"""Core data types, dataset CSV ingestion, standardization and splitting."""
from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import kolmogorov

from .errors import (
    ConstantColumnError,
    ParameterMismatchError,
    ProfileTooShortError,
    SchemaError,
    SplitError,
    ValidationError,
)

MIN_PROFILE_SAMPLES = 8

DEFAULT_SCHEMA = {
    "source_id": "source_id",
    "cycle": "cycle",
    "capacity": "capacity_ah",
    "voltage": "voltage_v",
    "temperature": "temperature_c",
    "c_rate": "c_rate",
    "soh": "soh",
}
_OPTIONAL_COLUMNS = {"soh"}


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def fmt_float(x) -> str:
    """Shortest round-trip text for a float; used by every CSV writer."""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


@dataclass(frozen=True)
class QVProfile:
    """One constant-current charging record.

    ``capacity_samples`` is accumulated charged capacity in Ah and
    ``voltage_samples`` the terminal voltage in V.  ``soh_label`` is ``None``
    for unlabeled inference inputs.
    """

    capacity_samples: np.ndarray
    voltage_samples: np.ndarray
    temperature: float
    c_rate: float
    soh_label: float | None = None
    source_id: str = ""
    cycle: int = 0
    n_dropped: int = 0

    def __post_init__(self):
        q = _frozen_array(self.capacity_samples)
        v = _frozen_array(self.voltage_samples)
        object.__setattr__(self, "capacity_samples", q)
        object.__setattr__(self, "voltage_samples", v)
        if q.ndim != 1 or q.shape != v.shape:
            raise ValidationError(f"{self.source_id}: capacity and voltage must be 1-D and equal length")
        if len(q) < MIN_PROFILE_SAMPLES:
            raise ProfileTooShortError([self.source_id])
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise ValidationError(f"{self.source_id}: non-finite samples")
        if np.any(np.diff(q) < 0):
            raise ValidationError(f"{self.source_id}: capacity samples must be non-decreasing")
        if np.any(np.diff(v) <= 0):
            raise ValidationError(f"{self.source_id}: voltage samples must be strictly increasing")
        if self.soh_label is not None:
            soh = float(self.soh_label)
            if not (0.0 < soh <= 1.2):
                raise ValidationError(f"{self.source_id}: SOH label {soh} outside (0, 1.2]")
            object.__setattr__(self, "soh_label", soh)
        object.__setattr__(self, "temperature", float(self.temperature))
        object.__setattr__(self, "c_rate", float(self.c_rate))

    def __len__(self):
        return len(self.capacity_samples)

    @property
    def key(self) -> tuple[str, int]:
        return (self.source_id, self.cycle)


def clean_samples(capacity, voltage) -> tuple[np.ndarray, np.ndarray, int]:
    """Order samples by charge and drop those breaking monotonicity.

    Samples sharing a voltage are collapsed to their mean capacity.  The
    remaining points are sorted by (capacity, voltage) and the longest
    subsequence with strictly increasing voltage is kept.  Returns the kept
    capacity, voltage and the number of input rows that did not survive.
    """
    q = np.asarray(capacity, dtype=float)
    v = np.asarray(voltage, dtype=float)
    n_in = len(q)
    uv, inverse = np.unique(v, return_inverse=True)
    uq = np.bincount(inverse, weights=q) / np.bincount(inverse)
    order = np.lexsort((uv, uq))
    uq, uv = uq[order], uv[order]

    # patience-sort LIS on voltage (strict)
    tails: list[float] = []
    tail_idx: list[int] = []
    parent = np.full(len(uv), -1)
    for i, x in enumerate(uv):
        pos = bisect.bisect_left(tails, x)
        if pos == len(tails):
            tails.append(x)
            tail_idx.append(i)
        else:
            tails[pos] = x
            tail_idx[pos] = i
        parent[i] = tail_idx[pos - 1] if pos > 0 else -1
    keep = []
    i = tail_idx[-1] if tail_idx else -1
    while i >= 0:
        keep.append(i)
        i = parent[i]
    keep = np.array(keep[::-1], dtype=int)
    return uq[keep], uv[keep], n_in - len(keep)


def load_dataset(path, schema: Mapping[str, str] | None = None) -> list[QVProfile]:
    """Read a dataset CSV into profiles, one per (source_id, cycle).

    ``schema`` maps logical column names (keys of :data:`DEFAULT_SCHEMA`) to
    header names in the file; unspecified keys keep their defaults.  Rows
    that break monotonicity after voltage deduplication are dropped and the
    count is kept on :attr:`QVProfile.n_dropped`.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(cols)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        cols.update(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SchemaError(f"{path}: empty file or missing header row")
        missing = [c for k, c in cols.items() if k not in _OPTIONAL_COLUMNS and c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        has_soh = cols["soh"] in header
        groups: dict[tuple[str, int], list[dict]] = {}
        for row in reader:
            try:
                key = (row[cols["source_id"]], int(float(row[cols["cycle"]])))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}: bad cycle value in row {row}") from exc
            groups.setdefault(key, []).append(row)
    if not groups:
        raise SchemaError(f"{path}: no data rows")

    profiles = []
    too_short = []
    for (sid, cycle), rows in groups.items():
        try:
            q = [float(r[cols["capacity"]]) for r in rows]
            v = [float(r[cols["voltage"]]) for r in rows]
            temp = float(np.mean([float(r[cols["temperature"]]) for r in rows]))
            crate = float(np.mean([float(r[cols["c_rate"]]) for r in rows]))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: non-numeric value in profile {sid}/{cycle}") from exc
        soh = None
        if has_soh:
            raw = [r[cols["soh"]] for r in rows if r[cols["soh"]] not in ("", None)]
            soh = float(raw[0]) if raw else None
        q, v, dropped = clean_samples(q, v)
        if len(q) < MIN_PROFILE_SAMPLES:
            too_short.append(f"{sid}/{cycle}")
            continue
        profiles.append(QVProfile(q, v, temp, crate, soh, sid, cycle, dropped))
    if too_short:
        raise ProfileTooShortError(too_short)
    return profiles


def write_dataset(profiles: Iterable[QVProfile], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([DEFAULT_SCHEMA[k] for k in
                    ("source_id", "cycle", "capacity", "voltage", "temperature", "c_rate", "soh")])
        for p in profiles:
            soh = "" if p.soh_label is None else fmt_float(p.soh_label)
            for q, v in zip(p.capacity_samples, p.voltage_samples):
                w.writerow([p.source_id, p.cycle, fmt_float(q), fmt_float(v),
                            fmt_float(p.temperature), fmt_float(p.c_rate), soh])


@dataclass(frozen=True)
class Standardization:
    """Per-column (mean, std) pairs plus the label's pair."""

    names: tuple[str, ...]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float | None = None
    y_std: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "x_mean", _frozen_array(self.x_mean))
        object.__setattr__(self, "x_std", _frozen_array(self.x_std))

    def subset(self, names: Sequence[str]) -> "Standardization":
        idx = [self.names.index(n) for n in names]
        return replace(self, names=tuple(names), x_mean=self.x_mean[idx], x_std=self.x_std[idx])


@dataclass(frozen=True)
class FeatureTable:
    """Feature matrix with SOH labels.

    Unavailable entries are NaN in ``rows`` and ``False`` in ``mask``; every
    other entry must be finite.  When ``standardization`` is set, ``rows``
    and ``labels`` are in standardized units.
    """

    feature_names: tuple[str, ...]
    rows: np.ndarray
    labels: np.ndarray | None = None
    standardization: Standardization | None = None
    mask: np.ndarray | None = None
    keys: tuple[tuple[str, int], ...] | None = None

    def __post_init__(self):
        names = tuple(self.feature_names)
        if len(set(names)) != len(names):
            raise ValidationError("duplicate feature names")
        rows = np.array(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(-1, len(names))
        if rows.ndim != 2 or rows.shape[1] != len(names):
            raise ValidationError(f"rows shape {rows.shape} does not match {len(names)} features")
        mask = np.isfinite(rows) if self.mask is None else np.array(self.mask, dtype=bool)
        if mask.shape != rows.shape:
            raise ValidationError("mask shape does not match rows")
        if np.any(np.isinf(rows)) or np.any(np.isfinite(rows) != mask):
            raise ValidationError("non-finite entries must coincide exactly with masked entries")
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "rows", _frozen_array(rows))
        object.__setattr__(self, "mask", _frozen_array(mask, dtype=bool))
        if self.labels is not None:
            labels = _frozen_array(self.labels)
            if labels.shape != (rows.shape[0],) or not np.all(np.isfinite(labels)):
                raise ValidationError("labels must be finite with one entry per row")
            object.__setattr__(self, "labels", labels)
        if self.keys is not None:
            keys = tuple((str(s), int(c)) for s, c in self.keys)
            if len(keys) != rows.shape[0]:
                raise ValidationError("one key per row required")
            object.__setattr__(self, "keys", keys)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.feature_names.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureTable":
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise ParameterMismatchError(f"unknown features {missing}")
        idx = [self.feature_names.index(n) for n in names]
        std = self.standardization.subset(names) if self.standardization else None
        return replace(self, feature_names=tuple(names), rows=self.rows[:, idx],
                       mask=self.mask[:, idx], standardization=std)

    def take(self, index) -> "FeatureTable":
        index = np.asarray(index, dtype=int)
        return replace(
            self,
            rows=self.rows[index],
            mask=self.mask[index],
            labels=None if self.labels is None else self.labels[index],
            keys=None if self.keys is None else tuple(self.keys[i] for i in index),
        )

    def complete_rows(self) -> np.ndarray:
        """Indices of rows with every feature available."""
        return np.flatnonzero(self.mask.all(axis=1))


def standardize_fit(table: FeatureTable) -> FeatureTable:
    """Standardize every column (and the labels) with its own mean and std.

    The sample standard deviation (divisor N-1) is used throughout.  Masked
    entries are ignored when computing the statistics.
    """
    if table.standardization is not None:
        table = standardize_invert(table)
    if table.n_rows < 2:
        raise ValidationError("standardization needs at least 2 rows")
    means, stds = [], []
    for j, name in enumerate(table.feature_names):
        col = table.rows[table.mask[:, j], j]
        if len(col) < 2:
            raise ConstantColumnError(name)
        sd = float(np.std(col, ddof=1))
        if not sd > 0:
            raise ConstantColumnError(name)
        means.append(float(np.mean(col)))
        stds.append(sd)
    y_mean = y_std = None
    if table.labels is not None:
        y_mean = float(np.mean(table.labels))
        y_std = float(np.std(table.labels, ddof=1))
        if not y_std > 0:
            raise ConstantColumnError("soh")
    params = Standardization(table.feature_names, means, stds, y_mean, y_std)
    return standardize_apply(table, params)


def _check_params(table: FeatureTable, params: Standardization):
    if tuple(params.names) != table.feature_names:
        raise ParameterMismatchError(
            f"standardization columns {params.names} do not match table {table.feature_names}")
    if table.labels is not None and params.y_mean is None:
        raise ParameterMismatchError("labelled table but parameters carry no label statistics")


def standardize_apply(table: FeatureTable, params: Standardization) -> FeatureTable:
    if table.standardization is not None:
        raise ValidationError("table is already standardized")
    _check_params(table, params)
    rows = (table.rows - params.x_mean) / params.x_std
    labels = None
    if table.labels is not None:
        labels = (table.labels - params.y_mean) / params.y_std
    return replace(table, rows=rows, labels=labels, standardization=params)


def standardize_invert(table: FeatureTable, params: Standardization | None = None) -> FeatureTable:
    params = params or table.standardization
    if params is None:
        raise ValidationError("table carries no standardization parameters")
    _check_params(table, params)
    rows = table.rows * params.x_std + params.x_mean
    labels = None
    if table.labels is not None:
        labels = table.labels * params.y_std + params.y_mean
    return replace(table, rows=rows, labels=labels, standardization=None)


def invert_prediction(mean, sigma, params: Standardization):
    """Map a standardized predictive mean and sigma back to label units.

    The mean is shifted and scaled; sigma is only scaled.
    """
    mean = np.asarray(mean, dtype=float) * params.y_std + params.y_mean
    sigma = np.asarray(sigma, dtype=float) * params.y_std
    return mean, sigma


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    mode: str = "random"
    count: int | None = None

    def __post_init__(self):
        if self.mode not in ("random", "fixed-count"):
            raise SplitError(f"unknown split mode {self.mode!r}")
        if self.mode == "fixed-count" and (self.count is None or self.count < 1):
            raise SplitError("fixed-count mode requires a positive count")
        if self.mode == "random" and not (0.0 < self.train_fraction <= 1.0):
            raise SplitError("train_fraction must lie in (0, 1)")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    n_train = spec.count if spec.mode == "fixed-count" else int(round(spec.train_fraction * n))
    if not (0 < n_train < n):
        raise SplitError(f"split of {n} rows leaves an empty side (train={n_train})")
    perm = np.random.default_rng(spec.seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(table: FeatureTable, spec: SplitSpec) -> tuple[FeatureTable, FeatureTable]:
    train_idx, test_idx = split_indices(table.n_rows, spec)
    return table.take(train_idx), table.take(test_idx)


def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("both samples must be non-empty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / len(a)
    cdf_b = np.searchsorted(b, grid, side="right") / len(b)
    stat = float(np.max(np.abs(cdf_a - cdf_b)))
    en = len(a) * len(b) / (len(a) + len(b))
    p = float(kolmogorov(math.sqrt(en) * stat))
    return stat, min(max(p, 0.0), 1.0)


# -- feature table files -----------------------------------------------------

def write_feature_table(table: FeatureTable, path, mask_path=None) -> None:
    """Write one row per sample: source_id, cycle, features..., soh."""
    keys = table.keys or tuple((str(i), 0) for i in range(table.n_rows))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "cycle", *table.feature_names, "soh"])
        for i, (sid, cyc) in enumerate(keys):
            soh = "" if table.labels is None else fmt_float(table.labels[i])
            w.writerow([sid, cyc, *(fmt_float(x) for x in table.rows[i]), soh])
    if mask_path is not None:
        with Path(mask_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source_id", "cycle", *table.feature_names])
            for i, (sid, cyc) in enumerate(keys):
                w.writerow([sid, cyc, *(int(m) for m in table.mask[i])])


def read_feature_table(path) -> FeatureTable:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty feature table") from None
        if header[:2] != ["source_id", "cycle"]:
            raise SchemaError(f"{path}: feature table must start with source_id, cycle")
        has_soh = header[-1] == "soh"
        names = header[2:-1] if has_soh else header[2:]
        keys, rows, labels = [], [], []
        for rec in reader:
            keys.append((rec[0], int(float(rec[1]))))
            vals = rec[2:2 + len(names)]
            rows.append([float(x) if x != "" else np.nan for x in vals])
            if has_soh:
                labels.append(rec[-1])
    if not rows:
        raise SchemaError(f"{path}: feature table has no rows")
    lab = None
    if has_soh and all(x != "" for x in labels):
        lab = [float(x) for x in labels]
    return FeatureTable(tuple(names), np.array(rows, dtype=float), lab, keys=tuple(keys))
