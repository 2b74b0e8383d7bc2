"""Greedy information-theoretic feature ranking with redundancy removal.

Each round scores every remaining candidate ``X`` by

    J(X) = I~(X; Y) - mean_j I~(X; X_j) + mean_j I~(X; X_j | Y)

over the already selected ``X_j`` (normalized MI/CMI), moves the best one to
the selected list, and then removes every remaining candidate whose
normalized MI with the winner reaches the threshold.  Removed features are
considered carried by the winner and are never ranked.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import FeatureTable, fmt_float
from .errors import ParameterMismatchError, ValidationError
from .infotheory import normalized_cmi, normalized_mi

LABEL = "__label__"


@dataclass(frozen=True)
class Evaluation:
    candidate: str
    relevance: float
    avg_redundancy: float
    avg_complementarity: float

    @property
    def j(self) -> float:
        return self.relevance - self.avg_redundancy + self.avg_complementarity


@dataclass(frozen=True)
class Removal:
    feature: str
    removed_by: str
    value: float


@dataclass(frozen=True)
class Iteration:
    """One round: the partition on entry, every evaluation, winner, removals."""

    selected_before: tuple[str, ...]
    removed_before: frozenset[str]
    candidates_before: frozenset[str]
    evaluations: tuple[Evaluation, ...]
    winner: str
    removals: tuple[Removal, ...]


@dataclass
class CriterionTrace:
    initial_removals: list[Removal] = field(default_factory=list)
    iterations: list[Iteration] = field(default_factory=list)

    def winner_evaluation(self, it: Iteration) -> Evaluation:
        return next(e for e in it.evaluations if e.candidate == it.winner)


@dataclass
class SelectionState:
    all: frozenset[str]
    threshold: float
    selected: list[str] = field(default_factory=list)
    removed: set[str] = field(default_factory=set)
    candidates: set[str] = field(default_factory=set)
    preselected: tuple[str, ...] = ()

    def is_partition(self) -> bool:
        s = set(self.selected)
        return (len(s) == len(self.selected)
                and s | self.removed | self.candidates == set(self.all)
                and not (s & self.removed) and not (s & self.candidates)
                and not (self.removed & self.candidates))


class PairCache:
    """Normalized MI/CMI values keyed by unordered feature pair.

    Rows where either compared column is masked are dropped pair by pair.
    """

    def __init__(self, table: FeatureTable, label, k: int = 5, seed: int = 0):
        self.names = table.feature_names
        self.columns = {n: table.rows[:, j] for j, n in enumerate(self.names)}
        self.masks = {n: table.mask[:, j] for j, n in enumerate(self.names)}
        self.columns[LABEL] = np.asarray(label, dtype=float)
        self.masks[LABEL] = np.isfinite(self.columns[LABEL])
        self.k, self.seed = k, seed
        self._mi: dict[frozenset, float] = {}
        self._cmi: dict[frozenset, float] = {}
        self._self: dict = {}

    def _rows(self, *names):
        ok = np.ones(len(self.columns[LABEL]), dtype=bool)
        for n in names:
            ok &= self.masks[n]
        return ok

    def _self_cache(self, rows):
        # self-information depends on the rows used, so keep one cache per row set
        key = rows.tobytes()
        return self._self.setdefault(key, {})

    def mi(self, a: str, b: str) -> float:
        key = frozenset((a, b))
        if key not in self._mi:
            a, b = sorted((a, b))
            rows = self._rows(a, b)
            est = normalized_mi(self.columns[a][rows], self.columns[b][rows], self.k, self.seed,
                                names=(a, b), cache=self._self_cache(rows))
            self._mi[key] = est.normalized
        return self._mi[key]

    def cmi_given_label(self, a: str, b: str) -> float:
        key = frozenset((a, b))
        if key not in self._cmi:
            a, b = sorted((a, b))
            rows = self._rows(a, b, LABEL)
            est = normalized_cmi(self.columns[a][rows], self.columns[b][rows],
                                 self.columns[LABEL][rows], self.k, self.seed,
                                 names=(a, b), cache=self._self_cache(rows))
            self._cmi[key] = est.normalized
        return self._cmi[key]


def criterion_j(candidate: str, selected: Sequence[str], cache: PairCache) -> Evaluation:
    """Relevance, average redundancy and average complementarity of one candidate."""
    relevance = cache.mi(candidate, LABEL)
    if not selected:
        return Evaluation(candidate, relevance, 0.0, 0.0)
    red = float(np.mean([cache.mi(candidate, s) for s in selected]))
    comp = float(np.mean([cache.cmi_given_label(candidate, s) for s in selected]))
    return Evaluation(candidate, relevance, red, comp)


def _remove_redundant(state: SelectionState, anchor: str, cache: PairCache) -> list[Removal]:
    out = []
    for name in sorted(state.candidates):
        value = cache.mi(anchor, name)
        if value >= state.threshold:
            out.append(Removal(name, anchor, value))
    for r in out:
        state.candidates.discard(r.feature)
        state.removed.add(r.feature)
    return out


def select_features(table: FeatureTable, label=None, threshold: float = 0.9,
                    preselected: Sequence[str] = (), k: int = 5, seed: int = 0,
                    cache: PairCache | None = None) -> tuple[SelectionState, CriterionTrace]:
    """Rank the table's features by greedy criterion maximization.

    Parameters
    ----------
    table : FeatureTable
        Candidate features; standardized or not (the estimator rescales).
    label : array_like, optional
        Target column; defaults to ``table.labels``.
    threshold : float
        Normalized-MI level at which a candidate counts as completely
        redundant with a selected feature.  Values above the estimator's
        range (e.g. 1.5) disable removal.
    preselected : sequence of str
        Features placed first in the selected list, in the given order.

    Ties in J are broken by feature name.
    """
    if not table.feature_names:
        raise ValidationError("no features to select from")
    if label is None:
        label = table.labels
    if label is None:
        raise ValidationError("a label column is required")
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    unknown = [p for p in preselected if p not in table.feature_names]
    if unknown:
        raise ParameterMismatchError(f"preselected features not in table: {unknown}")
    if len(set(preselected)) != len(preselected):
        raise ValidationError("preselected features repeat")
    cache = cache or PairCache(table, label, k, seed)
    names = frozenset(table.feature_names)
    state = SelectionState(names, threshold, list(preselected), set(),
                           set(names) - set(preselected), tuple(preselected))
    trace = CriterionTrace()
    for p in preselected:
        trace.initial_removals += _remove_redundant(state, p, cache)

    while state.candidates:
        before = (tuple(state.selected), frozenset(state.removed), frozenset(state.candidates))
        evals = tuple(criterion_j(c, state.selected, cache) for c in sorted(state.candidates))
        best = max(evals, key=lambda e: e.j)
        winner = min(e.candidate for e in evals if e.j == best.j)
        state.candidates.discard(winner)
        state.selected.append(winner)
        removals = tuple(_remove_redundant(state, winner, cache))
        trace.iterations.append(Iteration(*before, evals, winner, removals))
    return state, trace


@dataclass(frozen=True)
class RankRow:
    rank: int
    feature: str
    j: float
    relevance: float
    redundancy: float
    complementarity: float
    preselected: bool


def rank_report(state: SelectionState, trace: CriterionTrace) -> list[RankRow]:
    """One row per selected feature in rank order with its J decomposition.

    Preselected features carry NaN criterion values because they were never
    scored.
    """
    rows = []
    nan = float("nan")
    for i, name in enumerate(state.preselected, 1):
        rows.append(RankRow(i, name, nan, nan, nan, nan, True))
    for it in trace.iterations:
        e = trace.winner_evaluation(it)
        rows.append(RankRow(len(rows) + 1, it.winner, e.j, e.relevance, e.avg_redundancy,
                            e.avg_complementarity, False))
    return rows


def write_selection(state: SelectionState, trace: CriterionTrace, path, removed_path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "J", "relevance", "redundancy", "complementarity",
                    "preselected"])
        for r in rank_report(state, trace):
            w.writerow([r.rank, r.feature, fmt_float(r.j), fmt_float(r.relevance),
                        fmt_float(r.redundancy), fmt_float(r.complementarity), int(r.preselected)])
    removals = trace.initial_removals + [r for it in trace.iterations for r in it.removals]
    with Path(removed_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "removed_by", "normalized_mi"])
        for r in removals:
            w.writerow([r.feature, r.removed_by, fmt_float(r.value)])


def read_selection(path) -> list[str]:
    """Selected feature names in rank order."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [r["feature"] for r in sorted(rows, key=lambda r: int(r["rank"]))]
