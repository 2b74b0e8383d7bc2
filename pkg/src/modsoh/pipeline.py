"""File-level stages behind the command line: extract, mi, select, crossval,
train, predict, eval, and the end-to-end run.

Every stage is a plain function taking paths and options.  Outputs are
deterministic given inputs and seeds: no timestamps, fixed float formatting,
ordered parallel maps.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data_model import (
    FeatureTable,
    QVProfile,
    SplitSpec,
    fmt_float,
    load_dataset,
    read_feature_table,
    split,
    standardize_fit,
    write_dataset,
    write_feature_table,
)
from .errors import EmptyOutputError, SplitError, ValidationError
from .featext import (
    ExtractionConfig,
    ExtractionResult,
    ProfileFeatures,
    Reference,
    analyse_profile,
    build_feature_table,
    write_curve_dump,
)
from .featsel import LABEL, PairCache, read_selection, select_features, write_selection
from .rvr import RvrConfig, evaluate, median_heuristic_rho, predict_many, save_model, train, train_table
from .synthgen import AgingSpec, CellSpec, synth_dataset, write_ground_truth

log = logging.getLogger(__name__)

GATE_REASON = "insufficient charging range"


def _writer(path):
    fh = Path(path).open("w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def _map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# synth / extract

def cmd_synth(out_dir, aging: AgingSpec = AgingSpec(), base: CellSpec = CellSpec()) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles, truth = synth_dataset(aging, base)
    write_dataset(profiles, out / "dataset.csv")
    write_ground_truth(truth, out / "ground_truth.csv")
    return [out / "dataset.csv", out / "ground_truth.csv"]


@dataclass(frozen=True)
class GateResult:
    kept: list[ProfileFeatures]
    skipped: list[tuple[tuple[str, int], str]]


def gate_profiles(analysed: Sequence[ProfileFeatures], reference: Reference, min_samples: int,
                  half_width: float) -> GateResult:
    """Keep profiles with at least ``min_samples`` samples around their dominant peak.

    The dominant peak is the one matched to the reference's highest peak;
    the window is ``half_width`` on either side of it.  Profiles without
    that peak fail the gate.
    """
    from .featext import _match  # alignment rule shared with the table builder

    kept, skipped = [], []
    for pf in analysed:
        n_in = 0
        if reference.peak_locations:
            peak = _match(pf.peaks, reference.peak_locations)[reference.dominant]
            if peak is not None:
                v = pf.profile.voltage_samples
                n_in = int(np.count_nonzero(np.abs(v - peak.location) <= half_width))
        if n_in >= min_samples:
            kept.append(pf)
        else:
            skipped.append((pf.profile.key, GATE_REASON))
    return GateResult(kept, skipped)


def extract_table(profiles: Sequence[QVProfile], config: ExtractionConfig = ExtractionConfig(),
                  gate: int = 0, threads: int = 1) -> tuple[ExtractionResult, GateResult]:
    """Fit, gate and align all profiles."""
    analysed = _map(lambda p: analyse_profile(p, config), list(profiles), threads)
    reference = Reference.from_features(_freshest(analysed))
    half = config.partial_areas[0].half_width if config.partial_areas else 0.025
    gated = gate_profiles(analysed, reference, gate, half) if gate > 0 else GateResult(analysed, [])
    if not gated.kept:
        raise EmptyOutputError(f"all {len(analysed)} profiles were skipped: {GATE_REASON}")
    result = build_feature_table([pf.profile for pf in gated.kept], config, reference, gated.kept)
    return result, gated


def _freshest(analysed):
    from .featext import _freshest as f
    return f(analysed)


def cmd_extract(dataset, out, mask_out, config: ExtractionConfig = ExtractionConfig(), gate: int = 0,
                dump_curves=None, skipped_out=None, threads: int = 1) -> tuple[ExtractionResult, GateResult]:
    profiles = load_dataset(dataset)
    result, gated = extract_table(profiles, config, gate, threads)
    write_feature_table(result.table, out, mask_out)
    if dump_curves is not None:
        for i, pf in enumerate(result.analysed):
            write_curve_dump(pf.curve, dump_curves, pf.profile.source_id, pf.profile.cycle,
                             append=i > 0)
    if skipped_out is not None:
        fh, w = _writer(skipped_out)
        with fh:
            w.writerow(["source_id", "cycle", "reason"])
            for (sid, cyc), reason in gated.skipped:
                w.writerow([sid, cyc, reason])
    return result, gated


# ---------------------------------------------------------------------------
# table preparation

def usable_columns(table: FeatureTable) -> tuple[FeatureTable, list[str]]:
    """Drop columns that are constant or have fewer than two available entries."""
    keep, dropped = [], []
    for j, name in enumerate(table.feature_names):
        col = table.rows[table.mask[:, j], j]
        if len(col) >= 2 and np.std(col, ddof=1) > 0:
            keep.append(name)
        else:
            dropped.append(name)
    return table.select(keep), dropped


def complete_rows(table: FeatureTable, names: Sequence[str]) -> FeatureTable:
    sub = table.select(list(names))
    return sub.take(sub.complete_rows())


# ---------------------------------------------------------------------------
# mi / select

def mi_matrices(table: FeatureTable, k: int = 5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise normalized MI and normalized CMI given the label."""
    if table.labels is None:
        raise ValidationError("the MI stage needs labels")
    cache = PairCache(table, table.labels, k, seed)
    names = table.feature_names
    n = len(names)
    mi = np.full((n + 1, n + 1), np.nan)
    cmi = np.full((n, n), np.nan)
    full = list(names) + [LABEL]
    for a in range(n + 1):
        for b in range(a, n + 1):
            mi[a, b] = mi[b, a] = cache.mi(full[a], full[b])
    for a in range(n):
        for b in range(a, n):
            cmi[a, b] = cmi[b, a] = cache.cmi_given_label(names[a], names[b])
    return mi, cmi


def _write_matrix(path, names, m):
    fh, w = _writer(path)
    with fh:
        w.writerow(["feature", *names])
        for name, row in zip(names, m):
            w.writerow([name, *(fmt_float(x) for x in row)])


def cmd_mi(features, mi_out, cmi_out, k: int = 5, seed: int = 0) -> None:
    table, _ = usable_columns(read_feature_table(features))
    mi, cmi = mi_matrices(table, k, seed)
    _write_matrix(mi_out, list(table.feature_names) + ["soh"], mi)
    _write_matrix(cmi_out, list(table.feature_names), cmi)


def cmd_select(features, out, removed_out, threshold: float = 0.9, preselect: Sequence[str] = (),
               k: int = 5, seed: int = 0):
    table, dropped = usable_columns(read_feature_table(features))
    if dropped:
        log.info("ignoring unusable columns: %s", ", ".join(dropped))
    if table.labels is None:
        raise ValidationError("selection needs labels")
    state, trace = select_features(standardize_fit(table), threshold=threshold,
                                   preselected=list(preselect), k=k, seed=seed)
    write_selection(state, trace, out, removed_out)
    return state, trace


# ---------------------------------------------------------------------------
# cross-validation

@dataclass(frozen=True)
class CvRow:
    n_features: int
    rho_factor: float
    fold_rmse: tuple[float, ...]
    fold_n_rv: tuple[int, ...]
    fold_three_sigma: tuple[float, ...]

    @property
    def rmse(self) -> float:
        return float(np.mean(self.fold_rmse))

    @property
    def n_rv(self) -> float:
        return float(np.mean(self.fold_n_rv))

    @property
    def three_sigma(self) -> float:
        return float(np.mean(self.fold_three_sigma))


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2:
        raise SplitError("need at least 2 folds")
    parts = np.array_split(np.random.default_rng(seed).permutation(n), folds)
    if min(len(p) for p in parts) < 2:
        raise SplitError(f"{n} rows cannot fill {folds} folds with at least 2 rows each")
    return [np.sort(p) for p in parts]


def crossval(table: FeatureTable, ranking: Sequence[str], n_features_grid: Sequence[int],
             rho_factors: Sequence[float] = (1.0,), folds: int = 5, seed: int = 0,
             config: RvrConfig = RvrConfig(), threads: int = 1) -> list[CvRow]:
    """Five-fold (by default) validation over feature counts and kernel widths.

    For each fold the inputs are standardized on the training part and the
    kernel width is ``factor`` times the median heuristic of those inputs.
    """
    if not n_features_grid or not rho_factors:
        raise ValidationError("grids must be non-empty")
    if max(n_features_grid) > len(ranking) or min(n_features_grid) < 1:
        raise ValidationError(f"feature counts must lie in 1..{len(ranking)}")
    jobs = [(n, f) for n in n_features_grid for f in rho_factors]

    def run(job):
        n, factor = job
        sub = complete_rows(table, ranking[:n])
        parts = fold_indices(sub.n_rows, folds, seed)
        rmse, nrv, sig = [], [], []
        for i, test_idx in enumerate(parts):
            train_idx = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != i]))
            tr = standardize_fit(sub.take(train_idx))
            rho = factor * median_heuristic_rho(tr.rows)
            model = train(tr.rows, tr.labels, replace(config, rho=rho), tr.standardization)
            m = evaluate(model, sub.take(test_idx))
            rmse.append(m["rmse"])
            nrv.append(m["n_rv"])
            sig.append(m["avg_three_sigma"])
        return CvRow(n, float(factor), tuple(rmse), tuple(nrv), tuple(sig))

    return _map(run, jobs, threads)


def write_crossval(rows: Sequence[CvRow], path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["n_features", "rho_factor", "fold", "rmse", "n_rv", "avg_three_sigma"])
        for r in rows:
            for i, (a, b, c) in enumerate(zip(r.fold_rmse, r.fold_n_rv, r.fold_three_sigma), 1):
                w.writerow([r.n_features, fmt_float(r.rho_factor), i, fmt_float(a), b, fmt_float(c)])
            w.writerow([r.n_features, fmt_float(r.rho_factor), "mean", fmt_float(r.rmse),
                        fmt_float(r.n_rv), fmt_float(r.three_sigma)])


def cmd_crossval(features, selection, out, n_features_grid: Sequence[int],
                 rho_factors: Sequence[float] = (1.0,), folds: int = 5, seed: int = 0,
                 threads: int = 1) -> list[CvRow]:
    table = read_feature_table(features)
    rows = crossval(table, read_selection(selection), n_features_grid, rho_factors, folds, seed,
                    threads=threads)
    write_crossval(rows, out)
    return rows


# ---------------------------------------------------------------------------
# train / predict / eval

def cmd_train(features, selection, model_out, n_features: int = 2, rho: float | None = None,
              columns: Sequence[str] | None = None):
    table = read_feature_table(features)
    names = list(columns) if columns else read_selection(selection)[:n_features]
    if not names:
        raise ValidationError("no features chosen for training")
    model = train_table(complete_rows(table, names), RvrConfig(rho=rho))
    save_model(model, model_out)
    return model


def cmd_predict(model_path, features, out):
    from .rvr import load_model

    model = load_model(model_path)
    table = read_feature_table(features)
    sub = complete_rows(table, model.feature_names)
    mean, sd = predict_many(model, sub.rows)
    fh, w = _writer(out)
    with fh:
        w.writerow(["source_id", "cycle", "soh_mean", "soh_sigma", "lower_3sigma", "upper_3sigma"])
        keys = sub.keys or tuple((str(i), 0) for i in range(sub.n_rows))
        for (sid, cyc), m, s in zip(keys, mean, sd):
            w.writerow([sid, cyc, fmt_float(m), fmt_float(s), fmt_float(m - 3 * s), fmt_float(m + 3 * s)])
    return mean, sd


def write_metrics(metrics: dict, path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["metric", "value"])
        for k in ("rmse", "avg_three_sigma", "coverage_997", "n_rv", "n"):
            v = metrics[k]
            w.writerow([k, v if isinstance(v, int) else fmt_float(v)])


def error_histogram(errors, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Counts and edges of prediction errors; counts sum to ``len(errors)``."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValidationError("no errors to histogram")
    return np.histogram(errors, bins=bins)


def write_histogram(errors, path, bins: int = 20) -> None:
    counts, edges = error_histogram(errors, bins)
    fh, w = _writer(path)
    with fh:
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([fmt_float(lo), fmt_float(hi), int(c)])


def cmd_eval(model_path, features, out, histogram_out=None):
    from .rvr import load_model

    model = load_model(model_path)
    table = complete_rows(read_feature_table(features), model.feature_names)
    if table.n_rows == 0:
        raise EmptyOutputError("evaluation table has no complete rows")
    metrics = evaluate(model, table)
    write_metrics(metrics, out)
    if histogram_out is not None:
        mean, _ = predict_many(model, table.rows)
        write_histogram(mean - table.labels, histogram_out)
    return metrics


# ---------------------------------------------------------------------------
# end to end

@dataclass(frozen=True)
class PipelineConfig:
    out_dir: Path
    dataset: Path | None = None
    aging: AgingSpec = AgingSpec()
    extraction: ExtractionConfig = ExtractionConfig()
    split: SplitSpec = SplitSpec()
    k: int = 5
    seed: int = 0
    threshold: float = 0.9
    rho: float | None = None
    n_features: int = 2
    cv_max_features: int = 5
    gate: int = 8
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.n_features < 1:
            raise ValidationError("n_features must be at least 1")
        if self.gate < 0:
            raise ValidationError("gate must be non-negative")


@dataclass
class RunReport:
    n_profiles: int = 0
    n_skipped: int = 0
    n_train: int = 0
    n_test: int = 0
    selected: list[str] = field(default_factory=list)
    used: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    cv: list[CvRow] = field(default_factory=list)
    artifacts: list[Path] = field(default_factory=list)


def _format_report(rep: RunReport, rank_rows) -> str:
    lines = ["run report", "",
             f"profiles read      {rep.n_profiles}",
             f"profiles skipped   {rep.n_skipped}  ({GATE_REASON})",
             f"rows used          {rep.n_train} train / {rep.n_test} test",
             "", "feature ranking",
             f"{'rank':>4}  {'feature':<10} {'J':>9} {'relev':>9} {'redund':>9} {'compl':>9}"]
    for r in rank_rows:
        lines.append(f"{r.rank:>4}  {r.feature:<10} {r.j:>9.4f} {r.relevance:>9.4f} "
                     f"{r.redundancy:>9.4f} {r.complementarity:>9.4f}")
    m = rep.metrics
    lines += ["", f"model features     {', '.join(rep.used)}",
              f"test rmse          {100 * m['rmse']:.3f} % SOH",
              f"avg three sigma    {100 * m['avg_three_sigma']:.3f} % SOH",
              f"3-sigma coverage   {m['coverage_997']:.3f}",
              f"relevance vectors  {m['n_rv']}"]
    if rep.cv:
        lines += ["", "cross-validation (mean over folds)",
                  f"{'n_feat':>6} {'rmse %':>9} {'n_rv':>6} {'3sigma %':>9}"]
        for r in rep.cv:
            lines.append(f"{r.n_features:>6} {100 * r.rmse:>9.3f} {r.n_rv:>6.1f} {100 * r.three_sigma:>9.3f}")
    return "\n".join(lines) + "\n"


def cmd_pipeline(cfg: PipelineConfig) -> RunReport:
    """Synthesize (unless a dataset is given), extract, select, train, evaluate.

    Selection, scaling and model fitting only see the training split.  On
    any failure the files written so far are removed and the error is
    re-raised with the stage name.
    """
    from .featsel import rank_report

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    rep = RunReport()
    written = rep.artifacts
    stage = "synth"

    def path(name):
        p = out / name
        written.append(p)
        return p

    try:
        if cfg.dataset is None:
            profiles, truth = synth_dataset(replace(cfg.aging, seed=cfg.seed))
            write_dataset(profiles, path("dataset.csv"))
            write_ground_truth(truth, path("ground_truth.csv"))
            dataset = out / "dataset.csv"
        else:
            dataset = Path(cfg.dataset)
        stage = "extract"
        profiles = load_dataset(dataset)
        rep.n_profiles = len(profiles)
        result, gated = extract_table(profiles, cfg.extraction, cfg.gate, cfg.threads)
        rep.n_skipped = len(gated.skipped)
        write_feature_table(result.table, path("features.csv"), path("features_mask.csv"))
        fh, w = _writer(path("skipped.csv"))
        with fh:
            w.writerow(["source_id", "cycle", "reason"])
            for (sid, cyc), reason in gated.skipped:
                w.writerow([sid, cyc, reason])

        stage = "split"
        table, _ = usable_columns(result.table)
        train_t, test_t = split(table, replace(cfg.split, seed=cfg.seed))
        train_t, _ = usable_columns(train_t)

        stage = "mi"
        mi, cmi = mi_matrices(train_t, cfg.k, cfg.seed)
        _write_matrix(path("mi.csv"), list(train_t.feature_names) + ["soh"], mi)
        _write_matrix(path("cmi.csv"), list(train_t.feature_names), cmi)

        stage = "select"
        state, trace = select_features(standardize_fit(train_t), threshold=cfg.threshold,
                                       k=cfg.k, seed=cfg.seed)
        write_selection(state, trace, path("selection.csv"), path("removed.csv"))
        rep.selected = list(state.selected)
        if cfg.n_features > len(state.selected):
            raise ValidationError(f"n_features={cfg.n_features} exceeds the {len(state.selected)} "
                                  "selected features")

        stage = "crossval"
        n_max = min(cfg.cv_max_features, len(state.selected))
        if n_max >= 1:
            rep.cv = crossval(train_t, state.selected, list(range(1, n_max + 1)), (1.0,), 5,
                              cfg.seed, threads=cfg.threads)
            write_crossval(rep.cv, path("crossval.csv"))
            fh, w = _writer(path("metric_vs_features.csv"))
            with fh:
                w.writerow(["n_features", "cv_rmse", "cv_n_rv", "cv_avg_three_sigma"])
                for r in rep.cv:
                    w.writerow([r.n_features, fmt_float(r.rmse), fmt_float(r.n_rv),
                                fmt_float(r.three_sigma)])

        stage = "train"
        rep.used = state.selected[:cfg.n_features]
        tr = complete_rows(train_t, rep.used)
        te = complete_rows(test_t, rep.used)
        rep.n_train, rep.n_test = tr.n_rows, te.n_rows
        model = train_table(tr, RvrConfig(rho=cfg.rho))
        save_model(model, path("model.json"))

        stage = "eval"
        if te.n_rows == 0:
            raise EmptyOutputError("test split has no complete rows")
        rep.metrics = evaluate(model, te)
        write_metrics(rep.metrics, path("metrics.csv"))
        mean, sd = predict_many(model, te.rows)
        write_histogram(mean - te.labels, path("error_histogram.csv"))
        fh, w = _writer(path("predictions.csv"))
        with fh:
            w.writerow(["source_id", "cycle", "soh", "soh_mean", "soh_sigma", "lower_3sigma",
                        "upper_3sigma"])
            for (sid, cyc), y, m, s in zip(te.keys, te.labels, mean, sd):
                w.writerow([sid, cyc, fmt_float(y), fmt_float(m), fmt_float(s), fmt_float(m - 3 * s),
                            fmt_float(m + 3 * s)])

        stage = "report"
        path("report.txt").write_text(_format_report(rep, rank_report(state, trace)),
                                      encoding="utf-8")
    except Exception as exc:
        for p in written:
            p.unlink(missing_ok=True)
        exc.stage = stage
        raise
    return rep
