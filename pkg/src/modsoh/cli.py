"""Command-line entry point: ``modsoh <subcommand> ...``.

Exit codes: 0 on success, 2 for invalid input or arguments, 3 for numerical
failures, 4 for file-system errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .errors import NumericalError, ValidationError
from .featext import ExtractionConfig
from .synthgen import AgingSpec

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in _names(text)]


def _floats(text: str) -> list[float]:
    return [float(t) for t in _names(text)]


def _extraction(args) -> ExtractionConfig:
    base = {"default": ExtractionConfig, "cell": ExtractionConfig.cell_family,
            "module": ExtractionConfig.module_family}[args.family]
    return base(bandwidth=args.bandwidth, ridge=args.ridge)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress):
        # subcommands repeat the global flags without defaults so that
        # ``modsoh --seed 3 synth`` and ``modsoh synth --seed 3`` agree
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=d(0), help="seed for splits, jitter and synthesis")
        g.add_argument("--k", type=int, default=d(5), help="neighbour count of the MI estimator")
        g.add_argument("--threads", type=int, default=d(1), help="worker threads")
        g.add_argument("--verbose", "-v", action="store_true", default=d(False))
        return g

    common = global_flags(True)
    p = argparse.ArgumentParser(prog="modsoh", parents=[global_flags(False)],
                                description="Module state-of-health estimation from charging curves.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic module dataset")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--modules", type=int, default=AgingSpec.n_modules)
    s.add_argument("--checkpoints", type=int, default=AgingSpec.n_checkpoints)
    s.add_argument("--cells", type=int, default=AgingSpec.cells_per_module)
    s.add_argument("--variation-cv", type=float, default=AgingSpec.variation_cv)
    s.add_argument("--noise", type=float, default=AgingSpec.noise_sigma_v, help="voltage noise sigma (V)")

    def add_fit_flags(q):
        q.add_argument("--family", choices=("default", "cell", "module"), default="default")
        q.add_argument("--bandwidth", type=float, default=None)
        q.add_argument("--ridge", type=float, default=None)

    e = sub.add_parser("extract", parents=[common], help="fit curves and write the feature table")
    e.add_argument("dataset", type=Path)
    e.add_argument("out", type=Path)
    e.add_argument("--mask", type=Path, default=None, help="availability mask CSV (default: out with suffix .mask.csv)")
    e.add_argument("--dump-curves", type=Path, default=None)
    e.add_argument("--skipped", type=Path, default=None)
    e.add_argument("--gate", type=int, default=0, help="minimum samples near the dominant peak")
    add_fit_flags(e)

    m = sub.add_parser("mi", parents=[common], help="pairwise normalized MI and CMI matrices")
    m.add_argument("features", type=Path)
    m.add_argument("mi_out", type=Path)
    m.add_argument("cmi_out", type=Path)

    se = sub.add_parser("select", parents=[common], help="rank features")
    se.add_argument("features", type=Path)
    se.add_argument("out", type=Path)
    se.add_argument("--removed", type=Path, default=None, help="removed-set CSV (default: out with suffix .removed.csv)")
    se.add_argument("--threshold", type=float, default=0.9)
    se.add_argument("--preselect", type=_names, default=[])

    c = sub.add_parser("crossval", parents=[common], help="k-fold validation over feature counts and widths")
    c.add_argument("features", type=Path)
    c.add_argument("selection", type=Path)
    c.add_argument("out", type=Path)
    c.add_argument("--n-features", type=_ints, default=[1, 2, 3, 4, 5])
    c.add_argument("--rho-factors", type=_floats, default=[0.1, 0.5, 1.0, 2.0, 5.0])
    c.add_argument("--folds", type=int, default=5)

    t = sub.add_parser("train", parents=[common], help="fit the relevance-vector model")
    t.add_argument("features", type=Path)
    t.add_argument("model_out", type=Path)
    t.add_argument("--selection", type=Path, default=None)
    t.add_argument("--columns", type=_names, default=None, help="explicit feature list")
    t.add_argument("--n-features", type=int, default=2)
    t.add_argument("--rho", type=float, default=None)

    pr = sub.add_parser("predict", parents=[common], help="SOH estimates with three-sigma bounds")
    pr.add_argument("model", type=Path)
    pr.add_argument("features", type=Path)
    pr.add_argument("out", type=Path)

    ev = sub.add_parser("eval", parents=[common], help="metrics on a labelled feature table")
    ev.add_argument("model", type=Path)
    ev.add_argument("features", type=Path)
    ev.add_argument("out", type=Path)
    ev.add_argument("--histogram", type=Path, default=None)

    pp = sub.add_parser("pipeline", parents=[common], help="run every stage end to end")
    pp.add_argument("out_dir", type=Path)
    pp.add_argument("--dataset", type=Path, default=None, help="skip synthesis and read this dataset")
    pp.add_argument("--threshold", type=float, default=0.9)
    pp.add_argument("--n-features", type=int, default=2)
    pp.add_argument("--rho", type=float, default=None)
    pp.add_argument("--gate", type=int, default=8)
    pp.add_argument("--train-fraction", type=float, default=0.8)
    add_fit_flags(pp)
    return p


def run(args) -> None:
    cmd = args.command
    if cmd == "synth":
        aging = AgingSpec(n_modules=args.modules, n_checkpoints=args.checkpoints,
                          cells_per_module=args.cells, variation_cv=args.variation_cv,
                          noise_sigma_v=args.noise, seed=args.seed)
        pl.cmd_synth(args.out_dir, aging)
    elif cmd == "extract":
        mask = args.mask or args.out.with_suffix(".mask.csv")
        result, gated = pl.cmd_extract(args.dataset, args.out, mask, _extraction(args), args.gate,
                                       args.dump_curves, args.skipped, args.threads)
        logging.info("extracted %d profiles, skipped %d", result.table.n_rows, len(gated.skipped))
    elif cmd == "mi":
        pl.cmd_mi(args.features, args.mi_out, args.cmi_out, args.k, args.seed)
    elif cmd == "select":
        removed = args.removed or args.out.with_suffix(".removed.csv")
        pl.cmd_select(args.features, args.out, removed, args.threshold, args.preselect, args.k, args.seed)
    elif cmd == "crossval":
        pl.cmd_crossval(args.features, args.selection, args.out, args.n_features, args.rho_factors,
                        args.folds, args.seed, args.threads)
    elif cmd == "train":
        if args.selection is None and not args.columns:
            raise ValidationError("train needs --selection or --columns")
        pl.cmd_train(args.features, args.selection, args.model_out, args.n_features, args.rho,
                     args.columns)
    elif cmd == "predict":
        pl.cmd_predict(args.model, args.features, args.out)
    elif cmd == "eval":
        pl.cmd_eval(args.model, args.features, args.out, args.histogram)
    elif cmd == "pipeline":
        from .data_model import SplitSpec

        cfg = pl.PipelineConfig(out_dir=args.out_dir, dataset=args.dataset,
                                extraction=_extraction(args),
                                split=SplitSpec(train_fraction=args.train_fraction),
                                k=args.k, seed=args.seed, threshold=args.threshold, rho=args.rho,
                                n_features=args.n_features, gate=args.gate, threads=args.threads)
        rep = pl.cmd_pipeline(cfg)
        print((cfg.out_dir / "report.txt").read_text(encoding="utf-8"), end="")
        logging.info("wrote %d artifacts", len(rep.artifacts))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ValidationError, NumericalError, OSError) as exc:
        code = (EXIT_VALIDATION if isinstance(exc, ValidationError)
                else EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_IO)
        stage = getattr(exc, "stage", None)
        prefix = f"{args.command} [{stage}]" if stage else args.command
        print(f"modsoh {prefix}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
