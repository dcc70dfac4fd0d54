"""Command line entry point: ``lungsound <verb> --config FILE --set key=value``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import LungSoundError

logger = logging.getLogger("lungsound")

VERBS = ("ingest", "features", "calibrate-spectrum", "train", "evaluate", "export-embeddings",
         "plot", "smoke")


def _load(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config, args.set)


def cmd_ingest(args) -> int:
    from .experiment import load_corpus, make_split
    from .ingest import device_shares, label_counts, normalized_rows, write_normalized_manifest, TASK_CLASSES

    cfg = _load(args)
    recordings, folds = load_corpus(cfg)
    plan = make_split(cfg, recordings, folds)
    out = Path(args.out or Path(cfg["experiment"]["output_dir"]) / "manifest.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_normalized_manifest(out, normalized_rows(recordings, cfg.task, plan))
    counts = label_counts(recordings, cfg.task)
    print(f"{len(recordings)} recordings, split {plan.scheme} ({plan.fingerprint()})")
    for label, name in enumerate(TASK_CLASSES[cfg.task]):
        print(f"  {name}: {counts.get(label, 0)}")
    for dev, share in sorted(device_shares(recordings).items()):
        print(f"  device {dev}: {100 * share:.1f}%")
    print(f"manifest written to {out}")
    return 0


def cmd_features(args) -> int:
    from .experiment import load_corpus, load_units, make_split, prepare_fold

    cfg = _load(args)
    recordings, folds = load_corpus(cfg)
    plan = make_split(cfg, recordings, folds)
    data = prepare_fold(cfg, load_units(cfg, recordings), plan, args.fold)
    out = Path(args.out or Path(cfg["experiment"]["output_dir"]) / f"features_fold{args.fold}.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, **{f"X_{k}": v.numpy() for k, v in data.X.items()},
                        **{f"y_{k}": v.numpy() for k, v in data.y.items()},
                        norm=np.array([data.stats.count, data.stats.mean, data.stats.m2]))
    print(f"{', '.join(f'{k}: {len(v)}' for k, v in data.y.items())} segments -> {out}")
    return 0


def cmd_calibrate(args) -> int:
    from .experiment import fit_corrector, load_corpus, load_units, make_split

    cfg = _load(args)
    recordings, folds = load_corpus(cfg)
    plan = make_split(cfg, recordings, folds)
    train = set(plan.partition(args.fold)["train"])
    corrector = fit_corrector(cfg, [u for u in load_units(cfg, recordings) if u.recording in train])
    out = Path(args.out or Path(cfg["experiment"]["output_dir"]) / f"speccorr_fold{args.fold}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    corrector.save(out, cfg.digest())
    for dev, cc in sorted(corrector.coefficients.items()):
        print(f"{dev}: coefficients in [{cc.coeffs.min():.3f}, {cc.coeffs.max():.3f}], "
              f"{cc.clipped_bins} clipped bins")
    print(f"written {out}")
    return 0


def cmd_train(args) -> int:
    from .experiment import run_experiment, summarize_results

    cfg = _load(args)
    rows = run_experiment(cfg)
    for line in summarize_results(rows):
        print(line)
    return 0


def cmd_evaluate(args) -> int:
    from .experiment import evaluate, load_checkpoint, load_corpus, load_units, make_split, prepare_fold

    cfg = _load(args)
    recordings, folds = load_corpus(cfg)
    plan = make_split(cfg, recordings, folds)
    model, ckpt = load_checkpoint(args.checkpoint, cfg, plan)
    data = prepare_fold(cfg, load_units(cfg, recordings), plan, ckpt["fold"])
    report = evaluate(model, data, cfg.task, split=args.split, run_seed=ckpt["seed"])
    print(json.dumps({k: (float(v) if isinstance(v, (float, np.floating)) else v)
                      for k, v in report.row().items()}, default=str))
    return 0


def cmd_export(args) -> int:
    from .experiment import export_embeddings

    cfg = _load(args)
    n = export_embeddings(args.checkpoint, cfg, args.split, args.out, args.level)
    print(f"{n} rows written to {args.out}")
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_plots

    files = []
    for path in args.results:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        files += emit_plots(rows, args.out, args.metric, Path(path).stem)
    for f in files:
        print(f)
    return 0


def cmd_smoke(args) -> int:
    from .synthetic import run_smoke

    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="lungsound-smoke-"))
    result = run_smoke(workdir, epochs=args.epochs, seed=args.seed)
    for r in result["rows"]:
        print(f"{r['mode']:>20s}  AS={float(r['AS']):.4f}  SE={float(r['SE']):.4f}  SP={float(r['SP']):.4f}")
    gb, ga = result["gap_before"], result["gap_after"]
    print(f"device gap {gb:.4g} -> {ga:.4g} ({100 * (1 - ga / gb):.1f}% reduction)")
    print(f"outputs in {workdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lungsound", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=10")
        p.set_defaults(func=func)
        return p

    p = verb("ingest", cmd_ingest, "scan a corpus and write a normalized manifest")
    p.add_argument("--out")
    p = verb("features", cmd_features, "compute normalized model inputs for one fold")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out")
    p = verb("calibrate-spectrum", cmd_calibrate, "fit per-device spectrum correction")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out")
    verb("train", cmd_train, "run every configured fold, run, mode and depth")
    p = verb("evaluate", cmd_evaluate, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p = verb("export-embeddings", cmd_export, "write pooled embeddings of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--level", default="unit", choices=("unit", "segment"))
    p.add_argument("--out", required=True)
    p = verb("plot", cmd_plot, "grouped bar charts from results CSVs")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", default=".")
    p.add_argument("--metric", default="AS")
    p = verb("smoke", cmd_smoke, "end-to-end run on a generated synthetic corpus")
    p.add_argument("--workdir")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LungSoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
