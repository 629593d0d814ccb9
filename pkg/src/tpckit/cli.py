"""Command-line entry point: ``tpckit <command> [options]``.

Commands
--------
synth       generate a synthetic cohort as raw CSV files
preprocess  split, fit statistics on train, and write the processed dataset
train       train one model per seed; one run directory per (model, loss, seed)
evaluate    compute the six metrics for every run in a model directory
compare     aggregate two model directories and test each metric for a difference
ablate      train and evaluate the TPC ablation variants
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .data import build_dataset, generate_cohort, load_dataset, read_cohort, save_dataset, write_cohort
from .data.io import dataset_hash
from .experiments import Arm, run_arm
from .metrics import METRIC_NAMES, MetricReport, aggregate_runs, comparison_table, evaluate, t_test
from .training import PredictionTable, TrainConfig, train


class CLIError(Exception):
    """Reported on stderr with exit status 1."""


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CLIError(f"output directory {path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    overrides = {
        "n_patients": getattr(args, "n_patients", None),
        "loss": getattr(args, "loss", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None),
        "variants": getattr(args, "variants", None),
    }
    if getattr(args, "model", None):
        overrides["model"] = {"kind": args.model}
    for key in ("variant", "n_layers", "temp_channels", "point_channels"):
        if getattr(args, key, None) is not None:
            overrides[f"model.{key}"] = getattr(args, key)
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    elif args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.seed is not None:
        overrides["data_seed"] = args.seed
    try:
        return load_config(args.config, **overrides)
    except (ValueError, OSError) as exc:
        raise CLIError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _prepare_out(Path(args.out or cfg.raw_dir), args.force)
    cohort = generate_cohort(cfg.data_seed, cfg.n_patients, cfg.n_lab, cfg.n_nurse, cfg.n_vital, cfg.multi_stay)
    write_cohort(cohort, out)
    los = np.array([s.los_total for s in cohort.stays])
    summary = {"n_patients": cfg.n_patients, "n_stays": len(cohort.stays),
               "los_mean_days": float(los.mean()), "los_median_days": float(np.median(los)),
               "seed": cfg.data_seed}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"wrote {len(cohort.stays)} stays to {out}")
    print(f"LoS mean {summary['los_mean_days']:.2f} days, median {summary['los_median_days']:.2f} days")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    src = Path(args.input or cfg.raw_dir)
    try:
        cohort = read_cohort(src)
    except FileNotFoundError as exc:
        raise CLIError(str(exc)) from None
    out = _prepare_out(Path(args.out or cfg.processed_dir), args.force)
    ds = build_dataset(cohort, cfg.data_seed, cfg.diag_threshold)
    save_dataset(ds, out)
    m = ds.manifest()
    print(f"patients train/val/test = {m['patient_counts']['train']}/{m['patient_counts']['val']}/"
          f"{m['patient_counts']['test']}; stays = {sum(m['stay_counts'].values())}")
    print(f"dataset hash {dataset_hash(out)}")
    return 0


def _load_data(path: Path):
    try:
        return load_dataset(path), dataset_hash(path)
    except FileNotFoundError as exc:
        raise CLIError(f"processed dataset not found: {exc}") from None


def _run_name(model: dict, loss: str) -> str:
    name = model["kind"] if model["kind"] != "tpc" else f"tpc_{model.get('variant', 'full')}"
    return f"{name}_{loss}"


def cmd_train(args) -> int:
    cfg = _config(args)
    ds, dhash = _load_data(Path(args.data or cfg.processed_dir))
    root = Path(args.out or cfg.out) / _run_name(cfg.model, cfg.loss)
    for seed in cfg.seeds:
        run_dir = root / f"seed{seed}"
        if run_dir.exists() and not args.force:
            raise CLIError(f"run directory {run_dir} exists (use --force)")
        tc = TrainConfig(cfg.model, loss=cfg.loss, seed=seed, **cfg.train_kwargs())
        result = train(ds, tc, out_dir=run_dir, verbose=args.verbose, dataset_hash=dhash)
        report = evaluate(result.predictions.y_true, result.predictions.y_pred)
        report.save(run_dir / "metrics.json")
        print(f"{root.name} seed {seed}: test MSLE {report.msle:.4f}, best epoch {result.best_epoch + 1}, "
              f"{result.wall_clock:.0f}s")
    cfg.save(root / "experiment.json")
    return 0


def _run_dirs(model_dir: Path) -> list[Path]:
    runs = sorted(p for p in model_dir.glob("seed*") if (p / "predictions.csv").exists())
    if not runs:
        raise CLIError(f"no runs with predictions under {model_dir}")
    return runs


def _reports(model_dir: Path) -> tuple[list[MetricReport], set[str]]:
    reports, hashes = [], set()
    for run in _run_dirs(model_dir):
        table = PredictionTable.from_csv(run / "predictions.csv")
        report = evaluate(table.y_true, table.y_pred)
        report.save(run / "metrics.json")
        reports.append(report)
        manifest = json.loads((run / "run.json").read_text()) if (run / "run.json").exists() else {}
        hashes.add(manifest.get("dataset_hash"))
    return reports, hashes


def _format_row(name: str, r: MetricReport) -> str:
    r2 = "nan" if not r.r2_defined else f"{r.r2:.2f}"
    return (f"{name:<12} MAD {r.mad:.2f}  MAPE {r.mape:.2f}  MSE {r.mse:.2f}  MSLE {r.msle:.2f}  "
            f"R2 {r2}  Kappa {r.kappa:.2f}")


def cmd_evaluate(args) -> int:
    model_dir = Path(args.runs)
    reports, _ = _reports(model_dir)
    for run, r in zip(_run_dirs(model_dir), reports):
        print(_format_row(run.name, r))
    if len(reports) >= 2:
        agg = aggregate_runs(reports)
        (model_dir / "aggregate.json").write_text(json.dumps(agg.to_json(), indent=1))
        print(comparison_table({model_dir.name: agg}))
    return 0


def cmd_compare(args) -> int:
    a_dir, b_dir = Path(args.a), Path(args.b)
    ra, ha = _reports(a_dir)
    rb, hb = _reports(b_dir)
    if len(ha | hb) > 1:
        raise CLIError(f"runs were trained on different datasets: {sorted(map(str, ha | hb))}")
    if len(ra) < 2 or len(rb) < 2:
        raise CLIError("compare needs at least 2 runs per model directory")
    name_a = a_dir.name
    name_b = b_dir.name if b_dir.name != name_a else f"{name_a} (b)"
    aggs = {name_a: aggregate_runs(ra), name_b: aggregate_runs(rb)}
    names = [name_a, name_b]
    table = comparison_table(aggs, reference=names[0], welch=not args.student)
    print(table)
    tests = {}
    for m in METRIC_NAMES:
        p, s = t_test(aggs[names[0]].values[m], aggs[names[-1]].values[m], welch=not args.student)
        tests[m] = {"p": p, "stars": s}
        print(f"{m:<6} p = {p:.4g} {s}")
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(table + "\n")
        (out / "comparison.json").write_text(json.dumps({"models": names, "tests": tests}, indent=1))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds, dhash = _load_data(Path(args.data or cfg.processed_dir))
    root = Path(args.out or cfg.out)
    base = {k: v for k, v in cfg.model.items() if k != "variant"} if cfg.kind == "tpc" else {"kind": "tpc"}
    aggs = {}
    for variant in cfg.variants:
        model = {**base, "variant": variant}
        arm = Arm(_run_name(model, cfg.loss), model, cfg.loss, cfg.train_kwargs())
        if (root / arm.name).exists() and not args.force:
            raise CLIError(f"run directory {root / arm.name} exists (use --force)")
        result = run_arm(ds, arm, cfg.seeds, root, dhash)
        for seed, r in zip(result.seeds, result.reports):
            print(_format_row(f"{variant}/s{seed}", r))
        if len(result.reports) >= 2:
            aggs[variant] = aggregate_runs(result.reports)
    if len(aggs) >= 1:
        ref = "full" if "full" in aggs else None
        table = comparison_table(aggs, reference=ref)
        (root / "ablation.txt").write_text(table + "\n")
        print(table)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, metavar="N", help="seed (data seed and the single training seed)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    def positive(value: str) -> int:
        n = int(value)
        if n < 1:
            raise argparse.ArgumentTypeError("must be a positive integer")
        return n

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--data", metavar="DIR", help="processed dataset directory")
    training.add_argument("--loss", choices=("msle", "mse"))
    training.add_argument("--lr", type=float)
    training.add_argument("--batch-size", type=positive)
    training.add_argument("--epochs", type=int)
    training.add_argument("--seeds", type=int, nargs="+", metavar="N", help="training seeds, one run each")
    training.add_argument("--n-layers", type=positive)
    training.add_argument("--temp-channels", type=positive)
    training.add_argument("--point-channels", type=int)
    training.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tpckit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"tpckit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n-patients", type=positive)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="build the processed dataset")
    p.add_argument("--input", metavar="DIR", help="raw cohort directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common, training], help="train a model per seed")
    p.add_argument("--model", choices=("tpc", "mean", "median", "lstm", "cw_lstm", "transformer"))
    p.add_argument("--variant", choices=("full", "temp_only", "point_only", "temp_only_weight_shared", "no_skip"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for every run of a model")
    p.add_argument("runs", metavar="MODEL_DIR")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="compare two model directories")
    p.add_argument("a", metavar="A_DIR")
    p.add_argument("b", metavar="B_DIR")
    p.add_argument("--student", action="store_true", help="Student's t-test instead of Welch's")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", parents=[common, training], help="run the TPC ablation variants")
    p.add_argument("--variants", nargs="+",
                   choices=("full", "temp_only", "point_only", "temp_only_weight_shared", "no_skip"))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"tpckit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
