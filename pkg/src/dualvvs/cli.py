"""Command line: ``dualvvs {train,eval,sweep,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 run failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .data import REGIONS, DataError
from .experiment import (
    METRICS,
    REPORT_NAME,
    alpha_dir_name,
    evaluate_run,
    load_datasets,
    load_recordings,
    run_training,
    sweep_columns,
    sweep_row,
)
from .trainer import TrainingError

log = logging.getLogger("dualvvs")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4
SWEEP_CSV = "sweep.csv"
LAYER_CSV = "layer_table.csv"


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else _preset(args.preset)
    return cfg.with_overrides(args.set or [])


def _preset(name: str) -> ExperimentConfig:
    if name == "paper":
        return ExperimentConfig.paper()
    return ExperimentConfig.desk()


def _add_config_args(p):
    p.add_argument("config", nargs="?", help="YAML or JSON experiment config")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk",
                   help="built-in config used when no file is given")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override a config field, e.g. --set train.alpha=0.002 (repeatable)")


def cmd_train(args) -> int:
    cfg = load_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else Path(cfg.output_dir) / cfg.name
    series = run_training(cfg, run_dir, force=args.force, progress=True)
    print(json.dumps({"run_dir": str(run_dir), "checkpoints": [str(p) for _, p in series.checkpoints]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    which = args.metrics.split(",") if args.metrics else list(METRICS)
    bad = [w for w in which if w not in METRICS]
    if bad:
        raise ConfigError(f"--metrics: unknown metric(s) {bad}; choose from {list(METRICS)}")
    report = evaluate_run(args.run_dir, which)
    summary = {k: report[k]["accuracy"] for k in ("ic", "rpp") if k in report}
    for region, rep in report.get("brainsim", {}).items():
        summary[region] = rep["model_score"]["center"]
        summary[f"{region}_layer"] = rep["best_layer"]
    print(json.dumps({"report": str(Path(args.run_dir) / REPORT_NAME), **summary}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    if not cfg.sweep_alphas:
        raise ConfigError("sweep_alphas: the sweep list is empty")
    sweep_dir = Path(args.out) if args.out else Path(cfg.output_dir) / cfg.name
    sweep_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(cfg.data, cfg.train.backbone.input_size)
    regions = [r for r in REGIONS if r in cfg.brain.regions]
    recordings = load_recordings(cfg.brain) if regions else None
    columns = sweep_columns(regions)
    rows, failed = [], 0
    for alpha in cfg.sweep_alphas:
        run_cfg = cfg.with_overrides([f"train.alpha={alpha!r}"])
        run_dir = sweep_dir / alpha_dir_name(alpha)
        try:
            run_training(run_cfg, run_dir, datasets, force=args.force, progress=True)
            which = ["ic", "rpp"] + (["brainsim"] if regions else [])
            report = evaluate_run(run_dir, which, datasets, recordings)
            rows.append(sweep_row(alpha, run_cfg.train.seed, run_dir, report, regions=regions))
        except (TrainingError, DataError, FileExistsError, OSError, RuntimeError, ValueError) as exc:
            failed += 1
            log.error("alpha=%r failed: %s", alpha, exc)
            rows.append(sweep_row(alpha, run_cfg.train.seed, run_dir, None, str(exc), regions=regions))
        write_csv(sweep_dir / SWEEP_CSV, columns, rows)
    if args.plot:
        plot_sweep(sweep_dir / SWEEP_CSV, sweep_dir)
    print(json.dumps({"csv": str(sweep_dir / SWEEP_CSV), "runs": len(rows), "failed": failed}))
    return EXIT_RUN if failed else EXIT_OK


def cmd_report(args) -> int:
    target = Path(args.path)
    if (target / SWEEP_CSV).is_file():
        rows = read_csv(target / SWEEP_CSV)
        print(format_table(rows, [c for c in rows[0] if c not in ("run_dir", "checkpoint_sha256", "schema")]))
        return EXIT_OK
    if (target / REPORT_NAME).is_file():
        report = json.loads((target / REPORT_NAME).read_text())
        if "brainsim" not in report:
            raise DataError(f"{target / REPORT_NAME} has no brainsim section")
        rows = layer_rows(report["brainsim"])
        write_csv(target / LAYER_CSV, list(rows[0]), rows)
        print(format_table(rows, list(rows[0])))
        return EXIT_OK
    raise DataError(f"{target} holds neither {SWEEP_CSV} nor {REPORT_NAME}")


# -- tables and plots ------------------------------------------------------------------


def write_csv(path: Path, columns, rows):
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)


def read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path} has no rows")
    return rows


def layer_rows(brainsim: dict) -> list:
    """Layer x region table of centers and spreads from an evaluation report."""
    from .brainsim import BrainScoreReport, layer_table_rows

    reports = {region: BrainScoreReport.from_dict(d) for region, d in brainsim.items()}
    return layer_table_rows(reports)


def format_table(rows, columns) -> str:
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns))
    return "\n".join(lines)


def plot_sweep(csv_path: Path, out_dir: Path):
    """One PNG per metric against alpha (symmetric-log x axis, so alpha=0 is shown)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in read_csv(csv_path) if r["status"] == "ok"]
    alphas = [float(r["alpha"]) for r in rows]
    metrics = ["ic", "rpp"] + [r for r in REGIONS if r in rows[0]] if rows else []
    for metric in metrics:
        vals = [float(r[metric]) if r[metric] else float("nan") for r in rows]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(alphas, vals, marker="o")
        ax.set_xscale("symlog", linthresh=1e-5)
        ax.set_xlabel("alpha")
        ax.set_ylabel(metric)
        fig.tight_layout()
        fig.savefig(out_dir / f"sweep_{metric}.png", dpi=120)
        plt.close(fig)


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualvvs", description="Train and evaluate dual-task vision models.",
                                     epilog="exit codes: 0 ok, 2 config error, 3 data error, 4 run failure")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_args(p)
    p.add_argument("--run-dir", help="output directory (default: <output_dir>/<name>)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the last checkpoint of a run")
    p.add_argument("run_dir")
    p.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)} (default: all)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and score one run per alpha")
    _add_config_args(p)
    p.add_argument("--out", help="sweep directory (default: <output_dir>/<name>)")
    p.add_argument("--force", action="store_true")
    p.add_argument("--plot", action="store_true", help="write metric-vs-alpha PNGs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print the table of a sweep or evaluated run")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FileExistsError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
