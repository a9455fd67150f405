"""Command-line interface: run scenarios, compare reports, reproduce figures.

Verbosity is controlled only by the ROADFL_LOG environment variable
(debug/info/warning/error; default warning).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import statistics
import sys
from contextlib import ExitStack
from importlib import resources
from pathlib import Path

from .harness import run_scenario
from .learner import save_model
from .report import (
    MetricsReport,
    compare,
    format_comparison,
    load_report,
    save_report,
    write_comparison_csv,
)
from .scenario import Scenario, load_scenario
from . import plots

log = logging.getLogger("roadfl")

TRAJECTORY_HEADER = ["time", "vehicle", "link", "position_m", "speed_mps"]

_FIG_ARMS = {
    "fig2": ("baseline_high",),
    "fig3": ("baseline_low", "single_low", "sybil_low"),
    "fig4": ("baseline_low", "single_low", "baseline_high", "single_high"),
    "fig5": ("baseline_low", "sybil_low", "baseline_high", "sybil_high"),
}


def _configure_logging() -> None:
    level = os.environ.get("ROADFL_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")


def _ensure_outdir(path: Path) -> Path:
    """Create the output directory and verify it is writable, eagerly."""
    probe = path / ".write_probe"
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise SystemExit(f"output directory {path} is not writable: {exc}")
    return path


def _parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def _write_trajectories(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for t, vid, link, pos, speed in rows:
            w.writerow([t, vid, link, repr(float(pos)), repr(float(speed))])


def _write_centralized(trace, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "rmse_kmh"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def cmd_run(args) -> int:
    sc = load_scenario(args.config)
    out = _ensure_outdir(Path(args.out))
    traj: list | None = [] if args.trajectories else None
    models: list = []
    report = run_scenario(sc, args.seed, trajectories_out=traj,
                          compute_centralized=args.centralized,
                          final_model_out=models)
    paths = save_report(report, out)
    if args.save_model:
        save_model(models[-1], out / "model.json")
    if traj is not None:
        _write_trajectories(traj, out / "trajectories.csv")
    if report.centralized_trace is not None:
        _write_centralized(report.centralized_trace, out / "centralized.csv")
        plots.plot_rmse([report], out / "rmse.pdf",
                        extra_series={"centralized": list(report.centralized_trace)})
    else:
        plots.plot_rmse([report], out / "rmse.pdf")
    print(f"{report.name}: final RMSE {report.final_rmse_kmh:.4f} km/h over "
          f"{len(report.records)} rounds -> {paths['rounds']}")
    return 0


def cmd_compare(args) -> int:
    reports = [load_report(p) for p in args.reports]
    rows = compare(reports)
    out = _ensure_outdir(Path(args.out))
    write_comparison_csv(rows, out / "comparison.csv")
    plots.plot_rmse(reports, out / "comparison.pdf")
    print(format_comparison(rows))
    return 0


def cmd_sweep(args) -> int:
    sc = load_scenario(args.config)
    seeds = args.seeds
    out = _ensure_outdir(Path(args.out))
    reports = []
    for seed in seeds:
        report = run_scenario(sc, seed)
        save_report(report, out / f"seed_{seed}")
        reports.append(report)
    with open(out / "sweep_summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "seed", "final_rmse_kmh", "rounds_to_convergence"])
        for r in reports:
            w.writerow([r.name, r.seed, repr(float(r.final_rmse_kmh)),
                        "" if r.rounds_to_convergence is None else r.rounds_to_convergence])
    plots.plot_mean_rmse({sc.name: reports}, out / "sweep.pdf")
    mean_final = statistics.fmean(r.final_rmse_kmh for r in reports)
    print(f"{sc.name}: {len(reports)} seeds, mean final RMSE {mean_final:.4f} km/h")
    return 0


def bundled_config_dir(stack: ExitStack) -> Path:
    return stack.enter_context(
        resources.as_file(resources.files("roadfl").joinpath("configs")))


def load_bundled_scenario(name: str) -> Scenario:
    with ExitStack() as stack:
        cfg_dir = bundled_config_dir(stack)
        return load_scenario(cfg_dir / f"{name}.yaml")


def cmd_reproduce(args) -> int:
    arms = _FIG_ARMS[args.figure]
    out = _ensure_outdir(Path(args.out))
    scenarios = {name: load_bundled_scenario(name) for name in arms}

    if args.figure == "fig2":
        sc = scenarios[arms[0]]
        report = run_scenario(sc, args.seed, compute_centralized=True)
        save_report(report, out / sc.name)
        _write_centralized(report.centralized_trace, out / "centralized.csv")
        plots.plot_rmse(
            [report], out / "fig2.pdf",
            title="Federated vs centralized training",
            extra_series={"centralized": list(report.centralized_trace)})
        ratio = report.final_rmse_kmh / report.centralized_trace[-1]
        print(f"fig2: FL final {report.final_rmse_kmh:.4f} km/h, centralized "
              f"final {report.centralized_trace[-1]:.4f} km/h (ratio {ratio:.3f})")
        return 0

    seeds = list(range(args.seeds))
    by_arm: dict[str, list[MetricsReport]] = {name: [] for name in arms}
    for seed in seeds:
        cache: dict = {}
        for name in arms:
            report = run_scenario(scenarios[name], seed, _trace_cache=cache)
            by_arm[name].append(report)

    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "seed", "final_rmse_kmh"])
        for name in arms:
            for r in by_arm[name]:
                w.writerow([name, r.seed, repr(float(r.final_rmse_kmh))])

    means = {name: statistics.fmean(r.final_rmse_kmh for r in by_arm[name])
             for name in arms}
    base = means[arms[0]]
    with open(out / "means.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "mean_final_rmse_kmh", "delta_vs_first_kmh"])
        for name in arms:
            w.writerow([name, repr(means[name]), repr(means[name] - base)])

    plots.plot_mean_rmse(by_arm, out / f"{args.figure}.pdf",
                         title=f"{args.figure}: held-out RMSE per round (seed mean)")
    for name in arms:
        print(f"{name}: mean final RMSE {means[name]:.4f} km/h "
              f"(delta {means[name] - base:+.4f})")
    return 0


def main(argv=None) -> int:
    _configure_logging()
    parser = argparse.ArgumentParser(
        prog="roadfl",
        description="Traffic + federated-learning co-simulator with "
                    "model-poisoning adversaries")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--trajectories", action="store_true",
                       help="also dump per-second vehicle trajectories")
    p_run.add_argument("--centralized", action="store_true",
                       help="also train the centralized baseline on pooled data")
    p_run.add_argument("--save-model", action="store_true",
                       help="write the final global model checkpoint (model.json)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare saved reports")
    p_cmp.add_argument("reports", nargs="+",
                       help="report directories (or files inside them)")
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_sweep = sub.add_parser("sweep", help="run one scenario across seeds")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--seeds", type=_parse_seed_range, required=True,
                         help="seed range a..b (inclusive) or a single seed")
    p_sweep.add_argument("--out", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_rep = sub.add_parser("reproduce",
                           help="rebuild a reference figure from bundled configs")
    p_rep.add_argument("figure", choices=sorted(_FIG_ARMS))
    p_rep.add_argument("--out", required=True)
    p_rep.add_argument("--seeds", type=int, default=12,
                       help="number of seeds for multi-arm figures")
    p_rep.add_argument("--seed", type=int, default=None,
                       help="seed override for fig2")
    p_rep.set_defaults(func=cmd_reproduce)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
