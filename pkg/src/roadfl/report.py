"""Metrics persistence: per-round CSV, report JSON, and comparison tables.

All CSV formats are bit-specified: floats are written with ``repr`` (shortest
round-tripping form), so re-ingesting a file reproduces the in-memory values
exactly and identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

ROUNDS_CSV_HEADER = ["round", "volunteers", "selected", "received", "status", "rmse_kmh"]
ATTACK_CSV_HEADER = ["round", "mode", "identities_emitted", "selected_count"]
COMPARISON_CSV_HEADER = ["scenario", "final_rmse_kmh", "delta_vs_first_kmh",
                         "rounds_to_convergence"]


class ComparisonError(ValueError):
    """Reports are not comparable (different evaluation sets)."""


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    volunteers: int
    selected: int
    received: int
    status: str
    rmse_kmh: float


@dataclass(frozen=True)
class AttackLogRecord:
    round_index: int
    mode: str
    identities_emitted: int
    selected_count: int


@dataclass(frozen=True)
class MetricsReport:
    """Outcome of one scenario run."""

    name: str
    seed: int
    fingerprint: str
    eval_fingerprint: str
    records: tuple[RoundRecord, ...]
    final_rmse_kmh: float
    rounds_to_convergence: int | None
    attack_mode: str | None = None
    attack_records: tuple[AttackLogRecord, ...] = ()
    centralized_trace: tuple[float, ...] | None = None


def _f(x: float) -> str:
    return repr(float(x))


def write_rounds_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUNDS_CSV_HEADER)
        for r in report.records:
            w.writerow([r.round_index, r.volunteers, r.selected, r.received,
                        r.status, _f(r.rmse_kmh)])


def read_rounds_csv(path) -> tuple[RoundRecord, ...]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ROUNDS_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return tuple(
            RoundRecord(int(row[0]), int(row[1]), int(row[2]), int(row[3]),
                        row[4], float(row[5]))
            for row in reader)


def write_attack_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTACK_CSV_HEADER)
        for r in report.attack_records:
            w.writerow([r.round_index, r.mode, r.identities_emitted, r.selected_count])


def read_attack_csv(path) -> tuple[AttackLogRecord, ...]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ATTACK_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return tuple(
            AttackLogRecord(int(row[0]), row[1], int(row[2]), int(row[3]))
            for row in reader)


def save_report(report: MetricsReport, out_dir) -> dict[str, Path]:
    """Write rounds.csv, report.json and (when present) attack_log.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"rounds": out / "rounds.csv", "report": out / "report.json"}
    write_rounds_csv(report, paths["rounds"])
    doc = {
        "name": report.name,
        "seed": report.seed,
        "fingerprint": report.fingerprint,
        "eval_fingerprint": report.eval_fingerprint,
        "final_rmse_kmh": report.final_rmse_kmh,
        "rounds_to_convergence": report.rounds_to_convergence,
        "attack_mode": report.attack_mode,
        "centralized_trace": (list(report.centralized_trace)
                              if report.centralized_trace is not None else None),
    }
    with open(paths["report"], "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if report.attack_records:
        paths["attack"] = out / "attack_log.csv"
        write_attack_csv(report, paths["attack"])
    return paths


def load_report(path) -> MetricsReport:
    """Re-ingest a saved report from its directory (or a file inside it)."""
    p = Path(path)
    if p.is_file():
        p = p.parent
    doc = json.loads((p / "report.json").read_text(encoding="utf-8"))
    records = read_rounds_csv(p / "rounds.csv")
    attack_path = p / "attack_log.csv"
    attack_records = read_attack_csv(attack_path) if attack_path.exists() else ()
    centr = doc.get("centralized_trace")
    return MetricsReport(
        name=doc["name"], seed=int(doc["seed"]), fingerprint=doc["fingerprint"],
        eval_fingerprint=doc["eval_fingerprint"], records=records,
        final_rmse_kmh=float(doc["final_rmse_kmh"]),
        rounds_to_convergence=doc["rounds_to_convergence"],
        attack_mode=doc.get("attack_mode"), attack_records=attack_records,
        centralized_trace=tuple(centr) if centr is not None else None)


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    final_rmse_kmh: float
    delta_vs_first_kmh: float
    rounds_to_convergence: int | None


def compare(reports) -> list[ComparisonRow]:
    """Final-RMSE deltas against the first report.

    Refuses to compare runs whose held-out evaluation sets differ.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    base_fp = reports[0].eval_fingerprint
    for r in reports[1:]:
        if r.eval_fingerprint != base_fp:
            raise ComparisonError(
                f"report {r.name!r} was evaluated on a different held-out set "
                f"({r.eval_fingerprint} != {base_fp})")
    base = reports[0].final_rmse_kmh
    return [
        ComparisonRow(
            name=r.name, final_rmse_kmh=r.final_rmse_kmh,
            delta_vs_first_kmh=r.final_rmse_kmh - base,
            rounds_to_convergence=r.rounds_to_convergence)
        for r in reports]


def write_comparison_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_CSV_HEADER)
        for r in rows:
            w.writerow([r.name, _f(r.final_rmse_kmh), _f(r.delta_vs_first_kmh),
                        "" if r.rounds_to_convergence is None else r.rounds_to_convergence])


def format_comparison(rows) -> str:
    lines = [f"{'scenario':<24} {'final RMSE':>12} {'delta':>10} {'conv round':>10}"]
    for r in rows:
        conv = "-" if r.rounds_to_convergence is None else str(r.rounds_to_convergence)
        lines.append(f"{r.name:<24} {r.final_rmse_kmh:>12.4f} "
                     f"{r.delta_vs_first_kmh:>+10.4f} {conv:>10}")
    return "\n".join(lines)
