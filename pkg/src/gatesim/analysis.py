"""Race log analysis: lap statistics, sector distributions, and
estimator-vs-truth error reports.

Statistics follow the race-report convention: population standard
deviation (the laps flown are the whole population of the run), one row
per run plus a combined row when aggregating.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .harness import LapRecord


class NoLapsError(ValueError):
    """Analysis requested on a log with no completed laps."""


@dataclass(frozen=True)
class LapStats:
    n_laps: int
    lap_avg: float
    lap_std: float
    lap_min: float
    lap_max: float
    speed_avg: float
    speed_std: float
    speed_min: float
    speed_max: float
    path_avg: float
    path_std: float
    path_min: float
    path_max: float
    crashes: int
    gate_misses: int


def lap_statistics(laps: list[LapRecord]) -> LapStats:
    """Aggregate per-lap metrics (population std)."""
    if not laps:
        raise NoLapsError("no completed laps to analyze")
    lt = np.array([l.lap_time for l in laps])
    ts = np.array([l.top_speed for l in laps])
    pl = np.array([l.path_length for l in laps])
    return LapStats(
        n_laps=len(laps),
        lap_avg=float(lt.mean()),
        lap_std=float(lt.std()),
        lap_min=float(lt.min()),
        lap_max=float(lt.max()),
        speed_avg=float(ts.mean()),
        speed_std=float(ts.std()),
        speed_min=float(ts.min()),
        speed_max=float(ts.max()),
        path_avg=float(pl.mean()),
        path_std=float(pl.std()),
        path_min=float(pl.min()),
        path_max=float(pl.max()),
        crashes=sum(1 for l in laps if l.crash),
        gate_misses=sum(l.gate_misses for l in laps),
    )


def load_laps_csv(path) -> list[LapRecord]:
    laps = []
    with open(path) as f:
        for row in csv.DictReader(f):
            laps.append(
                LapRecord(
                    lap=int(row["lap"]),
                    lap_time=float(row["lap_time"]),
                    sector_times=[],
                    top_speed=float(row["top_speed"]),
                    path_length=float(row["path_length"]),
                    gate_misses=int(row["gate_misses"]),
                    crash=bool(int(row["crash"])),
                )
            )
    return laps


def load_sectors_csv(path) -> dict[int, list[float]]:
    """lap -> ordered sector times."""
    out: dict[int, list[float]] = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            out.setdefault(int(row["lap"]), []).append(float(row["time"]))
    return out


def summary_table(stats_by_run: dict[str, LapStats]) -> str:
    """Human-readable table, one row per run."""
    hdr = (
        f"{'run':<14} {'laps':>4} | {'lap avg':>8} {'std':>6} {'min':>7} {'max':>7} | "
        f"{'top spd':>7} {'std':>5} | {'path avg':>8} {'std':>5} | {'miss':>4} {'crash':>5}"
    )
    lines = [hdr, "-" * len(hdr)]
    for name, s in stats_by_run.items():
        lines.append(
            f"{name:<14} {s.n_laps:>4} | {s.lap_avg:>8.3f} {s.lap_std:>6.3f} "
            f"{s.lap_min:>7.3f} {s.lap_max:>7.3f} | {s.speed_avg:>7.2f} {s.speed_std:>5.2f} | "
            f"{s.path_avg:>8.2f} {s.path_std:>5.2f} | {s.gate_misses:>4} {s.crashes:>5}"
        )
    return "\n".join(lines)


def analyze_dir(out_dir, sectors: bool = False) -> tuple[LapStats, str]:
    """Analyze one run directory written by the harness."""
    laps_path = os.path.join(out_dir, "laps.csv")
    laps = load_laps_csv(laps_path)
    if not laps:
        raise NoLapsError(f"{laps_path} holds no laps")
    if sectors:
        sec = load_sectors_csv(os.path.join(out_dir, "sectors.csv"))
        for lap, times in sec.items():
            rec = next((l for l in laps if l.lap == lap), None)
            if rec is not None:
                rec.sector_times[:] = times
    stats = lap_statistics(laps)
    table = summary_table({os.path.basename(os.path.normpath(out_dir)): stats})
    return stats, table


def export_sector_distribution(out_dir, dest_path) -> None:
    """Plot-ready CSV: one row per (sector, lap) observation."""
    sec = load_sectors_csv(os.path.join(out_dir, "sectors.csv"))
    with open(dest_path, "w", newline="\n") as f:
        f.write("sector,lap,time\n")
        for lap in sorted(sec):
            for si, t in enumerate(sec[lap]):
                f.write(f"{si},{lap},{t!r}\n")


DEFAULT_COLUMNS = {
    "t": "t",
    "px": "px",
    "py": "py",
    "pz": "pz",
}


def _read_csv_columns(path, colmap):
    with open(path) as f:
        reader = csv.DictReader(f)
        rows = [[float(r[colmap[k]]) for k in ("t", "px", "py", "pz")] for r in reader]
    return np.array(rows)


def estimator_error_report(
    state_log_path, est_log_path, column_map_path=None
) -> dict[str, float]:
    """Per-axis RMSE and max error of the estimate against the true
    state log, matched on timestamps.

    A JSON column-mapping file ({t, px, py, pz} -> column names) lets
    this run on externally produced logs.
    """
    colmap = dict(DEFAULT_COLUMNS)
    if column_map_path:
        with open(column_map_path) as f:
            colmap.update(json.load(f))
    truth = _read_csv_columns(state_log_path, DEFAULT_COLUMNS)
    est = _read_csv_columns(est_log_path, colmap)
    if len(truth) == 0 or len(est) == 0:
        raise NoLapsError("empty log")
    idx = np.searchsorted(est[:, 0], truth[:, 0])
    idx = np.clip(idx, 0, len(est) - 1)
    matched = np.abs(est[idx, 0] - truth[:, 0]) < 0.01
    if not matched.any():
        raise ValueError("no matching timestamps between logs")
    d = est[idx][matched, 1:4] - truth[matched, 1:4]
    report = {}
    for i, ax in enumerate("xyz"):
        report[f"rmse_{ax}"] = float(np.sqrt(np.mean(d[:, i] ** 2)))
        report[f"max_{ax}"] = float(np.abs(d[:, i]).max())
    report["rmse_3d"] = float(np.sqrt(np.mean(np.sum(d**2, axis=1))))
    return report
