"""Command-line interface.

Subcommands:
    sim       run a closed-loop race and write logs
    gen-traj  generate a reference trajectory for a track
    calib-R   Monte-Carlo PnP measurement covariance for a canonical view
    analyze   summarize one or more run directories
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np


def _cmd_sim(args) -> int:
    from .harness import RaceConfig, run_race

    if args.config:
        cfg = RaceConfig.from_json(args.config)
    else:
        cfg = RaceConfig()
    overrides = {}
    if args.track:
        overrides["track"] = args.track
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.laps is not None:
        overrides["laps"] = args.laps
    if args.mode:
        overrides["mode"] = args.mode
    if args.out:
        overrides["out_dir"] = args.out
    if args.trajectory:
        overrides["trajectory_file"] = args.trajectory
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    res = run_race(cfg)
    n = len(res.laps)
    print(
        f"mode={cfg.mode} seed={cfg.seed}: {n} lap(s), "
        f"{res.total_misses} miss(es), crashed={res.crashed}, "
        f"timed_out={res.timed_out}, sim time {res.sim_time:.2f} s"
    )
    for lr in res.laps:
        print(
            f"  lap {lr.lap}: {lr.lap_time:.3f} s  top {lr.top_speed:.2f} m/s  "
            f"path {lr.path_length:.2f} m"
        )
    if cfg.out_dir and res.laps:
        from .analysis import lap_statistics, summary_table

        stats = lap_statistics(res.laps)
        table = summary_table({f"{cfg.mode}-seed{cfg.seed}": stats})
        with open(os.path.join(cfg.out_dir, "summary.txt"), "w") as f:
            f.write(table + "\n")
        print(table)
    return 0 if (res.laps and not res.crashed and not res.timed_out) else 1


def _cmd_gen_traj(args) -> int:
    from .gates import GateMap, bundled_track
    from .trajectory import generate_for_track, save_trajectory
    from .quad import GRAVITY

    if os.path.exists(args.track):
        track = GateMap.from_json(args.track)
    else:
        track = bundled_track(args.track)
    traj = generate_for_track(track, twr_gen=args.twr)
    save_trajectory(traj, args.out)
    print(
        f"{args.out}: lap {traj.lap_time:.2f} s, {len(traj.t)} samples, "
        f"peak |a - g| = {traj.max_thrust_accel() / GRAVITY:.2f} g "
        f"(cap {args.twr:.2f} g)"
    )
    if args.waypoints:
        from .trajectory import place_waypoints

        wps = place_waypoints(track)
        with open(args.waypoints, "w") as f:
            json.dump(
                [
                    {
                        "gate_id": w.gate_id,
                        "side": w.side,
                        "position": list(map(float, w.position)),
                    }
                    for w in wps
                ],
                f,
                indent=2,
            )
        print(f"waypoints -> {args.waypoints}")
    return 0


def _cmd_calib_r(args) -> int:
    from .camera import FisheyeIntrinsics
    from .gates import Gate
    from .geom import Pose, quat_from_matrix
    from .vision import estimate_R_montecarlo

    K = (
        FisheyeIntrinsics.from_json(args.camera)
        if args.camera
        else FisheyeIntrinsics.default()
    )
    gate = Gate(0, np.array([args.gate_dist, 0.0, 1.5]), 0.0)
    # camera facing the gate head-on: optical axis along world +x
    R_wc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    cam = Pose(quat_from_matrix(R_wc), np.array([0.0, 0.0, 1.5]))
    rng = np.random.default_rng(args.seed)
    R = estimate_R_montecarlo(gate, cam, K, args.sigma_px, args.n, rng)
    print(
        f"Monte-Carlo measurement covariance, gate at {args.gate_dist} m, "
        f"sigma {args.sigma_px} px, {args.n} samples:"
    )
    for row in R:
        print("  [" + "  ".join(f"{v: .3e}" for v in row) + "]")
    sd = np.sqrt(np.diag(R))
    print("per-axis std [m]:", " ".join(f"{v:.4f}" for v in sd))
    return 0


def _cmd_analyze(args) -> int:
    from .analysis import (
        analyze_dir,
        estimator_error_report,
        export_sector_distribution,
        lap_statistics,
        load_laps_csv,
        summary_table,
    )

    stats_by_run = {}
    all_laps = []
    for d in args.dirs:
        laps = load_laps_csv(os.path.join(d, "laps.csv"))
        if not laps:
            print(f"{d}: no laps", file=sys.stderr)
            continue
        name = os.path.basename(os.path.normpath(d))
        stats_by_run[name] = lap_statistics(laps)
        all_laps.extend(laps)
    if not stats_by_run:
        print("no laps found", file=sys.stderr)
        return 1
    if len(stats_by_run) > 1:
        stats_by_run["combined"] = lap_statistics(all_laps)
    print(summary_table(stats_by_run))
    if args.sectors:
        for d in args.dirs:
            dest = os.path.join(d, "sector_distribution.csv")
            export_sector_distribution(d, dest)
            print(f"sector distribution -> {dest}")
    if args.est_error:
        for d in args.dirs:
            rep = estimator_error_report(
                os.path.join(d, "state_log.csv"),
                os.path.join(d, "est_log.csv"),
                args.column_map,
            )
            print(
                f"{d}: est-vs-truth RMSE "
                + " ".join(f"{k}={v:.4f}" for k, v in rep.items())
            )
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="gatesim",
        description="Vision-based drone-racing simulator: gate-relative PnP, "
        "VIO drift correction, EKF fusion, receding-horizon control.",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("sim", help="run a closed-loop race")
    p.add_argument("--config", help="race config JSON")
    p.add_argument("--track", help="bundled track name or track JSON path")
    p.add_argument("--trajectory", help="reference trajectory CSV (default: generate)")
    p.add_argument("--seed", type=int)
    p.add_argument("--laps", type=int)
    p.add_argument("--mode", choices=["vio", "mocap", "ablate-kf"])
    p.add_argument("--out", help="output directory for logs")
    p.set_defaults(func=_cmd_sim)

    p = sub.add_parser("gen-traj", help="generate a reference trajectory")
    p.add_argument("--track", required=True, help="bundled track name or JSON path")
    p.add_argument("--twr", type=float, default=3.8, help="feasibility TWR cap")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--waypoints", help="optional waypoint JSON dump")
    p.set_defaults(func=_cmd_gen_traj)

    p = sub.add_parser("calib-R", help="Monte-Carlo PnP covariance estimate")
    p.add_argument("--gate-dist", type=float, default=3.0)
    p.add_argument("--sigma-px", type=float, default=1.0)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--camera", help="intrinsics JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_calib_r)

    p = sub.add_parser("analyze", help="summarize run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--sectors", action="store_true", help="export sector distributions")
    p.add_argument("--est-error", action="store_true", help="estimator-vs-truth report")
    p.add_argument("--column-map", help="JSON column mapping for external logs")
    p.set_defaults(func=_cmd_analyze)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
