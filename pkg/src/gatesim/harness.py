"""Deterministic closed-loop race harness.

One run is a single-threaded fixed-timestep loop at the physics rate.
Sensors, vision, filters, and the controller fire on integer tick
sub-multiples, and at equal timestamps the phase order is fixed:
physics < sensors < vision < filters < controller.  All randomness
comes from child generators spawned from the run seed, so identical
config + seed reproduces byte-identical logs.

Modes:
- ``vio``: full pipeline (gate detections -> PnP -> drift KF -> EKF).
- ``mocap``: external-tracking baseline; near-perfect state replaces
  the estimator in the same controller path.
- ``ablate-kf``: VIO drift correction disabled (EKF consumes raw VIO).

A standing start 0.5 m before gate 1 plus a reference-clock ramp make
the first gate-1 crossing begin an untimed out-lap; timed laps are the
subsequent gate-1-plane crossings.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import FisheyeIntrinsics
from .controller import Controller, ControllerConfig, PredictedState, predict_delay
from .drift_kf import (
    DriftKfConfig,
    DriftState,
    correct_vio,
    mahalanobis_gate,
    propagate as drift_propagate,
    update as drift_update,
)
from .ekf import EkfConfig, ErrorStateEkf, PoseMeasurement
from .gates import Gate, GateMap, OUTER_HALF_SIZE, bundled_track
from .geom import Pose, quat_from_matrix, yaw_of
from .quad import CtbrCommand, QuadParams, QuadSim, TrueState
from .sensors import (
    CameraTimer,
    DriftModel,
    ImuNoiseConfig,
    ImuSensor,
    MocapConfig,
    MocapSensor,
    VioSensor,
)
from .trajectory import ReferenceTrajectory, generate_for_track, load_trajectory
from .vision import detect_gates, estimate_R_montecarlo, implied_camera_world, solve_pnp

# camera mount: optical axis along body +x, image right along -y (body),
# image down along -z; no lever arm by default
R_BODY_CAM = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
T_BODY_CAM = Pose(quat_from_matrix(R_BODY_CAM), np.zeros(3))

MODES = ("vio", "mocap", "ablate-kf")


class ConfigError(ValueError):
    pass


class NoLapsError(ValueError):
    pass


@dataclass(frozen=True)
class RaceConfig:
    track: str = "ratm"
    trajectory_file: str | None = None
    seed: int = 0
    laps: int = 3
    mode: str = "vio"
    out_dir: str | None = None
    physics_rate: float = 1000.0
    imu_rate: float = 500.0
    vio_rate: float = 200.0
    camera_rate: float = 30.0
    control_rate: float = 100.0
    mocap_rate: float = 275.0
    quad: QuadParams = field(default_factory=QuadParams)
    imu_noise: ImuNoiseConfig = field(default_factory=ImuNoiseConfig)
    drift: DriftModel = field(default_factory=DriftModel)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    drift_kf: DriftKfConfig = field(default_factory=DriftKfConfig)
    camera: FisheyeIntrinsics = field(default_factory=FisheyeIntrinsics.default)
    mocap: MocapConfig = field(default_factory=MocapConfig)
    sigma_px: float = 0.5
    detection_dropout: float = 0.02
    detection_max_range: float = 14.0
    pnp_rms_gate_px: float = 3.0
    mc_samples: int = 100
    r_floor: float = 1e-6
    twr_gen: float = 3.8
    lap_timeout: float = 120.0
    ramp_duration: float = 2.5
    start_offset: float = 0.5
    floor_min: float = 0.1
    # x0,x1,y0,y1,z0,z1; None -> track metadata, else a 25 x 9.7 x 7 arena
    arena: tuple[float, float, float, float, float, float] | None = None
    predictor_enabled: bool = True
    stop_on_failure: bool = False
    log_decimation: int = 10

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.laps < 1:
            raise ConfigError("laps must be >= 1")
        for rate in (self.imu_rate, self.vio_rate, self.camera_rate, self.control_rate):
            if rate > self.physics_rate:
                raise ConfigError("sensor rates must not exceed the physics rate")

    @staticmethod
    def from_json(path) -> "RaceConfig":
        with open(path) as f:
            d = json.load(f)
        kwargs = {}
        plain = {
            "track": str,
            "trajectory_file": str,
            "seed": int,
            "laps": int,
            "mode": str,
            "out_dir": str,
            "physics_rate": float,
            "imu_rate": float,
            "vio_rate": float,
            "camera_rate": float,
            "control_rate": float,
            "mocap_rate": float,
            "sigma_px": float,
            "detection_dropout": float,
            "detection_max_range": float,
            "pnp_rms_gate_px": float,
            "mc_samples": int,
            "r_floor": float,
            "twr_gen": float,
            "lap_timeout": float,
            "ramp_duration": float,
            "start_offset": float,
            "floor_min": float,
            "predictor_enabled": bool,
            "stop_on_failure": bool,
            "log_decimation": int,
        }
        for key, cast in plain.items():
            if key in d and d[key] is not None:
                kwargs[key] = cast(d[key])
        if "arena" in d:
            kwargs["arena"] = tuple(float(x) for x in d["arena"])
        nested = {
            "quad": QuadParams,
            "imu_noise": ImuNoiseConfig,
            "drift": DriftModel,
            "ekf": EkfConfig,
            "controller": ControllerConfig,
            "drift_kf": DriftKfConfig,
            "mocap": MocapConfig,
        }
        for key, cls in nested.items():
            if key in d and d[key] is not None:
                sub = dict(d[key])
                for k, v in list(sub.items()):
                    if isinstance(v, list):
                        sub[k] = tuple(v)
                kwargs[key] = cls(**sub)
        if "camera" in d and d["camera"] is not None:
            cam = dict(d["camera"])
            cam["k"] = tuple(cam["k"])
            kwargs["camera"] = FisheyeIntrinsics(**cam)
        return RaceConfig(**kwargs)


@dataclass
class LapRecord:
    lap: int
    lap_time: float
    sector_times: list[float]
    top_speed: float
    path_length: float
    gate_misses: int
    crash: bool


@dataclass
class RaceResult:
    config: RaceConfig
    laps: list[LapRecord]
    events: list[tuple[float, str, int, int, str]]
    crashed: bool
    timed_out: bool
    total_misses: int
    sim_time: float
    state_log: np.ndarray  # t, q(4), p(3), v(3), omega(3), cmd(4), ref_p(3)
    est_log: np.ndarray  # t, q(4), p(3), v(3)

    def tracking_rmse(self, t_min: float = 0.0) -> float:
        """Position RMSE of the true path against the commanded reference."""
        log = self.state_log
        m = log[:, 0] >= t_min
        d = log[m, 5:8] - log[m, 18:21]
        return float(np.sqrt(np.mean(np.sum(d**2, axis=1))))

    @property
    def success(self) -> bool:
        return (
            not self.crashed
            and not self.timed_out
            and self.total_misses == 0
            and len(self.laps) == self.config.laps
        )


def detect_gate_pass(prev_p, cur_p, gate: Gate):
    """Classify a single physics-tick segment against one gate.

    Returns "pass" for a race-direction crossing inside the inner
    opening, "miss" for any crossing that strikes the frame band
    (inner..outer square, either direction; implies a crash), and
    "none" otherwise.
    """
    prev_p = np.asarray(prev_p, dtype=float)
    cur_p = np.asarray(cur_p, dtype=float)
    n = gate.normal
    d0 = float(n @ (prev_p - gate.center))
    d1 = float(n @ (cur_p - gate.center))
    forward = d0 < 0.0 <= d1
    backward = d0 > 0.0 >= d1
    if not (forward or backward):
        return "none"
    # crossing point on the gate plane
    w = d0 / (d0 - d1)
    x = prev_p + w * (cur_p - prev_p)
    rel = x - gate.center
    # gate frame: y = (-sin, cos, 0), z = world z
    y_loc = float(-np.sin(gate.yaw) * rel[0] + np.cos(gate.yaw) * rel[1])
    z_loc = float(rel[2])
    inside_inner = abs(y_loc) <= gate.half_size and abs(z_loc) <= gate.half_size
    inside_outer = abs(y_loc) <= OUTER_HALF_SIZE and abs(z_loc) <= OUTER_HALF_SIZE
    if inside_inner:
        return "pass" if forward else "none"
    if inside_outer:
        return "miss"
    return "none"


class _CommandBuffer:
    """Time-stamped command queue modeling the command application delay."""

    def __init__(self, initial: CtbrCommand):
        self._items: list[tuple[float, CtbrCommand]] = [(-1e9, initial)]
        self._idx = 0

    def push(self, t_apply: float, cmd: CtbrCommand) -> None:
        self._items.append((t_apply, cmd))

    def active(self, t: float) -> CtbrCommand:
        while (
            self._idx + 1 < len(self._items) and self._items[self._idx + 1][0] <= t
        ):
            self._idx += 1
        return self._items[self._idx][1]

    def recent(self, t_from: float):
        return [(ta, c) for ta, c in self._items if ta >= t_from - 0.5]


def _resolve_track(cfg: RaceConfig) -> GateMap:
    if os.path.exists(cfg.track):
        return GateMap.from_json(cfg.track)
    try:
        return bundled_track(cfg.track)
    except FileNotFoundError:
        raise ConfigError(f"unknown track {cfg.track!r}") from None


def _resolve_trajectory(cfg: RaceConfig, track: GateMap) -> ReferenceTrajectory:
    if cfg.trajectory_file:
        return load_trajectory(cfg.trajectory_file, twr_cap=cfg.twr_gen)
    return generate_for_track(track, twr_gen=cfg.twr_gen)


def run_race(cfg: RaceConfig) -> RaceResult:
    """Execute one closed-loop race; optionally write logs to cfg.out_dir."""
    cfg.validate()
    track = _resolve_track(cfg)
    traj = _resolve_trajectory(cfg, track)

    dt = 1.0 / cfg.physics_rate
    every_imu = round(cfg.physics_rate / cfg.imu_rate)
    every_vio = round(cfg.physics_rate / cfg.vio_rate)
    every_cam = round(cfg.physics_rate / cfg.camera_rate)
    every_ctrl = round(cfg.physics_rate / cfg.control_rate)
    every_mocap = max(1, round(cfg.physics_rate / cfg.mocap_rate))

    seeds = np.random.SeedSequence(cfg.seed).spawn(6)
    rng_imu = np.random.default_rng(seeds[0])
    rng_vio = np.random.default_rng(seeds[1])
    rng_cam = np.random.default_rng(seeds[2])
    rng_det = np.random.default_rng(seeds[3])
    rng_mc = np.random.default_rng(seeds[4])
    rng_mocap = np.random.default_rng(seeds[5])

    gate0 = track[0]
    start_p = gate0.center - cfg.start_offset * gate0.normal
    start_state = TrueState.hover(cfg.quad, p=start_p, yaw=gate0.yaw)
    sim = QuadSim(cfg.quad, start_state)

    imu_sensor = ImuSensor(cfg.imu_noise, rng_imu)
    vio_sensor = VioSensor(cfg.drift, rng_vio)
    cam_timer = CameraTimer(rng_cam)
    mocap_sensor = MocapSensor(cfg.mocap, rng_mocap)

    use_vision = cfg.mode == "vio"
    use_estimator = cfg.mode in ("vio", "ablate-kf")

    ekf: ErrorStateEkf | None = None
    drift_state = DriftState()
    # process noise for the drift filter: Q per frame is dt^4/4 * sigma_a2;
    # for the filter to stay consistent it must at least cover the drift
    # model's diffusion sigma_rw^2 * dt per frame (x2 margin)
    dt_cam = round(cfg.physics_rate / cfg.camera_rate) / cfg.physics_rate
    if cfg.drift_kf.auto_q:
        sigma_a2 = max(
            cfg.drift_kf.sigma_a2, 8.0 * cfg.drift.sigma_rw**2 / dt_cam**3
        )
    else:
        sigma_a2 = cfg.drift_kf.sigma_a2
    controller = Controller(cfg.controller, cfg.quad, traj)
    cmd_buffer = _CommandBuffer(CtbrCommand.hover(cfg.quad))
    delay = cfg.controller.delay

    # reference clock: phase of the closest trajectory point, ramped in
    ref_time = float(traj.t[int(np.argmin(np.linalg.norm(traj.p - start_p, axis=1)))])

    # camera frames waiting for their detection latency to elapse
    pending_frames: list[tuple[float, object, list]] = []

    gate_order = list(range(len(track)))
    next_gate = 0
    lap_gate_pass_times: list[float] = []
    lap_start: float | None = None
    lap_index = 0  # 0 = out-lap
    lap_top_speed = 0.0
    lap_path = 0.0
    lap_misses = 0
    total_misses = 0
    events: list[tuple[float, str, int, int, str]] = []
    laps: list[LapRecord] = []
    crashed = False
    timed_out = False

    state_rows: list[list[float]] = []
    est_rows: list[list[float]] = []

    ctrl_feed = None  # latest (t, q, p, v) available to the controller
    arena = cfg.arena or track.arena or (-12.5, 12.5, -4.85, 4.85, 0.0, 7.0)
    max_ticks = int(
        (cfg.ramp_duration + (cfg.laps + 2) * cfg.lap_timeout) * cfg.physics_rate
    )
    lap_clock_start = 0.0

    k = 0
    t = 0.0
    while k < max_ticks:
        k += 1
        t = k * dt
        prev_state = sim.state
        applied = cmd_buffer.active(t - dt)
        state = sim.step(applied, dt)
        a_world = (state.v - prev_state.v) / dt

        # --- crash / gate geometry on the true path ---
        if state.p[2] < cfg.floor_min:
            crashed = True
            events.append((t, "crash_floor", -1, lap_index, f"z={state.p[2]:.3f}"))
        if not (
            arena[0] <= state.p[0] <= arena[1]
            and arena[2] <= state.p[1] <= arena[3]
            and state.p[2] <= arena[5]
        ):
            crashed = True
            events.append((t, "crash_bounds", -1, lap_index, ""))
        for gi, gate in enumerate(track):
            res = detect_gate_pass(prev_state.p, state.p, gate)
            if res == "none":
                continue
            if res == "miss":
                crashed = True
                total_misses += 1
                lap_misses += 1
                events.append((t, "gate_frame_hit", gate.id, lap_index, ""))
                continue
            # pass
            if gi != next_gate:
                continue  # harmless fly-through out of sequence
            events.append((t, "gate_pass", gate.id, lap_index, ""))
            if gi == 0:
                if lap_start is not None and lap_index >= 2:
                    # close the current timed lap (lap_index 1 is the
                    # untimed standing-start out-lap)
                    sectors = [
                        t1 - t0
                        for t0, t1 in zip(
                            lap_gate_pass_times, lap_gate_pass_times[1:] + [t]
                        )
                    ]
                    laps.append(
                        LapRecord(
                            lap=lap_index - 1,
                            lap_time=t - lap_start,
                            sector_times=sectors,
                            top_speed=lap_top_speed,
                            path_length=lap_path,
                            gate_misses=lap_misses,
                            crash=False,
                        )
                    )
                lap_index += 1
                lap_start = t
                lap_clock_start = t
                lap_gate_pass_times = [t]
                lap_top_speed = 0.0
                lap_path = 0.0
                lap_misses = 0
            else:
                lap_gate_pass_times.append(t)
            next_gate = (gi + 1) % len(gate_order)
        # miss-by-flying-wide: crossed the expected gate's plane in race
        # direction near the gate but outside the outer frame
        if not crashed:
            g = track[next_gate]
            d0 = float(g.normal @ (prev_state.p - g.center))
            d1 = float(g.normal @ (state.p - g.center))
            if d0 < 0.0 <= d1:
                w = d0 / (d0 - d1)
                x = prev_state.p + w * (state.p - prev_state.p)
                rel = x - g.center
                y_loc = float(-np.sin(g.yaw) * rel[0] + np.cos(g.yaw) * rel[1])
                z_loc = float(rel[2])
                off = max(abs(y_loc), abs(z_loc))
                if OUTER_HALF_SIZE < off <= 2.2:
                    total_misses += 1
                    lap_misses += 1
                    events.append((t, "gate_missed_wide", g.id, lap_index, ""))

        lap_top_speed = max(lap_top_speed, float(np.linalg.norm(state.v)))
        lap_path += float(np.linalg.norm(state.p - prev_state.p))

        if crashed or (cfg.stop_on_failure and total_misses > 0):
            if lap_index >= 2 and lap_start is not None:
                laps.append(
                    LapRecord(
                        lap=lap_index - 1,
                        lap_time=t - lap_start,
                        sector_times=[],
                        top_speed=lap_top_speed,
                        path_length=lap_path,
                        gate_misses=lap_misses,
                        crash=crashed,
                    )
                )
            break

        # --- sensors ---
        if use_estimator and k % every_imu == 0:
            imu = imu_sensor.sample(state, a_world)
        else:
            imu = None
        vio = None
        if use_estimator and k % every_vio == 0:
            vio = vio_sensor.sample(state)
        if use_vision and k % every_cam == 0:
            vio_sync = vio_sensor.sample(state)
            frame = cam_timer.make_event(vio_sync)
            cam_pose = Pose(state.q, state.p).compose(T_BODY_CAM)
            dets = detect_gates(
                cam_pose,
                track,
                cfg.camera,
                sigma_px=cfg.sigma_px,
                dropout=cfg.detection_dropout,
                rng=rng_det,
                max_range=cfg.detection_max_range,
            )
            pending_frames.append((frame.t_available, frame, dets))
        if cfg.mode == "mocap" and k % every_mocap == 0:
            ms = mocap_sensor.sample(state)
            ctrl_feed = (ms.t, ms.q, ms.p, ms.v)
            est_rows.append([ms.t, *ms.q, *ms.p, *ms.v])

        # --- vision -> drift KF (at detection availability) ---
        if use_vision and pending_frames and pending_frames[0][0] <= t:
            ready = [f for f in pending_frames if f[0] <= t]
            pending_frames = [f for f in pending_frames if f[0] > t]
            for t_avail, frame, dets in ready:
                drift_state = drift_propagate(
                    drift_state, t_avail - drift_state.t, sigma_a2
                )
                if not dets:
                    continue
                vio_sync = frame.vio
                corrected_sync = correct_vio(vio_sync, drift_state)
                z_list, R_list = [], []
                for det in dets:
                    gate = track.by_id(det.gate_id)
                    try:
                        meas = solve_pnp(det, gate, cfg.camera, t=frame.t_capture)
                    except Exception:
                        continue
                    if meas.reproj_rms_px > cfg.pnp_rms_gate_px:
                        continue
                    cam_w = implied_camera_world(meas, gate)
                    body_w = cam_w.compose(T_BODY_CAM.inverse())
                    dyaw = abs(yaw_of(body_w.q) - yaw_of(corrected_sync.q))
                    dyaw = min(dyaw, 2 * np.pi - dyaw)
                    if np.degrees(dyaw) > cfg.drift_kf.yaw_gate_deg:
                        continue
                    z = vio_sync.p - body_w.t
                    try:
                        R = estimate_R_montecarlo(
                            gate,
                            cam_w,
                            cfg.camera,
                            cfg.sigma_px,
                            n_samples=cfg.mc_samples,
                            rng=rng_mc,
                            pixels=det.pixels,
                        )
                    except Exception:
                        continue
                    R = R + cfg.r_floor * np.eye(3)
                    if cfg.drift_kf.gating and not mahalanobis_gate(
                        drift_state, z, R, cfg.drift_kf.gate_chi2_p
                    ):
                        continue
                    z_list.append(z)
                    R_list.append(R)
                if z_list:
                    drift_state = drift_update(drift_state, z_list, R_list)

        # --- filters ---
        if use_estimator and imu is not None:
            if ekf is not None:
                ekf.propagate(imu)
                s = ekf.state
                est_rows.append([s.t, *s.q, *s.p, *s.v])
        if use_estimator and vio is not None:
            corrected = correct_vio(vio, drift_state if use_vision else DriftState())
            if ekf is None:
                ekf = ErrorStateEkf.init_from_pose(
                    cfg.ekf, corrected.t, corrected.q, corrected.p, corrected.v
                )
            else:
                m = PoseMeasurement(
                    corrected.t, corrected.q, corrected.p, cfg.ekf.meas_R_diag
                )
                ekf.update(m)
            s = ekf.state
            ctrl_feed = (s.t, s.q.copy(), s.p.copy(), s.v.copy())

        # --- controller ---
        if k % every_ctrl == 0 and ctrl_feed is not None:
            ramp = min(1.0, t / cfg.ramp_duration) if cfg.ramp_duration > 0 else 1.0
            ft, fq, fp, fv = ctrl_feed
            if cfg.predictor_enabled and delay > 0:
                pred = predict_delay(
                    t, fq, fp, fv, cmd_buffer.recent(t - 0.2), delay, cfg.quad.mass
                )
            else:
                pred = PredictedState(t, fq.copy(), fp.copy(), fv.copy())
            solve_ref_time = ref_time + ramp * delay
            try:
                cmd = controller.solve(pred, solve_ref_time, time_scale=ramp)
            except Exception:
                cmd = cmd_buffer.active(t)
            cmd_buffer.push(t + delay, cmd)

        ref_time += (min(1.0, t / cfg.ramp_duration) if cfg.ramp_duration > 0 else 1.0) * dt

        # --- logging ---
        if k % cfg.log_decimation == 0:
            c = cmd_buffer.active(t)
            _, p_ref, _, _, _ = traj.sample(ref_time)
            state_rows.append(
                [
                    t,
                    *state.q,
                    *state.p,
                    *state.v,
                    *state.omega,
                    c.collective,
                    *c.rates,
                    *p_ref,
                ]
            )

        # --- termination ---
        if len(laps) >= cfg.laps:
            break
        if t - lap_clock_start > cfg.lap_timeout:
            timed_out = True
            events.append((t, "timeout", -1, lap_index, ""))
            break

    result = RaceResult(
        config=cfg,
        laps=laps,
        events=events,
        crashed=crashed,
        timed_out=timed_out,
        total_misses=total_misses,
        sim_time=t,
        state_log=np.array(state_rows) if state_rows else np.zeros((0, 21)),
        est_log=np.array(est_rows) if est_rows else np.zeros((0, 11)),
    )
    if cfg.out_dir:
        write_logs(result, cfg.out_dir)
    return result


def _fmt_row(values) -> str:
    return ",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in values)


def write_logs(result: RaceResult, out_dir) -> None:
    """Write laps.csv, sectors.csv, state_log.csv, est_log.csv, events.csv."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "laps.csv"), "w", newline="\n") as f:
        f.write("lap,lap_time,top_speed,path_length,gate_misses,crash\n")
        for lr in result.laps:
            f.write(
                _fmt_row(
                    [
                        lr.lap,
                        lr.lap_time,
                        lr.top_speed,
                        lr.path_length,
                        lr.gate_misses,
                        int(lr.crash),
                    ]
                )
                + "\n"
            )
    with open(os.path.join(out_dir, "sectors.csv"), "w", newline="\n") as f:
        f.write("lap,sector,time\n")
        for lr in result.laps:
            for si, st in enumerate(lr.sector_times):
                f.write(_fmt_row([lr.lap, si, st]) + "\n")
    with open(os.path.join(out_dir, "state_log.csv"), "w", newline="\n") as f:
        f.write(
            "t,qw,qx,qy,qz,px,py,pz,vx,vy,vz,wx,wy,wz,"
            "cmd_c,cmd_wx,cmd_wy,cmd_wz,ref_px,ref_py,ref_pz\n"
        )
        for row in result.state_log:
            f.write(_fmt_row(row) + "\n")
    with open(os.path.join(out_dir, "est_log.csv"), "w", newline="\n") as f:
        f.write("t,qw,qx,qy,qz,px,py,pz,vx,vy,vz\n")
        for row in result.est_log:
            f.write(_fmt_row(row) + "\n")
    with open(os.path.join(out_dir, "events.csv"), "w", newline="\n") as f:
        f.write("t,event,gate_id,lap,info\n")
        for ev in result.events:
            f.write(_fmt_row(list(ev)) + "\n")
