"""Waypoints, reference trajectories, and the surrogate generator.

Waypoints come in pairs straddling each gate along its normal: -0.4 m
before and +0.4 m after (+1.25 m after for Split-S gates), centered on
the gate in y and z.  The surrogate generator threads a closed
minimum-snap spline (degree-7 segments, continuous through jerk)
through the waypoints and bisects a global time scale until the peak
thrust-equivalent acceleration ||a - g|| reaches 95% of the feasibility
cap TWR_gen * g.  It stands in for a full time-optimal solver; the
loader accepts externally generated trajectory files in the same CSV
format and enforces the same feasibility cap.

CSV format (fixed 100 Hz): header ``t,qw,qx,qy,qz,px,py,pz,vx,vy,vz``,
floats written with repr precision so a load/save round trip is
bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gates import GateMap
from .geom import (
    quat_conj,
    quat_from_matrix,
    quat_mult,
    quat_normalize,
    quat_to_rotvec,
)
from .quad import GRAVITY

G_VEC = np.array([0.0, 0.0, -GRAVITY])

PRE_OFFSET = 0.4
POST_OFFSET = 0.4
POST_OFFSET_SPLIT_S = 1.25

CSV_HEADER = "t,qw,qx,qy,qz,px,py,pz,vx,vy,vz"
CSV_DT = 0.01


class ParseError(ValueError):
    """Malformed trajectory file."""


class InfeasibleTrajectoryError(ValueError):
    """Trajectory exceeds the feasibility acceleration cap."""


class InfeasibleWaypointsError(ValueError):
    """Waypoints too close together to thread a spline through."""


class NoConvergenceError(RuntimeError):
    """Time-scale bisection failed to converge."""


@dataclass(frozen=True)
class Waypoint:
    position: np.ndarray
    gate_id: int
    side: str  # "pre" | "post"


def place_waypoints(gate_map: GateMap, split_s_ids=None) -> list[Waypoint]:
    """Two waypoints per gate on its normal line, race order.

    The displacement is defined in gate frame and rotated into world by
    the gate yaw; y and z stay centered on the gate.
    """
    if len(gate_map) == 0:
        raise ValueError("empty gate map")
    if split_s_ids is None:
        split_s_ids = gate_map.split_s_ids
    split_s_ids = set(split_s_ids)
    out = []
    for gate in gate_map:
        c, s = np.cos(gate.yaw), np.sin(gate.yaw)
        post = POST_OFFSET_SPLIT_S if gate.id in split_s_ids else POST_OFFSET
        for d, side in ((-PRE_OFFSET, "pre"), (post, "post")):
            pos = np.array(
                [gate.center[0] + d * c, gate.center[1] + d * s, gate.center[2]]
            )
            out.append(Waypoint(pos, gate.id, side))
    return out


@dataclass
class ReferenceTrajectory:
    """Uniformly sampled reference [t, q, p, v].

    Closed-lap trajectories include the closing sample: the last row
    duplicates the first at t = lap_time, so the lap time equals the
    final timestamp.
    """

    t: np.ndarray  # (N,)
    q: np.ndarray  # (N, 4)
    p: np.ndarray  # (N, 3)
    v: np.ndarray  # (N, 3)
    lap_time: float
    _a: np.ndarray | None = field(default=None, repr=False)
    _omega: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.t)
        if n < 2:
            raise ValueError("trajectory needs at least 2 samples")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def accel(self) -> np.ndarray:
        """Numerical acceleration from stored velocity."""
        if self._a is None:
            self._a = np.gradient(self.v, self.dt, axis=0)
        return self._a

    def body_rates(self) -> np.ndarray:
        """Reference body rates from the attitude sequence."""
        if self._omega is None:
            n = len(self.t)
            om = np.empty((n, 3))
            dt = self.dt
            for k in range(n - 1):
                om[k] = quat_to_rotvec(quat_mult(quat_conj(self.q[k]), self.q[k + 1])) / dt
            om[n - 1] = om[n - 2]
            self._omega = om
        return self._omega

    def sample(self, t: float):
        """Linear interpolation at lap-wrapped time t -> (q, p, v, a, omega)."""
        tau = (t - self.t[0]) % self.lap_time
        x = tau / self.dt
        i = min(int(x), len(self.t) - 2)
        j = i + 1
        w = x - i
        p = (1 - w) * self.p[i] + w * self.p[j]
        v = (1 - w) * self.v[i] + w * self.v[j]
        a = (1 - w) * self.accel()[i] + w * self.accel()[j]
        om = (1 - w) * self.body_rates()[i] + w * self.body_rates()[j]
        qa, qb = self.q[i], self.q[j]
        if float(qa @ qb) < 0.0:
            qb = -qb
        q = quat_normalize((1 - w) * qa + w * qb)
        return q, p, v, a, om

    def max_accel(self) -> float:
        return float(np.linalg.norm(self.accel(), axis=1).max())

    def max_thrust_accel(self) -> float:
        return float(np.linalg.norm(self.accel() - G_VEC, axis=1).max())


def save_trajectory(traj: ReferenceTrajectory, path) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(CSV_HEADER + "\n")
        for k in range(len(traj.t)):
            row = [traj.t[k], *traj.q[k], *traj.p[k], *traj.v[k]]
            f.write(",".join(repr(float(x)) for x in row) + "\n")


def load_trajectory(path, twr_cap: float = 3.8) -> ReferenceTrajectory:
    """Load and validate a reference trajectory CSV.

    Raises ParseError (naming the offending row) for malformed content
    or non-uniform time, and InfeasibleTrajectoryError if the numerical
    acceleration exceeds twr_cap * g anywhere.
    """
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ParseError(f"unexpected header {header!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 11:
                raise ParseError(f"row {lineno}: expected 11 columns, got {len(parts)}")
            try:
                rows.append([float(x) for x in parts])
            except ValueError as e:
                raise ParseError(f"row {lineno}: {e}") from None
    if len(rows) < 2:
        raise ParseError("trajectory needs at least 2 samples")
    data = np.array(rows)
    t = data[:, 0]
    dts = np.diff(t)
    if np.any(dts <= 0):
        bad = int(np.argmax(dts <= 0)) + 2
        raise ParseError(f"row {bad + 1}: time not strictly increasing")
    if np.any(np.abs(dts - dts[0]) > 1e-9):
        bad = int(np.argmax(np.abs(dts - dts[0]) > 1e-9)) + 2
        raise ParseError(f"row {bad + 1}: non-uniform sample time")
    q = data[:, 1:5]
    norms = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(norms - 1.0) > 1e-6)) + 2
        raise ParseError(f"row {bad}: quaternion not unit norm")
    traj = ReferenceTrajectory(
        t=t,
        q=q,
        p=data[:, 5:8],
        v=data[:, 8:11],
        lap_time=float(t[-1] - t[0]),
    )
    a = traj.accel()
    a_norm = np.linalg.norm(a, axis=1)
    cap = twr_cap * GRAVITY + 0.5
    if a_norm.max() > cap:
        k = int(np.argmax(a_norm))
        raise InfeasibleTrajectoryError(
            f"sample {k} (t={t[k]:.3f}): |a|={a_norm[k]:.2f} m/s^2 exceeds "
            f"cap {cap:.2f} (TWR {twr_cap})"
        )
    vcheck = np.gradient(traj.p, traj.dt, axis=0)
    tol = 2.0 * traj.dt * twr_cap * GRAVITY
    err = np.linalg.norm(vcheck - traj.v, axis=1)
    if err.max() > tol:
        k = int(np.argmax(err))
        raise ParseError(
            f"sample {k}: stored velocity inconsistent with position "
            f"(|dp/dt - v| = {err[k]:.3f} > {tol:.3f})"
        )
    return traj


# ---------------------------------------------------------------------------
# minimum-snap closed-loop spline
# ---------------------------------------------------------------------------

_DEG = 7  # polynomial degree per segment


def _snap_cost_block(T: float) -> np.ndarray:
    Q = np.zeros((_DEG + 1, _DEG + 1))
    for a in range(4, _DEG + 1):
        ka = a * (a - 1) * (a - 2) * (a - 3)
        for b in range(4, _DEG + 1):
            kb = b * (b - 1) * (b - 2) * (b - 3)
            Q[a, b] = ka * kb / (a + b - 7)
    return Q / T**7


def _poly_deriv_row(s: float, order: int) -> np.ndarray:
    row = np.zeros(_DEG + 1)
    for k in range(order, _DEG + 1):
        c = 1.0
        for r in range(order):
            c *= k - r
        row[k] = c * s ** (k - order)
    return row


@dataclass
class _ClosedSpline:
    coeffs: np.ndarray  # (M, 8, 3) normalized-time coefficients
    times: np.ndarray  # (M,) segment durations

    @property
    def total_time(self) -> float:
        return float(self.times.sum())

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        tau = t % self.total_time
        edges = np.cumsum(self.times)
        i = int(np.searchsorted(edges, tau, side="right"))
        i = min(i, len(self.times) - 1)
        t0 = edges[i] - self.times[i]
        s = (tau - t0) / self.times[i]
        row = _poly_deriv_row(s, order)
        return (row @ self.coeffs[i]) / self.times[i] ** order


def _solve_min_snap(points: np.ndarray, times: np.ndarray) -> _ClosedSpline:
    """Closed-loop min-snap spline through points (M,3), C3 at joints."""
    M = len(points)
    nvar = (_DEG + 1) * M
    Q = np.zeros((nvar, nvar))
    for i in range(M):
        sl = slice(i * (_DEG + 1), (i + 1) * (_DEG + 1))
        Q[sl, sl] = _snap_cost_block(times[i])

    rows = []
    rhs_rows = []
    for i in range(M):
        j = (i + 1) % M
        # endpoint positions
        r = np.zeros(nvar)
        r[i * (_DEG + 1) : (i + 1) * (_DEG + 1)] = _poly_deriv_row(0.0, 0)
        rows.append(r)
        rhs_rows.append(points[i])
        r = np.zeros(nvar)
        r[i * (_DEG + 1) : (i + 1) * (_DEG + 1)] = _poly_deriv_row(1.0, 0)
        rows.append(r)
        rhs_rows.append(points[j])
        # C1..C3 continuity across the joint (including the wrap joint)
        for order in range(1, 4):
            r = np.zeros(nvar)
            r[i * (_DEG + 1) : (i + 1) * (_DEG + 1)] = (
                _poly_deriv_row(1.0, order) / times[i] ** order
            )
            r[j * (_DEG + 1) : (j + 1) * (_DEG + 1)] -= (
                _poly_deriv_row(0.0, order) / times[j] ** order
            )
            rows.append(r)
            rhs_rows.append(np.zeros(3))
    A = np.array(rows)
    b = np.array(rhs_rows)
    ncon = len(rows)
    KKT = np.zeros((nvar + ncon, nvar + ncon))
    KKT[:nvar, :nvar] = 2.0 * Q
    KKT[:nvar, nvar:] = A.T
    KKT[nvar:, :nvar] = A
    rhs = np.zeros((nvar + ncon, 3))
    rhs[nvar:] = b
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
    coeffs = sol[:nvar].reshape(M, _DEG + 1, 3)
    return _ClosedSpline(coeffs, times.copy())


def _attitude_from_flatness(a: np.ndarray, v: np.ndarray, yaw_rate_limit: float, dt: float):
    """Yaw follows the velocity direction (rate limited); body z follows
    the thrust direction.  Returns (N, 4) quaternions."""
    n = len(a)
    thrust = a - G_VEC
    psi_raw = np.arctan2(v[:, 1], v[:, 0])
    speed = np.linalg.norm(v[:, :2], axis=1)
    psi = np.unwrap(psi_raw)
    # hold heading through near-zero-speed patches
    for k in range(1, n):
        if speed[k] < 0.3:
            psi[k] = psi[k - 1]
    # rate limit
    for k in range(1, n):
        dpsi = np.clip(psi[k] - psi[k - 1], -yaw_rate_limit * dt, yaw_rate_limit * dt)
        psi[k] = psi[k - 1] + dpsi
    q = np.empty((n, 4))
    y_prev = None
    for k in range(n):
        zb = thrust[k] / np.linalg.norm(thrust[k])
        xc = np.array([np.cos(psi[k]), np.sin(psi[k]), 0.0])
        yb = np.cross(zb, xc)
        nyb = np.linalg.norm(yb)
        if nyb < 0.1 and y_prev is not None:
            yb = y_prev
        elif nyb < 1e-9:
            yb = np.array([0.0, 1.0, 0.0])
        else:
            yb = yb / nyb
        xb = np.cross(yb, zb)
        R = np.column_stack((xb, yb, zb))
        q[k] = quat_from_matrix(R)
        if k > 0 and float(q[k] @ q[k - 1]) < 0.0:
            q[k] = -q[k]
        y_prev = yb
    return q


def generate_surrogate(
    waypoints,
    twr_gen: float = 3.8,
    dt: float = CSV_DT,
    yaw_rate_limit: float = 6.0,
    target_fraction: float = 0.95,
    max_bisect: int = 80,
) -> ReferenceTrajectory:
    """Closed-loop min-snap trajectory through the waypoints in order.

    The global time scale is bisected until the peak ||a - g|| equals
    target_fraction * twr_gen * g within 1%; the plain acceleration
    norm is additionally kept under the loader's cap.
    """
    pts = np.array(
        [w.position if isinstance(w, Waypoint) else np.asarray(w, float) for w in waypoints]
    )
    if len(pts) < 2:
        raise InfeasibleWaypointsError("need at least 2 waypoints")
    seg = np.roll(pts, -1, axis=0) - pts
    dist = np.linalg.norm(seg, axis=1)
    if np.any(dist < 0.01):
        raise InfeasibleWaypointsError("waypoint spacing below 1 cm")
    # subdivide long hops with collinear points: keeps the spline near the
    # chord and the per-segment snap weights (1/T^7) commensurate
    max_seg = 2.5
    dense = []
    for i in range(len(pts)):
        dense.append(pts[i])
        n_sub = int(np.floor(dist[i] / max_seg))
        for k in range(1, n_sub + 1):
            frac = k / (n_sub + 1)
            dense.append(pts[i] + frac * seg[i])
    pts_d = np.array(dense)
    seg_d = np.roll(pts_d, -1, axis=0) - pts_d
    dist_d = np.linalg.norm(seg_d, axis=1)
    times = np.maximum(dist_d / 5.0, 0.05)
    spline = _solve_min_snap(pts_d, times)

    # dense acceleration profile in unscaled time; global scaling sigma
    # maps a -> a / sigma^2
    n_dense = 40 * len(pts)
    ts = np.linspace(0.0, spline.total_time, n_dense, endpoint=False)
    a_u = np.array([spline.eval(t, order=2) for t in ts])

    target = target_fraction * twr_gen * GRAVITY
    cap = twr_gen * GRAVITY

    def peak_thrust(sigma: float) -> float:
        return float(np.linalg.norm(a_u / sigma**2 - G_VEC, axis=1).max())

    def peak_acc(sigma: float) -> float:
        return float(np.linalg.norm(a_u / sigma**2, axis=1).max())

    lo, hi = 1e-3, 1.0
    while peak_thrust(lo) <= target and lo > 1e-9:
        lo *= 0.1
    for _ in range(200):
        if peak_thrust(hi) <= target:
            break
        hi *= 2.0
    else:
        raise NoConvergenceError("could not bracket the time scale")
    sigma = hi
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        if peak_thrust(mid) > target:
            lo = mid
        else:
            hi = mid
        sigma = hi
        if abs(peak_thrust(sigma) - target) <= 0.01 * target:
            break
    else:
        raise NoConvergenceError("time-scale bisection did not converge")
    # keep the plain acceleration norm under the loader's cap as well
    guard = 0
    while peak_acc(sigma) > cap and guard < 200:
        sigma *= 1.005
        guard += 1

    total = spline.total_time * sigma
    n = int(np.ceil(total / dt))
    sigma *= n * dt / total
    scaled = _ClosedSpline(spline.coeffs, spline.times * sigma)

    # grid includes the closing sample at t = lap_time
    tgrid = np.arange(n + 1) * dt
    lap = n * dt
    p = np.array([scaled.eval(min(t, lap), 0) for t in tgrid])
    v = np.array([scaled.eval(t % lap, 1) for t in tgrid])
    a = np.array([scaled.eval(t % lap, 2) for t in tgrid])
    p[-1] = p[0]
    v[-1] = v[0]
    a[-1] = a[0]
    q = _attitude_from_flatness(a, v, yaw_rate_limit, dt)
    return ReferenceTrajectory(t=tgrid, q=q, p=p, v=v, lap_time=float(lap))


def generate_for_track(
    gate_map: GateMap,
    twr_gen: float = 3.8,
    dt: float = CSV_DT,
    align_offset: float = 1.0,
) -> ReferenceTrajectory:
    """Waypoint placement + surrogate generation for a whole track.

    Besides the pre/post gate waypoints, shaping points are added
    ``align_offset`` meters further out along each gate normal so the
    spline approaches and exits every gate roughly perpendicular to its
    plane (a full dynamics-aware optimizer does this on its own).
    """
    wps = place_waypoints(gate_map)
    pts: list[np.ndarray] = []
    for w in wps:
        gate = gate_map.by_id(w.gate_id)
        n = gate.normal
        if w.side == "pre":
            pts.append(w.position - align_offset * n)
            pts.append(w.position)
        else:
            pts.append(w.position)
            pts.append(w.position + align_offset * n)
    # drop shaping points that crowd their neighbors
    kept: list[np.ndarray] = []
    for p in pts:
        if kept and np.linalg.norm(p - kept[-1]) < 0.3:
            continue
        kept.append(p)
    if np.linalg.norm(kept[0] - kept[-1]) < 0.3:
        kept = kept[:-1]
    return generate_surrogate(kept, twr_gen=twr_gen, dt=dt)
