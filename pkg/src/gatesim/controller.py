"""Receding-horizon CTBR tracking controller with delay compensation.

The solver is sequential linearization (iLQR): linearize the nominal
model around the current rollout, solve the structured LQ subproblem by
a backward Riccati pass, forward-roll with a line search, and repeat up
to a fixed outer-iteration budget, warm-started from the previous
solution.  The nominal model is rigid-body attitude kinematics driven
by the commanded body rates plus point-mass translation driven by
collective thrust (no drag).  Inputs are clamped to the thrust and rate
bounds inside every rollout, so the returned first input is feasible by
construction.

The state predictor compensates the command delay (solver compute, link
latency, actuation lag) by forward-integrating the point-mass model
through the still-in-flight commands before each solve.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass

import numpy as np

from ._accel import njit
from .geom import (
    quat_conj,
    quat_from_rotvec,
    quat_mult,
    quat_normalize,
    quat_to_rotvec,
    rot_matrix,
    skew,
    so3_right_jacobian,
)
from .quad import GRAVITY, CtbrCommand, QuadParams
from .trajectory import ReferenceTrajectory

G_VEC = np.array([0.0, 0.0, -GRAVITY])


class InfeasibleBoundsError(ValueError):
    """Controller configuration admits no hover command."""


class SolverDivergedError(RuntimeError):
    """Cost increased on three consecutive outer iterations."""


@dataclass(frozen=True)
class ControllerConfig:
    horizon: float = 0.8
    nodes: int = 20
    w_pos: tuple[float, float, float] = (60.0, 60.0, 90.0)
    w_vel: tuple[float, float, float] = (6.0, 6.0, 9.0)
    w_att: tuple[float, float, float] = (4.0, 4.0, 1.5)
    w_thrust: float = 2e-3
    w_rates: tuple[float, float, float] = (0.12, 0.12, 0.25)
    terminal_scale: float = 5.0
    thrust_min: float = 0.0
    thrust_max: float | None = None  # default: vehicle max thrust
    rate_max: float = 10.0
    delay: float = 0.030
    max_outer: int = 5

    @property
    def node_dt(self) -> float:
        return self.horizon / self.nodes

    def validate(self, params: QuadParams) -> None:
        c_max = self.thrust_max if self.thrust_max is not None else params.max_thrust
        if self.nodes < 2 or self.horizon <= 0:
            raise InfeasibleBoundsError("horizon/nodes must be positive")
        if self.thrust_min >= c_max:
            raise InfeasibleBoundsError("thrust_min >= thrust_max")
        if not (self.thrust_min <= params.hover_thrust <= c_max):
            raise InfeasibleBoundsError("hover thrust outside the thrust bounds")
        if self.rate_max <= 0 or self.delay < 0:
            raise InfeasibleBoundsError("invalid rate bound or delay")


@dataclass(frozen=True)
class PredictedState:
    t: float
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray


def predict_delay(
    t: float,
    q: np.ndarray,
    p: np.ndarray,
    v: np.ndarray,
    commands,
    delay: float,
    mass: float,
    substep: float = 2e-3,
) -> PredictedState:
    """Point-mass forward prediction over [t, t + delay].

    ``commands`` is a time-ordered sequence of (t_apply, CtbrCommand);
    the command active at any instant is the latest one with
    t_apply <= instant, held constant past the end of the buffer.
    """
    q = q.copy()
    p = p.copy()
    v = v.copy()
    if delay <= 0:
        return PredictedState(t, q, p, v)
    events = [ta for ta, _ in commands if t < ta < t + delay]
    edges = sorted(set([t, t + delay] + events))
    for t0, t1 in zip(edges[:-1], edges[1:]):
        cmd = None
        for ta, c in commands:
            if ta <= t0 + 1e-12:
                cmd = c
            else:
                break
        if cmd is None:
            cmd = CtbrCommand(mass * GRAVITY, np.zeros(3))
        remaining = t1 - t0
        w = np.asarray(cmd.rates, dtype=float)
        spinning = float(w @ w) > 1e-12
        while remaining > 1e-12:
            h = min(substep, remaining) if spinning else remaining
            a = rot_matrix(q)[:, 2] * (cmd.collective / mass) + G_VEC
            p += v * h + 0.5 * a * h * h
            v += a * h
            if spinning:
                q = quat_normalize(quat_mult(q, quat_from_rotvec(w * h)))
            remaining -= h
    return PredictedState(t + delay, q, p, v)


@njit
def _ctrl_rollout(x0, U, dt, mass, c_min, c_max, w_max, X_out):
    """Roll the nominal model; inputs are clamped in place into U."""
    n = U.shape[0]
    X_out[0, :] = x0
    for i in range(n):
        c = U[i, 0]
        if c < c_min:
            c = c_min
        elif c > c_max:
            c = c_max
        U[i, 0] = c
        for j in range(3):
            w = U[i, 1 + j]
            if w < -w_max:
                w = -w_max
            elif w > w_max:
                w = w_max
            U[i, 1 + j] = w
        p = X_out[i, 0:3]
        v = X_out[i, 3:6]
        q = X_out[i, 6:10]
        R = rot_matrix(q)
        a = np.empty(3)
        for j in range(3):
            a[j] = R[j, 2] * c / mass
        a[2] -= GRAVITY
        for j in range(3):
            X_out[i + 1, j] = p[j] + v[j] * dt + 0.5 * a[j] * dt * dt
            X_out[i + 1, 3 + j] = v[j] + a[j] * dt
        w_vec = U[i, 1:4].copy()
        phi = w_vec * dt
        qn = quat_normalize(quat_mult(q, quat_from_rotvec(phi)))
        X_out[i + 1, 6:10] = qn


@njit
def _ctrl_cost(X, U, p_ref, v_ref, q_ref, u_ref, w_pos, w_vel, w_att, w_u, term_scale):
    n = U.shape[0]
    cost = 0.0
    for i in range(n + 1):
        scale = term_scale if i == n else 1.0
        for j in range(3):
            ep = X[i, j] - p_ref[i, j]
            ev = X[i, 3 + j] - v_ref[i, j]
            cost += 0.5 * scale * (w_pos[j] * ep * ep + w_vel[j] * ev * ev)
        eth = quat_to_rotvec(quat_mult(quat_conj(q_ref[i]), X[i, 6:10]))
        for j in range(3):
            cost += 0.5 * scale * w_att[j] * eth[j] * eth[j]
        if i < n:
            for j in range(4):
                du = U[i, j] - u_ref[i, j]
                cost += 0.5 * w_u[j] * du * du
    return cost


@njit
def _ilqr_solve(
    x0,
    U,
    p_ref,
    v_ref,
    q_ref,
    u_ref,
    w_pos,
    w_vel,
    w_att,
    w_u,
    term_scale,
    dt,
    mass,
    c_min,
    c_max,
    w_max,
    max_outer,
):
    """Sequential-linearization solve.  Returns (U, cost, iters, status);
    status 0 = ok, 1 = cost increased on 3 consecutive outer iterations."""
    n = U.shape[0]
    X = np.zeros((n + 1, 10))
    _ctrl_rollout(x0, U, dt, mass, c_min, c_max, w_max, X)
    cost = _ctrl_cost(X, U, p_ref, v_ref, q_ref, u_ref, w_pos, w_vel, w_att, w_u, term_scale)

    K_all = np.zeros((n, 4, 9))
    k_all = np.zeros((n, 4))
    X_new = np.zeros((n + 1, 10))
    ez = np.zeros(3)
    ez[2] = 1.0
    Sz = skew(ez)
    rho = 1e-6
    no_improve = 0
    iters = 0
    for outer in range(max_outer):
        iters = outer + 1
        # backward pass
        Vx = np.zeros(9)
        Vxx = np.zeros((9, 9))
        for j in range(3):
            ep = X[n, j] - p_ref[n, j]
            ev = X[n, 3 + j] - v_ref[n, j]
            Vx[j] = term_scale * w_pos[j] * ep
            Vx[3 + j] = term_scale * w_vel[j] * ev
            Vxx[j, j] = term_scale * w_pos[j]
            Vxx[3 + j, 3 + j] = term_scale * w_vel[j]
        eth = quat_to_rotvec(quat_mult(quat_conj(q_ref[n]), X[n, 6:10]))
        for j in range(3):
            Vx[6 + j] = term_scale * w_att[j] * eth[j]
            Vxx[6 + j, 6 + j] = term_scale * w_att[j]

        failed = False
        for i in range(n - 1, -1, -1):
            q = X[i, 6:10]
            R = rot_matrix(q)
            c = U[i, 0]
            w_vec = U[i, 1:4].copy()
            phi = w_vec * dt
            A = np.eye(9)
            S = -(c / mass) * (R @ Sz)
            for r in range(3):
                A[r, 3 + r] = dt
                for cc in range(3):
                    A[r, 6 + cc] = 0.5 * S[r, cc] * dt * dt
                    A[3 + r, 6 + cc] = S[r, cc] * dt
            Rphi = rot_matrix(quat_from_rotvec(phi))
            A[6:9, 6:9] = Rphi.T
            B = np.zeros((9, 4))
            for r in range(3):
                B[r, 0] = 0.5 * R[r, 2] / mass * dt * dt
                B[3 + r, 0] = R[r, 2] / mass * dt
            Jr = so3_right_jacobian(phi)
            B[6:9, 1:4] = Jr * dt

            Lx = np.zeros(9)
            Lxx = np.zeros((9, 9))
            for j in range(3):
                ep = X[i, j] - p_ref[i, j]
                ev = X[i, 3 + j] - v_ref[i, j]
                Lx[j] = w_pos[j] * ep
                Lx[3 + j] = w_vel[j] * ev
                Lxx[j, j] = w_pos[j]
                Lxx[3 + j, 3 + j] = w_vel[j]
            ethi = quat_to_rotvec(quat_mult(quat_conj(q_ref[i]), X[i, 6:10]))
            for j in range(3):
                Lx[6 + j] = w_att[j] * ethi[j]
                Lxx[6 + j, 6 + j] = w_att[j]
            Lu = np.zeros(4)
            Luu = np.zeros((4, 4))
            for j in range(4):
                Lu[j] = w_u[j] * (U[i, j] - u_ref[i, j])
                Luu[j, j] = w_u[j]

            Qx = Lx + A.T @ Vx
            Qu = Lu + B.T @ Vx
            Qxx = Lxx + A.T @ Vxx @ A
            Quu = Luu + B.T @ Vxx @ B
            Qux = B.T @ Vxx @ A
            for j in range(4):
                Quu[j, j] += rho
            det = np.linalg.det(Quu)
            if not np.isfinite(det) or det <= 0.0:
                failed = True
                break
            Quu_inv = np.linalg.inv(Quu)
            kk = -(Quu_inv @ Qu)
            KK = -(Quu_inv @ Qux)
            k_all[i] = kk
            K_all[i] = KK
            Vx = Qx + KK.T @ Quu @ kk + KK.T @ Qu + Qux.T @ kk
            Vxx = Qxx + KK.T @ Quu @ KK + KK.T @ Qux + Qux.T @ KK
            Vxx = 0.5 * (Vxx + Vxx.T)
        if failed:
            rho *= 10.0
            if rho > 1e8:
                break
            continue

        # already at a stationary point: keep the warm-started solution
        kmax = 0.0
        for i in range(n):
            for j in range(4):
                if abs(k_all[i, j]) > kmax:
                    kmax = abs(k_all[i, j])
        if kmax < 1e-10:
            break

        # forward pass with backtracking line search
        improved = False
        alpha = 1.0
        U_try = np.zeros((n, 4))
        for _ls in range(7):
            X_new[0] = x0
            for i in range(n):
                dx = np.empty(9)
                for j in range(3):
                    dx[j] = X_new[i, j] - X[i, j]
                    dx[3 + j] = X_new[i, 3 + j] - X[i, 3 + j]
                dth = quat_to_rotvec(quat_mult(quat_conj(X[i, 6:10]), X_new[i, 6:10]))
                dx[6] = dth[0]
                dx[7] = dth[1]
                dx[8] = dth[2]
                for j in range(4):
                    U_try[i, j] = U[i, j] + alpha * k_all[i, j]
                    for cdx in range(9):
                        U_try[i, j] += K_all[i, j, cdx] * dx[cdx]
                # clamp and advance one step
                c = U_try[i, 0]
                if c < c_min:
                    c = c_min
                elif c > c_max:
                    c = c_max
                U_try[i, 0] = c
                for j in range(3):
                    wv = U_try[i, 1 + j]
                    if wv < -w_max:
                        wv = -w_max
                    elif wv > w_max:
                        wv = w_max
                    U_try[i, 1 + j] = wv
                qi = X_new[i, 6:10]
                Ri = rot_matrix(qi)
                a = np.empty(3)
                for j in range(3):
                    a[j] = Ri[j, 2] * c / mass
                a[2] -= GRAVITY
                for j in range(3):
                    X_new[i + 1, j] = X_new[i, j] + X_new[i, 3 + j] * dt + 0.5 * a[j] * dt * dt
                    X_new[i + 1, 3 + j] = X_new[i, 3 + j] + a[j] * dt
                X_new[i + 1, 6:10] = quat_normalize(
                    quat_mult(qi, quat_from_rotvec(U_try[i, 1:4] * dt))
                )
            cost_new = _ctrl_cost(
                X_new, U_try, p_ref, v_ref, q_ref, u_ref, w_pos, w_vel, w_att, w_u, term_scale
            )
            if cost_new < cost:
                improved = True
                break
            alpha *= 0.5
        if improved:
            no_improve = 0
            dcost = cost - cost_new
            X[:, :] = X_new
            U[:, :] = U_try
            cost = cost_new
            rho = max(rho / 3.0, 1e-9)
            if dcost < 1e-10:
                break
        else:
            no_improve += 1
            rho *= 10.0
            if no_improve >= 3 or rho > 1e8:
                break
    status = 0
    if not np.isfinite(cost):
        status = 1
    return U, cost, iters, status


@dataclass
class SolveInfo:
    cost: float
    iterations: int
    solve_time: float


class Controller:
    """Stateful tracking controller (warm start across solves)."""

    def __init__(
        self,
        cfg: ControllerConfig,
        params: QuadParams,
        traj: ReferenceTrajectory,
    ):
        cfg.validate(params)
        self.cfg = cfg
        self.params = params
        self.traj = traj
        self._U: np.ndarray | None = None
        self._c_max = cfg.thrust_max if cfg.thrust_max is not None else params.max_thrust
        self.last_info: SolveInfo | None = None
        self._w_u = np.array([cfg.w_thrust, *cfg.w_rates])

    def reset(self) -> None:
        self._U = None

    def _reference_window(self, ref_time: float, time_scale: float):
        cfg = self.cfg
        n = cfg.nodes
        p_ref = np.empty((n + 1, 3))
        v_ref = np.empty((n + 1, 3))
        q_ref = np.empty((n + 1, 4))
        u_ref = np.empty((n, 4))
        m = self.params.mass
        r = max(0.0, min(1.0, time_scale))
        for i in range(n + 1):
            q, p, v, a, om = self.traj.sample(ref_time + r * i * cfg.node_dt)
            p_ref[i] = p
            v_ref[i] = v * r
            q_ref[i] = q
            if i < n:
                a_s = a * r * r
                u_ref[i, 0] = m * float(np.linalg.norm(a_s - G_VEC))
                u_ref[i, 1:4] = om * r
        return p_ref, v_ref, q_ref, u_ref

    def solve(
        self,
        state: PredictedState,
        ref_time: float,
        time_scale: float = 1.0,
    ) -> CtbrCommand:
        """One receding-horizon solve; returns the first input."""
        cfg = self.cfg
        t0 = _time.perf_counter()
        p_ref, v_ref, q_ref, u_ref = self._reference_window(ref_time, time_scale)
        if self._U is None:
            U = u_ref.copy()
        else:
            U = self._U
        x0 = np.concatenate([state.p, state.v, state.q])
        U, cost, iters, status = _ilqr_solve(
            x0,
            U,
            p_ref,
            v_ref,
            q_ref,
            u_ref,
            np.asarray(cfg.w_pos, dtype=float),
            np.asarray(cfg.w_vel, dtype=float),
            np.asarray(cfg.w_att, dtype=float),
            self._w_u,
            cfg.terminal_scale,
            cfg.node_dt,
            self.params.mass,
            cfg.thrust_min,
            self._c_max,
            cfg.rate_max,
            cfg.max_outer,
        )
        self.last_info = SolveInfo(float(cost), int(iters), _time.perf_counter() - t0)
        if status != 0:
            self._U = None
            raise SolverDivergedError("cost increased on 3 consecutive iterations")
        self._U = U
        c = float(np.clip(U[0, 0], cfg.thrust_min, self._c_max))
        w = np.clip(U[0, 1:4].copy(), -cfg.rate_max, cfg.rate_max)
        return CtbrCommand(c, w)
