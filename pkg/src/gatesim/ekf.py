"""Error-state EKF fusing drift-corrected pose with high-rate IMU.

Nominal state: [q, p, v, b_gyro, b_accel] (16 numbers).  The filter
covariance lives on the 15-dimensional local error state

    [dtheta (3), dp (3), dv (3), db_gyro (3), db_accel (3)]

with the attitude error right-multiplicative: q_true = q_nom (x) exp(dtheta).
Pose updates observe the first six error components (attitude + position);
velocity and both biases are corrected through the cross covariances.

The propagation Jacobians F (w.r.t. the error state) and W (w.r.t. the
noise inputs) are the exact differentials of the discrete mechanization
in `_mech_kernel`, so they match finite differences of that map tightly.
Noise inputs enter as [n_gyro, n_accel, n_bg, n_ba] rate perturbations
whose discrete covariance is density^2 / dt.
"""

from __future__ import annotations

import json
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
    symmetrize,
)
from .quad import GRAVITY
from .sensors import ImuSample

G_VEC = np.array([0.0, 0.0, -GRAVITY])


class NonMonotonicTimeError(ValueError):
    """IMU sample predates the filter state."""


class StaleMeasurementError(ValueError):
    """Pose measurement outside the allowed staleness window."""


class SingularInnovationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class EkfConfig:
    gyro_density: float = 0.005  # rad/s/sqrt(Hz)
    accel_density: float = 0.05  # m/s^2/sqrt(Hz)
    gyro_bias_rw: float = 1e-4
    accel_bias_rw: float = 1e-4
    # static diagonal measurement covariance: [attitude (rad^2) x3, position (m^2) x3]
    meas_sigma_att: float = 0.02
    meas_sigma_pos: float = 0.02
    init_sigma_att: float = 0.05
    init_sigma_pos: float = 0.05
    init_sigma_vel: float = 0.2
    init_sigma_bg: float = 0.01
    init_sigma_ba: float = 0.1
    stale_bound: float = 0.050

    @property
    def meas_R_diag(self) -> np.ndarray:
        return np.array(
            [self.meas_sigma_att**2] * 3 + [self.meas_sigma_pos**2] * 3
        )

    def init_P(self) -> np.ndarray:
        d = (
            [self.init_sigma_att**2] * 3
            + [self.init_sigma_pos**2] * 3
            + [self.init_sigma_vel**2] * 3
            + [self.init_sigma_bg**2] * 3
            + [self.init_sigma_ba**2] * 3
        )
        return np.diag(d)

    @staticmethod
    def from_json(path) -> "EkfConfig":
        with open(path) as f:
            d = json.load(f)
        return EkfConfig(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class PoseMeasurement:
    t: float
    q: np.ndarray
    p: np.ndarray
    R_diag: np.ndarray  # (6,) attitude then position


@dataclass
class NavState:
    t: float
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    P: np.ndarray

    def copy(self) -> "NavState":
        return NavState(
            self.t,
            self.q.copy(),
            self.p.copy(),
            self.v.copy(),
            self.bg.copy(),
            self.ba.copy(),
            self.P.copy(),
        )


@njit
def _mech_kernel(q, p, v, bg, ba, omega_m, acc_m, dt, n):
    """Discrete strapdown mechanization with explicit noise inputs n (12,)."""
    om = np.empty(3)
    ac = np.empty(3)
    for i in range(3):
        om[i] = omega_m[i] - bg[i] + n[i]
        ac[i] = acc_m[i] - ba[i] + n[3 + i]
    R = rot_matrix(q)
    a_w = R @ ac
    a_w[2] += -GRAVITY
    p_new = np.empty(3)
    v_new = np.empty(3)
    for i in range(3):
        p_new[i] = p[i] + v[i] * dt + 0.5 * a_w[i] * dt * dt
        v_new[i] = v[i] + a_w[i] * dt
    phi = np.empty(3)
    for i in range(3):
        phi[i] = om[i] * dt
    q_new = quat_normalize(quat_mult(q, quat_from_rotvec(phi)))
    bg_new = np.empty(3)
    ba_new = np.empty(3)
    for i in range(3):
        bg_new[i] = bg[i] + n[6 + i] * dt
        ba_new[i] = ba[i] + n[9 + i] * dt
    return q_new, p_new, v_new, bg_new, ba_new


@njit
def _jacobians_kernel(q, bg, ba, omega_m, acc_m, dt):
    """Exact Jacobians F (15x15) and W (15x12) of `_mech_kernel` at zero
    error / zero noise."""
    om = np.empty(3)
    ac = np.empty(3)
    for i in range(3):
        om[i] = omega_m[i] - bg[i]
        ac[i] = acc_m[i] - ba[i]
    R = rot_matrix(q)
    phi = om * dt
    Rphi = rot_matrix(quat_from_rotvec(phi))
    Jr = so3_right_jacobian(phi)
    Sa = skew(ac)
    RSa = R @ Sa

    F = np.eye(15)
    # attitude
    F[0:3, 0:3] = Rphi.T
    F[0:3, 9:12] = -Jr * dt
    # position
    F[3:6, 0:3] = -0.5 * RSa * dt * dt
    F[3:6, 6:9] = np.eye(3) * dt
    F[3:6, 12:15] = -0.5 * R * dt * dt
    # velocity
    F[6:9, 0:3] = -RSa * dt
    F[6:9, 12:15] = -R * dt

    W = np.zeros((15, 12))
    W[0:3, 0:3] = Jr * dt
    W[3:6, 3:6] = 0.5 * R * dt * dt
    W[6:9, 3:6] = R * dt
    W[9:12, 6:9] = np.eye(3) * dt
    W[12:15, 9:12] = np.eye(3) * dt
    return F, W


@njit
def _propagate_cov(P, F, W, qn_diag):
    Qn = np.zeros((12, 12))
    for i in range(12):
        Qn[i, i] = qn_diag[i]
    P_new = F @ P @ F.T + W @ Qn @ W.T
    return 0.5 * (P_new + P_new.T)


@njit
def _update_kernel(q, p, v, bg, ba, P, q_meas, p_meas, r_diag):
    """Pose update; returns updated state tuple plus status (0 ok, 1 singular)."""
    # innovation: attitude as local rotation vector, then position
    dq = quat_mult(quat_conj(q), q_meas)
    z = np.empty(6)
    rth = quat_to_rotvec(dq)
    for i in range(3):
        z[i] = rth[i]
        z[3 + i] = p_meas[i] - p[i]
    S = P[0:6, 0:6].copy()
    for i in range(6):
        S[i, i] += r_diag[i]
    det = np.linalg.det(S)
    if not np.isfinite(det) or abs(det) < 1e-300:
        return q, p, v, bg, ba, P, 1
    Sinv = np.linalg.inv(S)
    PH = np.ascontiguousarray(P[:, 0:6])
    K = PH @ Sinv  # (15, 6)
    dx = K @ z
    q_new = quat_normalize(quat_mult(q, quat_from_rotvec(dx[0:3])))
    p_new = p + dx[3:6]
    v_new = v + dx[6:9]
    bg_new = bg + dx[9:12]
    ba_new = ba + dx[12:15]
    IKH = np.eye(15)
    IKH[:, 0:6] -= K
    KR = np.zeros((15, 15))
    for i in range(6):
        for r in range(15):
            for c in range(15):
                KR[r, c] += K[r, i] * r_diag[i] * K[c, i]
    P_new = IKH @ P @ IKH.T + KR
    P_new = 0.5 * (P_new + P_new.T)
    return q_new, p_new, v_new, bg_new, ba_new, P_new, 0


def mechanize(state: NavState, imu: ImuSample, dt: float, noise=None):
    """Nonlinear propagation map exposed for Jacobian verification."""
    if noise is None:
        noise = np.zeros(12)
    return _mech_kernel(
        state.q, state.p, state.v, state.bg, state.ba, imu.omega, imu.a, dt, noise
    )


def jacobians(state: NavState, imu: ImuSample, dt: float):
    """F and W of the discrete propagation at the current state."""
    return _jacobians_kernel(state.q, state.bg, state.ba, imu.omega, imu.a, dt)


def inject_error(state: NavState, delta: np.ndarray) -> NavState:
    """Apply a 15-vector error to the nominal state (test/analysis helper)."""
    out = state.copy()
    out.q = quat_normalize(quat_mult(state.q, quat_from_rotvec(delta[0:3])))
    out.p = state.p + delta[3:6]
    out.v = state.v + delta[6:9]
    out.bg = state.bg + delta[9:12]
    out.ba = state.ba + delta[12:15]
    return out


def error_between(nominal: NavState, other: NavState) -> np.ndarray:
    """15-vector error such that other = inject_error(nominal, error)."""
    return np.concatenate(
        [
            quat_to_rotvec(quat_mult(quat_conj(nominal.q), other.q)),
            other.p - nominal.p,
            other.v - nominal.v,
            other.bg - nominal.bg,
            other.ba - nominal.ba,
        ]
    )


class ErrorStateEkf:
    """Single-owner filter; call propagate() per IMU sample and
    update() per drift-corrected pose measurement."""

    def __init__(self, cfg: EkfConfig, init: NavState):
        self.cfg = cfg
        self.state = init
        self._qn = np.array(
            [cfg.gyro_density**2] * 3
            + [cfg.accel_density**2] * 3
            + [cfg.gyro_bias_rw**2] * 3
            + [cfg.accel_bias_rw**2] * 3
        )

    @staticmethod
    def init_from_pose(
        cfg: EkfConfig, t: float, q, p, v=None
    ) -> "ErrorStateEkf":
        v = np.zeros(3) if v is None else np.asarray(v, dtype=float)
        init = NavState(
            t,
            np.asarray(q, dtype=float).copy(),
            np.asarray(p, dtype=float).copy(),
            v.copy(),
            np.zeros(3),
            np.zeros(3),
            cfg.init_P(),
        )
        return ErrorStateEkf(cfg, init)

    def propagate(self, imu: ImuSample) -> NavState:
        s = self.state
        dt = imu.t - s.t
        if dt < 0:
            raise NonMonotonicTimeError(f"imu.t={imu.t} < state.t={s.t}")
        if dt == 0:
            return s
        q, p, v, bg, ba = _mech_kernel(
            s.q, s.p, s.v, s.bg, s.ba, imu.omega, imu.a, dt, np.zeros(12)
        )
        F, W = _jacobians_kernel(s.q, s.bg, s.ba, imu.omega, imu.a, dt)
        P = _propagate_cov(s.P, F, W, self._qn / dt)
        self.state = NavState(imu.t, q, p, v, bg, ba, P)
        return self.state

    def update(self, m: PoseMeasurement) -> NavState:
        s = self.state
        if abs(m.t - s.t) > self.cfg.stale_bound:
            raise StaleMeasurementError(
                f"measurement at t={m.t:.4f} vs filter t={s.t:.4f}"
            )
        q, p, v, bg, ba, P, status = _update_kernel(
            s.q, s.p, s.v, s.bg, s.ba, s.P, m.q, m.p, m.R_diag
        )
        if status != 0:
            raise SingularInnovationError("innovation covariance singular")
        self.state = NavState(s.t, q, p, v, bg, ba, symmetrize(P))
        return self.state
