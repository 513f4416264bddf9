"""Ground-truth rigid-body quadrotor plant.

The plant is commanded with collective thrust + body rates (CTBR).  An
inner rate-PID loop (gyro feedback, integral term, derivative on the
measured rate) converts the rate error to body torques, an X-configuration
mixer allocates per-rotor thrusts with saturation (yaw authority shed
first), rotors follow a first-order lag, and the rigid body is integrated
with semi-implicit Euler.

Rotor layout, body frame x forward / y left / z up, l = arm/sqrt(2):

    idx  position      spin
    0    (+l, -l)      +      (front right)
    1    (-l, +l)      +      (rear left)
    2    (+l, +l)      -      (front left)
    3    (-l, -l)      -      (rear right)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .geom import quat_integrate, rot_matrix

GRAVITY = 9.81


class NonFiniteError(ValueError):
    """State or command contains NaN/Inf."""


@dataclass(frozen=True)
class QuadParams:
    """Physical and inner-loop parameters of the simulated quadrotor.

    Default mass is the 665.5 g frame plus an assumed 205 g battery.
    PID gains are a documented default tuned for fast rate tracking
    (sub-50 ms step settling at nominal thrust), not a firmware replica.
    """

    mass: float = 0.8705
    inertia: tuple[float, float, float] = (0.0025, 0.0025, 0.0045)
    arm_length: float = 0.15
    max_twr: float = 7.0
    rotor_tau: float = 0.030
    torque_coeff: float = 0.02
    drag_coeff: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rate_limit: float = 12.0
    pid_kp: tuple[float, float, float] = (360.0, 360.0, 160.0)
    pid_ki: tuple[float, float, float] = (900.0, 900.0, 400.0)
    pid_kd: tuple[float, float, float] = (6.0, 6.0, 1.2)
    pid_int_limit: float = 2.0

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if self.max_twr <= 1:
            raise ValueError("thrust-to-weight ratio must exceed 1 (hover)")

    @property
    def max_thrust(self) -> float:
        return self.max_twr * self.mass * GRAVITY

    @property
    def hover_thrust(self) -> float:
        return self.mass * GRAVITY

    def as_array(self) -> np.ndarray:
        """Flat parameter vector consumed by the jitted step kernel."""
        return np.array(
            [
                self.mass,
                self.inertia[0],
                self.inertia[1],
                self.inertia[2],
                self.arm_length,
                self.max_thrust,
                self.rotor_tau,
                self.torque_coeff,
                self.drag_coeff[0],
                self.drag_coeff[1],
                self.drag_coeff[2],
                self.pid_kp[0],
                self.pid_kp[1],
                self.pid_kp[2],
                self.pid_ki[0],
                self.pid_ki[1],
                self.pid_ki[2],
                self.pid_kd[0],
                self.pid_kd[1],
                self.pid_kd[2],
                self.pid_int_limit,
            ]
        )

    @staticmethod
    def from_json(path) -> "QuadParams":
        with open(path) as f:
            d = json.load(f)
        kwargs = {}
        for key in (
            "mass",
            "arm_length",
            "max_twr",
            "rotor_tau",
            "torque_coeff",
            "rate_limit",
            "pid_int_limit",
        ):
            if key in d:
                kwargs[key] = float(d[key])
        for key in ("inertia", "drag_coeff", "pid_kp", "pid_ki", "pid_kd"):
            if key in d:
                kwargs[key] = tuple(float(v) for v in d[key])
        return QuadParams(**kwargs)


@dataclass(frozen=True)
class CtbrCommand:
    """Collective thrust (N) and desired body rates (rad/s)."""

    collective: float
    rates: np.ndarray

    @staticmethod
    def hover(params: QuadParams) -> "CtbrCommand":
        return CtbrCommand(params.hover_thrust, np.zeros(3))

    def clamped(self, params: QuadParams) -> "CtbrCommand":
        c = min(max(self.collective, 0.0), params.max_thrust)
        w = np.clip(self.rates, -params.rate_limit, params.rate_limit)
        return CtbrCommand(c, w)

    def normalized_thrust(self, params: QuadParams) -> float:
        return self.collective / params.max_thrust


@dataclass(frozen=True)
class TrueState:
    """Ground-truth rigid body state plus rotor thrusts."""

    t: float
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    rotor_thrust: np.ndarray

    @staticmethod
    def hover(params: QuadParams, p=(0.0, 0.0, 1.0), yaw: float = 0.0) -> "TrueState":
        """Hover equilibrium at position p (rotors pre-spun to weight)."""
        half = 0.5 * yaw
        q = np.array([math.cos(half), 0.0, 0.0, math.sin(half)])
        return TrueState(
            t=0.0,
            q=q,
            p=np.asarray(p, dtype=float).copy(),
            v=np.zeros(3),
            omega=np.zeros(3),
            rotor_thrust=np.full(4, params.hover_thrust / 4.0),
        )

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.t)
            and np.all(np.isfinite(self.q))
            and np.all(np.isfinite(self.p))
            and np.all(np.isfinite(self.v))
            and np.all(np.isfinite(self.omega))
            and np.all(np.isfinite(self.rotor_thrust))
        )


@njit
def _mixer_kernel(collective, tau_x, tau_y, tau_z, arm, kappa, t_rotor_max):
    l = arm / np.sqrt(2.0)
    base = np.empty(4)
    rp0 = -tau_x / (4.0 * l) - tau_y / (4.0 * l)
    rp1 = +tau_x / (4.0 * l) + tau_y / (4.0 * l)
    rp2 = +tau_x / (4.0 * l) - tau_y / (4.0 * l)
    rp3 = -tau_x / (4.0 * l) + tau_y / (4.0 * l)
    base[0] = collective / 4.0 + rp0
    base[1] = collective / 4.0 + rp1
    base[2] = collective / 4.0 + rp2
    base[3] = collective / 4.0 + rp3
    yaw = np.empty(4)
    yv = tau_z / (4.0 * kappa)
    yaw[0] = yv
    yaw[1] = yv
    yaw[2] = -yv
    yaw[3] = -yv
    # shed yaw authority first: largest gamma in [0, 1] keeping rotors in range
    gamma = 1.0
    for i in range(4):
        if yaw[i] > 1e-12:
            room = t_rotor_max - base[i]
            g = room / yaw[i]
        elif yaw[i] < -1e-12:
            g = base[i] / (-yaw[i])
        else:
            continue
        if g < gamma:
            gamma = g
    if gamma < 0.0:
        gamma = 0.0
    out = np.empty(4)
    for i in range(4):
        ti = base[i] + gamma * yaw[i]
        if ti < 0.0:
            ti = 0.0
        elif ti > t_rotor_max:
            ti = t_rotor_max
        out[i] = ti
    return out


@njit
def _body_torque(thrusts, arm, kappa):
    l = arm / np.sqrt(2.0)
    tau = np.empty(3)
    tau[0] = l * (-thrusts[0] + thrusts[1] + thrusts[2] - thrusts[3])
    tau[1] = l * (-thrusts[0] + thrusts[1] - thrusts[2] + thrusts[3])
    tau[2] = kappa * (thrusts[0] + thrusts[1] - thrusts[2] - thrusts[3])
    return tau


@njit
def _step_kernel(q, p, v, w, rotors, pid_integ, pid_prev_w, pid_has_prev, c_des, w_des, dt, par):
    m = par[0]
    inertia = par[1:4]
    arm = par[4]
    t_max = par[5]
    rotor_tau = par[6]
    kappa = par[7]
    drag = par[8:11]
    kp = par[11:14]
    ki = par[14:17]
    kd = par[17:20]
    int_limit = par[20]

    # rate PID -> desired body torques
    alpha_des = np.empty(3)
    for i in range(3):
        e = w_des[i] - w[i]
        pid_integ[i] += e * dt
        if pid_integ[i] > int_limit:
            pid_integ[i] = int_limit
        elif pid_integ[i] < -int_limit:
            pid_integ[i] = -int_limit
        if pid_has_prev:
            dw = (w[i] - pid_prev_w[i]) / dt
        else:
            dw = 0.0
        alpha_des[i] = kp[i] * e + ki[i] * pid_integ[i] - kd[i] * dw
    tau_des = np.empty(3)
    for i in range(3):
        tau_des[i] = inertia[i] * alpha_des[i]

    t_cmd = _mixer_kernel(c_des, tau_des[0], tau_des[1], tau_des[2], arm, kappa, t_max / 4.0)

    # first-order rotor lag, exact over dt
    decay = np.exp(-dt / rotor_tau)
    rotors_new = np.empty(4)
    for i in range(4):
        rotors_new[i] = t_cmd[i] + (rotors[i] - t_cmd[i]) * decay

    thrust_total = rotors_new[0] + rotors_new[1] + rotors_new[2] + rotors_new[3]
    tau = _body_torque(rotors_new, arm, kappa)

    # angular dynamics with gyroscopic coupling
    Iw = np.empty(3)
    for i in range(3):
        Iw[i] = inertia[i] * w[i]
    gyro = np.empty(3)
    gyro[0] = w[1] * Iw[2] - w[2] * Iw[1]
    gyro[1] = w[2] * Iw[0] - w[0] * Iw[2]
    gyro[2] = w[0] * Iw[1] - w[1] * Iw[0]
    w_new = np.empty(3)
    for i in range(3):
        w_new[i] = w[i] + (tau[i] - gyro[i]) / inertia[i] * dt

    R = rot_matrix(q)
    # thrust along body z, drag linear in body-frame velocity
    v_body = R.T @ v
    f_body = np.empty(3)
    f_body[0] = -drag[0] * v_body[0]
    f_body[1] = -drag[1] * v_body[1]
    f_body[2] = thrust_total - drag[2] * v_body[2]
    f_world = R @ f_body
    f_world[2] -= m * GRAVITY

    v_new = np.empty(3)
    p_new = np.empty(3)
    for i in range(3):
        v_new[i] = v[i] + f_world[i] / m * dt
        p_new[i] = p[i] + v_new[i] * dt

    q_new = quat_integrate(q, w_new, dt)
    return q_new, p_new, v_new, w_new, rotors_new


def mixer(collective: float, torques, params: QuadParams) -> np.ndarray:
    """Allocate collective thrust + body torques to 4 rotor thrusts.

    Saturation is part of the contract: rotors clamp to [0, T_max/4]
    and yaw torque is shed before thrust or roll/pitch authority.
    """
    torques = np.asarray(torques, dtype=float)
    if not (np.isfinite(collective) and np.all(np.isfinite(torques))):
        raise NonFiniteError("mixer inputs must be finite")
    return _mixer_kernel(
        float(collective),
        torques[0],
        torques[1],
        torques[2],
        params.arm_length,
        params.torque_coeff,
        params.max_thrust / 4.0,
    )


def torques_from_thrusts(thrusts, params: QuadParams) -> np.ndarray:
    """Body torques produced by the given rotor thrusts (mixer inverse check)."""
    return _body_torque(
        np.asarray(thrusts, dtype=float), params.arm_length, params.torque_coeff
    )


@dataclass
class QuadSim:
    """Owns the plant state and the inner rate-PID state.

    One instance per simulated vehicle; step() at the physics rate with
    dt in (0, 2 ms].
    """

    params: QuadParams
    state: TrueState
    _pid_integ: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _pid_prev_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _pid_has_prev: bool = False
    _par: np.ndarray = field(init=False)

    def __post_init__(self):
        self._par = self.params.as_array()

    def step(self, cmd: CtbrCommand, dt: float) -> TrueState:
        if not (0.0 < dt <= 2e-3):
            raise ValueError(f"dt={dt} outside (0, 2ms]")
        if not (
            np.isfinite(cmd.collective) and np.all(np.isfinite(cmd.rates))
        ):
            raise NonFiniteError("command contains NaN/Inf")
        if not self.state.is_finite():
            raise NonFiniteError("simulator state contains NaN/Inf")
        cmd = cmd.clamped(self.params)
        s = self.state
        q, p, v, w, rotors = _step_kernel(
            s.q,
            s.p,
            s.v,
            s.omega,
            s.rotor_thrust,
            self._pid_integ,
            self._pid_prev_w,
            self._pid_has_prev,
            cmd.collective,
            np.asarray(cmd.rates, dtype=float),
            dt,
            self._par,
        )
        self._pid_prev_w = s.omega.copy()
        self._pid_has_prev = True
        self.state = TrueState(s.t + dt, q, p, v, w, rotors)
        if not self.state.is_finite():
            raise NonFiniteError(f"non-finite state at t={self.state.t:.4f}")
        return self.state

    def reset(self, state: TrueState) -> None:
        self.state = state
        self._pid_integ = np.zeros(3)
        self._pid_prev_w = np.zeros(3)
        self._pid_has_prev = False


def step(
    state: TrueState, cmd: CtbrCommand, dt: float, params: QuadParams
) -> TrueState:
    """Single stateless plant step (fresh PID memory; see QuadSim for loops)."""
    sim = QuadSim(params, state)
    return sim.step(cmd, dt)
