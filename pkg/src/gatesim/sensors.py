"""IMU, VIO, camera-frame, and MoCap measurement generation.

All sensors draw from per-sensor numpy Generators owned by the caller,
so a fixed seed reproduces an identical measurement stream.  Noise
magnitudes are configuration, not claims about any particular device:

- IMU noise is given as continuous densities (units/sqrt(Hz)); the
  per-sample standard deviation is density * sqrt(rate).
- VIO drift is a per-axis random walk with sigma_rw in m/sqrt(s), plus
  white position noise sigma_p in m, plus an optional yaw-only
  orientation random walk.  An optional loop-closure event shrinks the
  accumulated drift every ``correction_interval`` seconds, which bounds
  the drift variance instead of letting it grow linearly.
- Camera frames become available 24-30 ms after capture (detection
  latency); each frame carries the VIO sample synchronized to its
  capture time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geom import quat_from_yaw, quat_mult, quat_normalize, rot_matrix
from .quad import GRAVITY, TrueState

GRAVITY_VEC = np.array([0.0, 0.0, -GRAVITY])


@dataclass(frozen=True)
class ImuSample:
    t: float
    a: np.ndarray
    omega: np.ndarray


@dataclass(frozen=True)
class VioSample:
    t: float
    q: np.ndarray
    p: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class CameraFrameEvent:
    """A capture instant plus the time its detections become available."""

    t_capture: float
    t_available: float
    vio: VioSample


@dataclass(frozen=True)
class ImuNoiseConfig:
    gyro_density: float = 0.005  # rad/s/sqrt(Hz)
    accel_density: float = 0.05  # m/s^2/sqrt(Hz)
    gyro_bias_rw: float = 1e-4  # rad/s/sqrt(s)
    accel_bias_rw: float = 1e-4  # m/s^2/sqrt(s)
    init_gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    init_accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rate: float = 500.0

    @staticmethod
    def zero(rate: float = 500.0) -> "ImuNoiseConfig":
        return ImuNoiseConfig(0.0, 0.0, 0.0, 0.0, rate=rate)


@dataclass(frozen=True)
class DriftModel:
    """VIO drift parameters.

    Defaults are calibrated so that a closed-loop race without gate-based
    drift correction loses gate passage within a few laps, which keeps
    the correction filter's contribution observable in ablations.
    """

    sigma_rw: float = 0.10  # m/sqrt(s), per axis
    sigma_p: float = 0.005  # m white noise, per axis
    yaw_rw: float = np.deg2rad(0.1)  # rad/sqrt(s)
    correction_interval: float | None = None
    shrink_factor: float = 0.5

    @staticmethod
    def zero() -> "DriftModel":
        return DriftModel(0.0, 0.0, 0.0, None, 1.0)

    @staticmethod
    def from_json(path) -> "DriftModel":
        with open(path) as f:
            d = json.load(f)
        return DriftModel(
            sigma_rw=float(d.get("sigma_rw", 0.10)),
            sigma_p=float(d.get("sigma_p", 0.005)),
            yaw_rw=float(d.get("yaw_rw", np.deg2rad(0.1))),
            correction_interval=d.get("correction_interval"),
            shrink_factor=float(d.get("shrink_factor", 0.5)),
        )


class ImuSensor:
    """Accelerometer + gyro with slowly walking biases."""

    def __init__(self, cfg: ImuNoiseConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.gyro_bias = np.asarray(cfg.init_gyro_bias, dtype=float).copy()
        self.accel_bias = np.asarray(cfg.init_accel_bias, dtype=float).copy()
        self._last_t: float | None = None

    def sample(self, state: TrueState, a_world: np.ndarray) -> ImuSample:
        """Measure specific force and body rates at state.t.

        a_world is the vehicle's world-frame acceleration (dv/dt); the
        accelerometer reports R_wb^T (a_world - g) plus bias and noise.
        """
        t = state.t
        if self._last_t is not None:
            if t <= self._last_t:
                raise ValueError("IMU sampled with non-increasing timestamp")
            dt = t - self._last_t
            self.gyro_bias += self.cfg.gyro_bias_rw * np.sqrt(dt) * self.rng.standard_normal(3)
            self.accel_bias += self.cfg.accel_bias_rw * np.sqrt(dt) * self.rng.standard_normal(3)
        self._last_t = t
        sr = np.sqrt(self.cfg.rate)
        n_a = self.cfg.accel_density * sr * self.rng.standard_normal(3)
        n_g = self.cfg.gyro_density * sr * self.rng.standard_normal(3)
        R_bw = rot_matrix(state.q).T
        a = R_bw @ (np.asarray(a_world, dtype=float) - GRAVITY_VEC) + self.accel_bias + n_a
        omega = state.omega + self.gyro_bias + n_g
        return ImuSample(t, a, omega)


class VioSensor:
    """Odometry with random-walk translational drift and yaw drift.

    The same instance serves both the regular-rate VIO stream and the
    camera-synchronized samples; drift state advances with every query.
    """

    def __init__(self, model: DriftModel, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        self.drift = np.zeros(3)
        self.yaw_drift = 0.0
        self._last_t: float | None = None
        self._last_dt: float = 0.0
        self._last_step = np.zeros(3)
        self._last_sample: VioSample | None = None

    def sample(self, state: TrueState) -> VioSample:
        t = state.t
        m = self.model
        if self._last_t is None:
            dt = 0.0
        else:
            dt = t - self._last_t
            if dt == 0.0 and self._last_sample is not None:
                # same-instant query (camera frame synchronized with the
                # regular stream): hand out the identical estimate
                return self._last_sample
            if dt <= 0.0:
                raise ValueError("VIO sampled with non-increasing timestamp")
        if dt > 0.0:
            step = m.sigma_rw * np.sqrt(dt) * self.rng.standard_normal(3)
            self.drift += step
            self.yaw_drift += m.yaw_rw * np.sqrt(dt) * self.rng.standard_normal()
            if m.correction_interval:
                k_prev = int(np.floor((t - dt) / m.correction_interval))
                k_now = int(np.floor(t / m.correction_interval))
                for _ in range(k_now - k_prev):
                    self.drift *= m.shrink_factor
                    self.yaw_drift *= m.shrink_factor
            self._last_step = step
            self._last_dt = dt
        self._last_t = t

        p = state.p + self.drift + m.sigma_p * self.rng.standard_normal(3)
        v = state.v.copy()
        if self._last_dt > 0.0:
            v = v + self._last_step / self._last_dt
        q = quat_normalize(quat_mult(quat_from_yaw(self.yaw_drift), state.q))
        out = VioSample(t, q, p, v)
        self._last_sample = out
        return out


class CameraTimer:
    """Draws the per-frame detection latency in [24, 30] ms."""

    def __init__(
        self,
        rng: np.random.Generator,
        latency_range: tuple[float, float] = (0.024, 0.030),
    ):
        self.rng = rng
        self.latency_range = latency_range

    def make_event(self, vio_at_capture: VioSample) -> CameraFrameEvent:
        lat = self.rng.uniform(*self.latency_range)
        t_cap = vio_at_capture.t
        return CameraFrameEvent(t_cap, t_cap + lat, vio_at_capture)


@dataclass(frozen=True)
class MocapConfig:
    rate: float = 275.0
    sigma_p: float = 0.001  # millimeter-level external tracking
    sigma_v: float = 0.01
    sigma_att: float = 0.001


class MocapSensor:
    """External tracking feed used by the MoCap baseline mode."""

    def __init__(self, cfg: MocapConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng

    def sample(self, state: TrueState) -> VioSample:
        c = self.cfg
        p = state.p + c.sigma_p * self.rng.standard_normal(3)
        v = state.v + c.sigma_v * self.rng.standard_normal(3)
        dq = np.concatenate(([1.0], 0.5 * c.sigma_att * self.rng.standard_normal(3)))
        q = quat_normalize(quat_mult(state.q, dq))
        return VioSample(state.t, q, p, v)
