"""Equidistant fisheye camera model with 4-term polynomial distortion.

Projection of a camera-frame point (z forward, x right, y down):

    theta   = angle between the ray and the optical axis
    theta_d = theta * (1 + k1*theta^2 + k2*theta^4 + k3*theta^6 + k4*theta^8)
    u = fx * theta_d * cos(phi) + cx
    v = fy * theta_d * sin(phi) + cy

Unprojection inverts the distortion polynomial with a bracketed Newton
iteration.  The same intrinsics double as the pinhole model used for
the undistorted detection plane (``project_pinhole``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._accel import njit


class BehindCameraError(ValueError):
    """Point has non-positive depth along the optical axis."""


class UnprojectError(ValueError):
    """Distortion inversion failed to converge (pixel outside valid range)."""


@njit
def _distort_theta(theta, k1, k2, k3, k4):
    t2 = theta * theta
    return theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))


@njit
def _fisheye_project_kernel(x, y, z, fx, fy, cx, cy, k1, k2, k3, k4):
    r = np.sqrt(x * x + y * y)
    theta = np.arctan2(r, z)
    theta_d = _distort_theta(theta, k1, k2, k3, k4)
    if r < 1e-15:
        return cx, cy
    su = theta_d * x / r
    sv = theta_d * y / r
    return fx * su + cx, fy * sv + cy


@njit
def _solve_theta(theta_d, k1, k2, k3, k4, max_iter, tol):
    """Invert theta_d(theta) by safeguarded Newton.

    Returns (theta, iterations, converged).  Fails where the distortion
    polynomial is non-increasing, which flags pixels outside the lens's
    valid range.
    """
    if theta_d == 0.0:
        return 0.0, 0, True
    theta = theta_d
    for it in range(max_iter):
        t2 = theta * theta
        f = _distort_theta(theta, k1, k2, k3, k4) - theta_d
        df = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
        if df <= 1e-12:
            return theta, it + 1, False
        step = f / df
        theta = theta - step
        if theta < 0.0:
            theta = 1e-12
        elif theta > np.pi:
            theta = np.pi
        if abs(step) < tol:
            return theta, it + 1, True
    return theta, max_iter, False


@dataclass(frozen=True)
class FisheyeIntrinsics:
    """Calibrated fisheye intrinsics (pixels / dimensionless)."""

    fx: float
    fy: float
    cx: float
    cy: float
    k: tuple[float, float, float, float]
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @staticmethod
    def default() -> "FisheyeIntrinsics":
        # placeholder calibration, fully configurable.  The focal length
        # keeps gate-corner bearing noise (and hence PnP error) at the
        # few-centimeter level; the wide synthetic detection plane stands
        # in for a fisheye lens's field of view (~104 x 101 deg).
        return FisheyeIntrinsics(
            fx=620.0,
            fy=620.0,
            cx=800.0,
            cy=750.0,
            k=(-0.0046, 0.0397, -0.0373, 0.0062),
            width=1600,
            height=1500,
        )

    @staticmethod
    def from_json(path) -> "FisheyeIntrinsics":
        with open(path) as f:
            d = json.load(f)
        return FisheyeIntrinsics(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            k=tuple(float(v) for v in d["k"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )

    def to_json(self, path) -> None:
        d = {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "k": list(self.k),
            "width": self.width,
            "height": self.height,
        }
        with open(path, "w") as f:
            json.dump(d, f, indent=2)


def fisheye_project(x_cam, K: FisheyeIntrinsics) -> np.ndarray:
    """Project a camera-frame point to distorted pixel coordinates.

    Raises BehindCameraError for z <= 0.
    """
    x_cam = np.asarray(x_cam, dtype=float)
    if x_cam[2] <= 0.0:
        raise BehindCameraError(f"point has z={x_cam[2]:.6g} <= 0")
    k1, k2, k3, k4 = K.k
    u, v = _fisheye_project_kernel(
        x_cam[0], x_cam[1], x_cam[2], K.fx, K.fy, K.cx, K.cy, k1, k2, k3, k4
    )
    return np.array([u, v])


def fisheye_unproject(px, K: FisheyeIntrinsics, max_iter: int = 20, tol: float = 1e-12):
    """Unit bearing ray for a pixel; inverse of fisheye_project.

    Raises UnprojectError if the distortion inversion does not converge
    within ``max_iter`` Newton iterations.
    """
    px = np.asarray(px, dtype=float)
    mx = (px[0] - K.cx) / K.fx
    my = (px[1] - K.cy) / K.fy
    theta_d = float(np.hypot(mx, my))
    k1, k2, k3, k4 = K.k
    theta, _, ok = _solve_theta(theta_d, k1, k2, k3, k4, max_iter, tol)
    if not ok:
        raise UnprojectError(f"no convergence for pixel {px.tolist()}")
    if theta_d < 1e-15:
        return np.array([0.0, 0.0, 1.0])
    s = np.sin(theta) / theta_d
    ray = np.array([mx * s, my * s, np.cos(theta)])
    return ray / np.linalg.norm(ray)


def project_pinhole(x_cam, K: FisheyeIntrinsics) -> np.ndarray:
    """Undistorted (pinhole-equivalent) projection using fx, fy, cx, cy."""
    x_cam = np.asarray(x_cam, dtype=float)
    if x_cam[2] <= 0.0:
        raise BehindCameraError(f"point has z={x_cam[2]:.6g} <= 0")
    return np.array(
        [
            K.fx * x_cam[0] / x_cam[2] + K.cx,
            K.fy * x_cam[1] / x_cam[2] + K.cy,
        ]
    )


def pixel_to_normalized(px, K: FisheyeIntrinsics) -> np.ndarray:
    """Pinhole-plane pixel -> normalized image coordinates (x/z, y/z)."""
    px = np.asarray(px, dtype=float)
    return np.array([(px[0] - K.cx) / K.fx, (px[1] - K.cy) / K.fy])
