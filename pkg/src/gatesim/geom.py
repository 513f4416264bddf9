"""Rotations, rigid transforms, and covariance utilities.

Conventions used everywhere in this package:

- Quaternions are Hamilton, scalar-first ``[w, x, y, z]``, unit norm,
  and passive world<-body: ``rot_matrix(q) @ v_body`` gives the vector
  in world coordinates.
- The world frame is z-up with gravity along -z.
- Small rotations live in so(3) as rotation vectors (axis * angle, rad).

Quaternions and vectors are plain float64 numpy arrays so the same
functions are usable from jitted kernels and regular Python.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import njit

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@njit
def quat_normalize(q):
    """Return q scaled to unit norm (identity for a near-zero input)."""
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    out = np.empty(4)
    if n < 1e-300:
        out[0] = 1.0
        out[1] = 0.0
        out[2] = 0.0
        out[3] = 0.0
        return out
    out[0] = q[0] / n
    out[1] = q[1] / n
    out[2] = q[2] / n
    out[3] = q[3] / n
    return out


@njit
def quat_mult(a, b):
    """Hamilton product a (x) b."""
    out = np.empty(4)
    out[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    out[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    out[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    out[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]
    return out


@njit
def quat_conj(q):
    out = np.empty(4)
    out[0] = q[0]
    out[1] = -q[1]
    out[2] = -q[2]
    out[3] = -q[3]
    return out


@njit
def quat_from_rotvec(phi):
    """Exponential map: rotation vector (rad) -> unit quaternion."""
    angle = np.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    out = np.empty(4)
    if angle < 1e-12:
        # second-order series keeps the map smooth through zero
        out[0] = 1.0 - angle * angle / 8.0
        s = 0.5 - angle * angle / 48.0
        out[1] = phi[0] * s
        out[2] = phi[1] * s
        out[3] = phi[2] * s
        return quat_normalize(out)
    half = 0.5 * angle
    s = np.sin(half) / angle
    out[0] = np.cos(half)
    out[1] = phi[0] * s
    out[2] = phi[1] * s
    out[3] = phi[2] * s
    return out


@njit
def quat_to_rotvec(q):
    """Logarithm map: unit quaternion -> rotation vector, shortest arc."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    vn = np.sqrt(x * x + y * y + z * z)
    out = np.empty(3)
    if vn < 1e-12:
        # small-angle: phi ~= 2*v/w
        out[0] = 2.0 * x / w
        out[1] = 2.0 * y / w
        out[2] = 2.0 * z / w
        return out
    angle = 2.0 * np.arctan2(vn, w)
    s = angle / vn
    out[0] = x * s
    out[1] = y * s
    out[2] = z * s
    return out


@njit
def quat_integrate(q, omega, dt):
    """Advance q by body rate omega (rad/s) held constant over dt seconds.

    Right-multiplication by the exponential of omega*dt, which is exact
    for a constant body rate.  The result is renormalized.
    """
    phi = np.empty(3)
    phi[0] = omega[0] * dt
    phi[1] = omega[1] * dt
    phi[2] = omega[2] * dt
    return quat_normalize(quat_mult(q, quat_from_rotvec(phi)))


@njit
def rot_matrix(q):
    """3x3 rotation matrix of q (maps body vectors to world)."""
    w, x, y, z = q[0], q[1], q[2], q[3]
    xx = x * x
    yy = y * y
    zz = z * z
    wx = w * x
    wy = w * y
    wz = w * z
    xy = x * y
    xz = x * z
    yz = y * z
    R = np.empty((3, 3))
    R[0, 0] = 1.0 - 2.0 * (yy + zz)
    R[0, 1] = 2.0 * (xy - wz)
    R[0, 2] = 2.0 * (xz + wy)
    R[1, 0] = 2.0 * (xy + wz)
    R[1, 1] = 1.0 - 2.0 * (xx + zz)
    R[1, 2] = 2.0 * (yz - wx)
    R[2, 0] = 2.0 * (xz - wy)
    R[2, 1] = 2.0 * (yz + wx)
    R[2, 2] = 1.0 - 2.0 * (xx + yy)
    return R


@njit
def quat_from_matrix(R):
    """Unit quaternion of a rotation matrix (Shepperd's method)."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    q = np.empty(4)
    if trace > 0.0:
        s = np.sqrt(trace + 1.0) * 2.0
        q[0] = 0.25 * s
        q[1] = (R[2, 1] - R[1, 2]) / s
        q[2] = (R[0, 2] - R[2, 0]) / s
        q[3] = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q[0] = (R[2, 1] - R[1, 2]) / s
        q[1] = 0.25 * s
        q[2] = (R[0, 1] + R[1, 0]) / s
        q[3] = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q[0] = (R[0, 2] - R[2, 0]) / s
        q[1] = (R[0, 1] + R[1, 0]) / s
        q[2] = 0.25 * s
        q[3] = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q[0] = (R[1, 0] - R[0, 1]) / s
        q[1] = (R[0, 2] + R[2, 0]) / s
        q[2] = (R[1, 2] + R[2, 1]) / s
        q[3] = 0.25 * s
    return quat_normalize(q)


@njit
def rotate(q, v):
    """Rotate vector v by quaternion q (body -> world)."""
    return rot_matrix(q) @ v


@njit
def quat_error(q_ref, q):
    """Rotation vector e such that q = q_ref (x) exp(e), shortest arc."""
    return quat_to_rotvec(quat_mult(quat_conj(q_ref), q))


@njit
def yaw_of(q):
    """Heading angle (rad) of the body x-axis projected on the world xy plane."""
    R = rot_matrix(q)
    return np.arctan2(R[1, 0], R[0, 0])


@njit
def quat_from_yaw(yaw):
    q = np.empty(4)
    q[0] = np.cos(0.5 * yaw)
    q[1] = 0.0
    q[2] = 0.0
    q[3] = np.sin(0.5 * yaw)
    return q


@njit
def skew(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@njit
def so3_right_jacobian(phi):
    """Right Jacobian of SO(3) at rotation vector phi.

    Relates additive perturbations of the rotation vector to local
    (right-multiplicative) rotation perturbations:
    exp(phi + d) ~= exp(phi) exp(Jr(phi) d).
    """
    theta = np.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    S = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * S + (S @ S) / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * S + b * (S @ S)


def rotations_equal(q1, q2, tol=1e-9):
    """True if q1 and q2 represent the same rotation (double cover aware)."""
    return 1.0 - abs(float(np.dot(q1, q2))) <= tol


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_out = rot_matrix(q) @ x_in + t."""

    q: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(QUAT_IDENTITY.copy(), np.zeros(3))

    def apply(self, x) -> np.ndarray:
        return rot_matrix(self.q) @ np.asarray(x, dtype=float) + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply `other` first, then `self`."""
        return Pose(
            quat_normalize(quat_mult(self.q, other.q)),
            rot_matrix(self.q) @ other.t + self.t,
        )

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(qi, -(rot_matrix(qi) @ self.t))


def symmetrize(P: np.ndarray) -> np.ndarray:
    """Symmetric part of P; idempotent."""
    return 0.5 * (P + P.T)


def min_eigenvalue(P: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(P)).min())


def floor_spd(P: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Project a symmetric matrix onto {eigenvalues >= floor}.

    Used as a safety net after covariance updates; a no-op for matrices
    that are already PSD.
    """
    P = symmetrize(P)
    w, V = np.linalg.eigh(P)
    if w.min() >= floor:
        return P
    w = np.maximum(w, floor)
    return symmetrize(V @ np.diag(w) @ V.T)
