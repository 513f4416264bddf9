"""Gate corner detection oracle and gate-relative pose solver.

The detector stands in for the CNN stack: it projects the known gate
corners into the undistorted (pinhole-equivalent) image plane, applies
Gaussian pixel noise and whole-gate dropout, and culls gates that are
out of frustum, beyond range, facing away, or partially visible.
Association is by ground-truth gate id (known-map racing).

The solver recovers the camera-from-gate pose from the four planar
correspondences: a DLT homography, decomposed with the camera-facing
solution selected, then refined by Levenberg-Marquardt on reprojection
error in normalized image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import njit
from .camera import FisheyeIntrinsics
from .gates import Gate, GateMap
from .geom import Pose, quat_from_matrix, rot_matrix

# solver status codes shared between kernels and wrappers
PNP_OK = 0
PNP_DEGENERATE = 1
PNP_NO_CONVERGENCE = 2
PNP_FAR_BEHIND = 3

_MIN_DEPTH = 0.05


class DegenerateConfigurationError(ValueError):
    """Corner correspondences are collinear or duplicated."""


class PnpNoConvergenceError(RuntimeError):
    """LM refinement diverged."""


class FarBehindError(RuntimeError):
    """Solution places the gate behind the camera."""


class MonteCarloError(RuntimeError):
    """Too many Monte-Carlo samples failed to solve."""


_PNP_ERRORS = {
    PNP_DEGENERATE: DegenerateConfigurationError,
    PNP_NO_CONVERGENCE: PnpNoConvergenceError,
    PNP_FAR_BEHIND: FarBehindError,
}


@dataclass(frozen=True)
class CornerDetection:
    """Four inner-corner pixels of one gate in the undistorted plane."""

    gate_id: int
    pixels: np.ndarray  # (4, 2), TL TR BR BL
    visible: np.ndarray  # (4,) bool; detections are only emitted fully visible


@dataclass(frozen=True)
class GateMeasurement:
    t: float
    gate_id: int
    cam_from_gate: Pose
    reproj_rms_px: float


def detect_gates(
    cam_pose: Pose,
    gate_map: GateMap,
    K: FisheyeIntrinsics,
    sigma_px: float = 0.0,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    max_range: float = 12.0,
) -> list[CornerDetection]:
    """Detect all gates visible from the world-frame camera pose.

    A gate is emitted only when the camera is on its approach side and
    all four corners project inside the image with positive depth.
    """
    if rng is None:
        rng = np.random.default_rng()
    T_cw = cam_pose.inverse()
    R_cw = rot_matrix(T_cw.q)
    detections = []
    for gate in gate_map:
        rel = gate.center - cam_pose.t
        if float(rel @ rel) > max_range * max_range:
            continue
        # approach-side cull: detections model the banner face seen when
        # flying toward the gate along its +x normal
        if float(gate.normal @ (cam_pose.t - gate.center)) >= 0.0:
            continue
        corners_c = (R_cw @ gate.corners_world().T).T + T_cw.t
        if np.any(corners_c[:, 2] <= _MIN_DEPTH):
            continue
        px = np.empty((4, 2))
        px[:, 0] = K.fx * corners_c[:, 0] / corners_c[:, 2] + K.cx
        px[:, 1] = K.fy * corners_c[:, 1] / corners_c[:, 2] + K.cy
        if np.any(px[:, 0] < 0) or np.any(px[:, 0] > K.width):
            continue
        if np.any(px[:, 1] < 0) or np.any(px[:, 1] > K.height):
            continue
        if dropout > 0.0 and rng.uniform() < dropout:
            continue
        if sigma_px > 0.0:
            px = px + sigma_px * rng.standard_normal((4, 2))
        detections.append(
            CornerDetection(gate.id, px, np.ones(4, dtype=bool))
        )
    return detections


@njit
def _pnp_kernel(plane_pts, m, max_iter):
    """Solve camera-from-gate pose from 4 planar correspondences.

    plane_pts: (4, 2) gate-frame (y, z) corner coordinates.
    m: (4, 2) normalized image coordinates.
    Returns (R_cam_gate, t, cost, status).
    """
    R = np.eye(3)
    t = np.zeros(3)

    # duplicate / collinear image points
    for i in range(4):
        for j in range(i + 1, 4):
            dx = m[i, 0] - m[j, 0]
            dy = m[i, 1] - m[j, 1]
            if dx * dx + dy * dy < 1e-16:
                return R, t, 0.0, PNP_DEGENERATE
    area2 = 0.0
    for j in range(2, 4):
        ax = m[1, 0] - m[0, 0]
        ay = m[1, 1] - m[0, 1]
        bx = m[j, 0] - m[0, 0]
        by = m[j, 1] - m[0, 1]
        cr = abs(ax * by - ay * bx)
        if cr > area2:
            area2 = cr
    if area2 < 1e-12:
        return R, t, 0.0, PNP_DEGENERATE

    # DLT homography [a b 1] ~ H^-1 ... rows for h s.t. A h = 0
    A = np.zeros((8, 9))
    for i in range(4):
        a = plane_pts[i, 0]
        b = plane_pts[i, 1]
        mx = m[i, 0]
        my = m[i, 1]
        A[2 * i, 0] = a
        A[2 * i, 1] = b
        A[2 * i, 2] = 1.0
        A[2 * i, 6] = -mx * a
        A[2 * i, 7] = -mx * b
        A[2 * i, 8] = -mx
        A[2 * i + 1, 3] = a
        A[2 * i + 1, 4] = b
        A[2 * i + 1, 5] = 1.0
        A[2 * i + 1, 6] = -my * a
        A[2 * i + 1, 7] = -my * b
        A[2 * i + 1, 8] = -my
    _, S, Vh = np.linalg.svd(A)
    if S[6] < 1e-12:
        # two-dimensional null space: configuration degenerate
        return R, t, 0.0, PNP_DEGENERATE
    h = Vh[8].copy()
    H = h.reshape((3, 3))

    h1 = H[:, 0]
    h2 = H[:, 1]
    n1 = np.sqrt(h1[0] ** 2 + h1[1] ** 2 + h1[2] ** 2)
    n2 = np.sqrt(h2[0] ** 2 + h2[1] ** 2 + h2[2] ** 2)
    if n1 < 1e-12 or n2 < 1e-12:
        return R, t, 0.0, PNP_DEGENERATE
    lam = 2.0 / (n1 + n2)
    # camera-facing solution: gate plane points must have positive depth
    if lam * H[2, 2] < 0.0:
        lam = -lam
    r1 = lam * h1
    r2 = lam * h2
    # columns (y_gate, z_gate, then x_gate = y x z) -> orthonormalize
    M = np.empty((3, 3))
    M[:, 0] = np.cross(r1, r2)
    M[:, 1] = r1
    M[:, 2] = r2
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    det = np.linalg.det(U @ Vt)
    D[2, 2] = det
    R = U @ D @ Vt
    t = lam * H[:, 2]

    # Levenberg-Marquardt on reprojection residuals
    X = np.empty((4, 3))
    for i in range(4):
        X[i, 0] = 0.0
        X[i, 1] = plane_pts[i, 0]
        X[i, 2] = plane_pts[i, 1]

    def _cost(Rc, tc):
        c = 0.0
        for i in range(4):
            u = Rc @ X[i] + tc
            if u[2] < 1e-9:
                return 1e30
            rx = u[0] / u[2] - m[i, 0]
            ry = u[1] / u[2] - m[i, 1]
            c += rx * rx + ry * ry
        return c

    cost = _cost(R, t)
    mu = 1e-6
    status = PNP_OK
    for _ in range(max_iter):
        J = np.zeros((8, 6))
        r = np.zeros(8)
        for i in range(4):
            u = R @ X[i] + t
            iz = 1.0 / u[2]
            px = u[0] * iz
            py = u[1] * iz
            r[2 * i] = px - m[i, 0]
            r[2 * i + 1] = py - m[i, 1]
            # d(pi)/du
            dpdu = np.empty((2, 3))
            dpdu[0, 0] = iz
            dpdu[0, 1] = 0.0
            dpdu[0, 2] = -px * iz
            dpdu[1, 0] = 0.0
            dpdu[1, 1] = iz
            dpdu[1, 2] = -py * iz
            # du/d(theta) = -[R X]x (left perturbation), du/dt = I
            w = R @ X[i]
            Sx = np.zeros((3, 3))
            Sx[0, 1] = w[2]
            Sx[0, 2] = -w[1]
            Sx[1, 0] = -w[2]
            Sx[1, 2] = w[0]
            Sx[2, 0] = w[1]
            Sx[2, 1] = -w[0]
            Jth = dpdu @ Sx
            for rr in range(2):
                for cc in range(3):
                    J[2 * i + rr, cc] = Jth[rr, cc]
                    J[2 * i + rr, 3 + cc] = dpdu[rr, cc]
        g = J.T @ r
        JtJ = J.T @ J
        improved = False
        for _try in range(12):
            Hm = JtJ + mu * np.eye(6)
            delta = np.linalg.solve(Hm, -g)
            # left-multiplicative rotation update
            ang = np.sqrt(delta[0] ** 2 + delta[1] ** 2 + delta[2] ** 2)
            if ang < 1e-12:
                dR = np.eye(3)
            else:
                k = delta[:3] / ang
                Kx = np.zeros((3, 3))
                Kx[0, 1] = -k[2]
                Kx[0, 2] = k[1]
                Kx[1, 0] = k[2]
                Kx[1, 2] = -k[0]
                Kx[2, 0] = -k[1]
                Kx[2, 1] = k[0]
                dR = np.eye(3) + np.sin(ang) * Kx + (1.0 - np.cos(ang)) * (Kx @ Kx)
            R_new = dR @ R
            t_new = t + delta[3:]
            cost_new = _cost(R_new, t_new)
            if cost_new < cost:
                step = 0.0
                for d in delta:
                    step += d * d
                step = np.sqrt(step)
                dcost = cost - cost_new
                R = R_new
                t = t_new
                cost = cost_new
                mu = max(mu / 3.0, 1e-12)
                improved = True
                if step < 1e-10 or dcost < 1e-12:
                    return R, t, cost, PNP_OK
                break
            mu *= 10.0
            if mu > 1e12:
                return R, t, cost, PNP_NO_CONVERGENCE
        if not improved:
            # local minimum at current iterate
            break
    if t[2] <= 0.0:
        status = PNP_FAR_BEHIND
    return R, t, cost, status


@njit
def _mc_solve_batch(plane_pts, m_base, noise_norm, max_iter):
    """Re-solve PnP for each perturbed sample; return camera-frame
    gate->camera translations (sample count x 3) and failure count."""
    n = noise_norm.shape[0]
    out = np.zeros((n, 3))
    fails = 0
    for s in range(n):
        m = m_base + noise_norm[s]
        R, t, _, status = _pnp_kernel(plane_pts, m, max_iter)
        if status != PNP_OK:
            fails += 1
            out[s, 0] = np.nan
            continue
        # camera position in gate frame: -R^T t
        out[s] = -(R.T @ t)
    return out, fails


def _normalized_from_pixels(pixels: np.ndarray, K: FisheyeIntrinsics) -> np.ndarray:
    m = np.empty_like(pixels, dtype=float)
    m[:, 0] = (pixels[:, 0] - K.cx) / K.fx
    m[:, 1] = (pixels[:, 1] - K.cy) / K.fy
    return m


def solve_pnp(
    det: CornerDetection,
    gate: Gate,
    K: FisheyeIntrinsics,
    t: float = 0.0,
    max_iter: int = 50,
) -> GateMeasurement:
    """Camera-from-gate pose from a four-corner detection.

    Raises DegenerateConfigurationError, PnpNoConvergenceError, or
    FarBehindError per the solver status.
    """
    plane_pts = gate.corners_gate()[:, 1:3].copy()
    m = _normalized_from_pixels(det.pixels, K)
    R, tr, cost, status = _pnp_kernel(plane_pts, m, max_iter)
    if status != PNP_OK:
        raise _PNP_ERRORS[status](f"pnp failed with status {status} for gate {det.gate_id}")
    # RMS pixel distance over the four corners
    X = gate.corners_gate()
    res_px = np.empty((4, 2))
    for i in range(4):
        u = R @ X[i] + tr
        res_px[i, 0] = K.fx * (u[0] / u[2] - m[i, 0])
        res_px[i, 1] = K.fy * (u[1] / u[2] - m[i, 1])
    rms = float(np.sqrt(np.mean(np.sum(res_px**2, axis=1))))
    return GateMeasurement(t, det.gate_id, Pose(quat_from_matrix(R), tr), rms)


def implied_camera_world(meas: GateMeasurement, gate: Gate) -> Pose:
    """World camera pose implied by a gate-relative measurement."""
    return gate.pose.compose(meas.cam_from_gate.inverse())


def estimate_R_montecarlo(
    gate: Gate,
    cam_pose: Pose,
    K: FisheyeIntrinsics,
    sigma_px: float,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
    pixels: np.ndarray | None = None,
) -> np.ndarray:
    """Monte-Carlo measurement covariance of the world-frame camera
    position recovered by PnP under N(0, sigma_px^2) corner noise.

    ``pixels`` may supply measured corner pixels to perturb; otherwise
    the corners are projected from ``cam_pose``.
    """
    if n_samples < 30:
        raise ValueError("n_samples must be >= 30")
    if rng is None:
        rng = np.random.default_rng()
    if pixels is None:
        T_cw = cam_pose.inverse()
        R_cw = rot_matrix(T_cw.q)
        corners_c = (R_cw @ gate.corners_world().T).T + T_cw.t
        if np.any(corners_c[:, 2] <= _MIN_DEPTH):
            raise FarBehindError("gate corners behind camera")
        pixels = np.empty((4, 2))
        pixels[:, 0] = K.fx * corners_c[:, 0] / corners_c[:, 2] + K.cx
        pixels[:, 1] = K.fy * corners_c[:, 1] / corners_c[:, 2] + K.cy
    plane_pts = gate.corners_gate()[:, 1:3].copy()
    m_base = _normalized_from_pixels(pixels, K)
    noise = sigma_px * rng.standard_normal((n_samples, 4, 2))
    noise[:, :, 0] /= K.fx
    noise[:, :, 1] /= K.fy
    cams_gate, fails = _mc_solve_batch(plane_pts, m_base, noise, 50)
    if fails > 0.2 * n_samples:
        raise MonteCarloError(f"{fails}/{n_samples} Monte-Carlo PnP solves failed")
    good = cams_gate[np.isfinite(cams_gate[:, 0])]
    # rotate gate-frame camera positions into world and take the sample
    # covariance (rotation leaves the spread structure intact)
    R_wg = rot_matrix(gate.pose.q)
    pos_w = (R_wg @ good.T).T
    mean = pos_w.mean(axis=0)
    d = pos_w - mean
    return (d.T @ d) / max(len(good) - 1, 1)
