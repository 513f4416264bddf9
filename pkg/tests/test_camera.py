import numpy as np
import pytest

from gatesim.camera import (
    BehindCameraError,
    FisheyeIntrinsics,
    UnprojectError,
    _solve_theta,
    fisheye_project,
    fisheye_unproject,
    pixel_to_normalized,
    project_pinhole,
)


@pytest.fixture(scope="module")
def K():
    return FisheyeIntrinsics.default()


def random_in_fov_ray(rng, theta_max=0.9):
    theta = rng.uniform(0, theta_max)
    phi = rng.uniform(0, 2 * np.pi)
    return np.array(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
    )


def test_axial_point_maps_to_principal_point(K):
    px = fisheye_project(np.array([0.0, 0.0, 5.0]), K)
    assert np.allclose(px, [K.cx, K.cy], atol=1e-12)


def test_pure_equidistant_radius():
    # all k = 0, fx = fy = f: radius is exactly f * theta
    K0 = FisheyeIntrinsics(300.0, 300.0, 320.0, 240.0, (0, 0, 0, 0), 640, 480)
    theta = 0.5
    ray = np.array([np.sin(theta), 0.0, np.cos(theta)])
    px = fisheye_project(ray * 3.0, K0)
    r = np.hypot(px[0] - K0.cx, px[1] - K0.cy)
    assert abs(r - 300.0 * theta) < 1e-10


def test_behind_camera_raises(K):
    with pytest.raises(BehindCameraError):
        fisheye_project(np.array([0.1, 0.0, -1.0]), K)
    with pytest.raises(BehindCameraError):
        project_pinhole(np.array([0.1, 0.0, 0.0]), K)


def test_round_trip_many_rays(K):
    # 1e4 random in-FOV rays, pixel round-trip under 1e-9 px
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        ray = random_in_fov_ray(rng)
        px = fisheye_project(ray * rng.uniform(0.5, 20.0), K)
        ray2 = fisheye_unproject(px, K)
        px2 = fisheye_project(ray2, K)
        worst = max(worst, float(np.abs(px2 - px).max()))
    assert worst < 1e-9


def test_unproject_principal_point(K):
    ray = fisheye_unproject(np.array([K.cx, K.cy]), K)
    assert np.allclose(ray, [0, 0, 1], atol=1e-12)
    assert abs(np.linalg.norm(ray) - 1.0) < 1e-12


def test_unproject_unit_norm(K):
    rng = np.random.default_rng(1)
    for _ in range(100):
        ray = random_in_fov_ray(rng)
        px = fisheye_project(ray, K)
        out = fisheye_unproject(px, K)
        assert abs(np.linalg.norm(out) - 1.0) < 1e-12


def test_strong_distortion_edge_pixel_iterations():
    # strong k1 lens, edge-of-image pixel: Newton stays within the
    # 20-iteration budget (recorded: converges in well under 10)
    Ks = FisheyeIntrinsics(280.0, 280.0, 320.0, 240.0, (0.08, 0.01, 0, 0), 640, 480)
    mx = (639.0 - Ks.cx) / Ks.fx
    my = (0.0 - Ks.cy) / Ks.fy
    theta_d = float(np.hypot(mx, my))
    theta, iters, ok = _solve_theta(theta_d, *Ks.k, 20, 1e-12)
    assert ok
    assert iters <= 20
    ray = fisheye_unproject(np.array([639.0, 0.0]), Ks)
    px = fisheye_project(ray, Ks)
    assert np.allclose(px, [639.0, 0.0], atol=1e-9)


def test_unproject_failure_far_outside_range():
    # a pixel implying theta_d far beyond any invertible angle
    Ks = FisheyeIntrinsics(100.0, 100.0, 320.0, 240.0, (-0.2, 0.0, 0.0, 0.0), 640, 480)
    with pytest.raises(UnprojectError):
        fisheye_unproject(np.array([5000.0, 240.0]), Ks)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        FisheyeIntrinsics(-1.0, 300.0, 320, 240, (0, 0, 0, 0), 640, 480)
    with pytest.raises(ValueError):
        FisheyeIntrinsics(300.0, 300.0, 900, 240, (0, 0, 0, 0), 640, 480)


def test_json_round_trip(tmp_path, K):
    path = tmp_path / "cam.json"
    K.to_json(path)
    K2 = FisheyeIntrinsics.from_json(path)
    assert K2 == K


def test_pinhole_normalized_round_trip(K):
    x = np.array([0.3, -0.2, 2.0])
    px = project_pinhole(x, K)
    m = pixel_to_normalized(px, K)
    assert np.allclose(m, [x[0] / x[2], x[1] / x[2]], atol=1e-12)
