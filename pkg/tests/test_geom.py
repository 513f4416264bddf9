import numpy as np
import pytest

from gatesim.geom import (
    Pose,
    floor_spd,
    min_eigenvalue,
    quat_conj,
    quat_from_rotvec,
    quat_from_yaw,
    quat_integrate,
    quat_mult,
    quat_normalize,
    quat_to_rotvec,
    rot_matrix,
    rotations_equal,
    so3_right_jacobian,
    symmetrize,
    yaw_of,
)


def random_quat(rng):
    return quat_from_rotvec(rng.uniform(-2, 2, 3))


class TestQuaternion:
    def test_integrate_zero_rate(self):
        q = np.array([1.0, 0, 0, 0])
        out = quat_integrate(q, np.zeros(3), 0.1)
        assert np.allclose(out, q, atol=1e-15)

    def test_integrate_half_turn_yaw(self):
        out = quat_integrate(np.array([1.0, 0, 0, 0]), np.array([0, 0, np.pi]), 1.0)
        # 180 degree yaw: x-axis maps to -x
        R = rot_matrix(out)
        assert np.allclose(R @ [1, 0, 0], [-1, 0, 0], atol=1e-12)

    def test_integrate_matches_constant_rate_closed_form(self):
        # 1000 small steps against the single exponential of the same
        # constant body rate
        w = np.array([0.1, 0.2, 0.3])
        q = np.array([1.0, 0, 0, 0])
        for _ in range(1000):
            q = quat_integrate(q, w, 1e-3)
        q_ref = quat_from_rotvec(w)
        assert np.linalg.norm(q - q_ref) < 1e-6

    def test_unit_norm_preserved(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            q = quat_integrate(random_quat(rng), rng.uniform(-20, 20, 3), 1e-3)
            assert abs(np.linalg.norm(q) - 1.0) < 1e-9

    def test_double_cover(self):
        rng = np.random.default_rng(4)
        q = random_quat(rng)
        assert rotations_equal(q, -q)
        assert np.allclose(rot_matrix(q), rot_matrix(-q), atol=1e-12)

    def test_composition_associative(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a, b, c = (random_quat(rng) for _ in range(3))
            left = quat_mult(quat_mult(a, b), c)
            right = quat_mult(a, quat_mult(b, c))
            assert np.abs(left - right).max() < 1e-12

    def test_log_exp_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            phi = rng.uniform(-1, 1, 3)
            back = quat_to_rotvec(quat_from_rotvec(phi))
            assert np.allclose(back, phi, atol=1e-10)

    def test_log_takes_shortest_arc(self):
        phi = np.array([0.0, 0.0, 0.3])
        q = -quat_from_rotvec(phi)  # other cover
        assert np.allclose(quat_to_rotvec(q), phi, atol=1e-12)

    def test_yaw_helpers(self):
        q = quat_from_yaw(0.7)
        assert abs(yaw_of(q) - 0.7) < 1e-12

    def test_right_jacobian_identity_limit(self):
        Jr = so3_right_jacobian(np.zeros(3))
        assert np.allclose(Jr, np.eye(3), atol=1e-12)

    def test_right_jacobian_against_finite_difference(self):
        # exp(phi + d) ~= exp(phi) exp(Jr d)
        rng = np.random.default_rng(7)
        phi = rng.uniform(-1, 1, 3)
        Jr = so3_right_jacobian(phi)
        eps = 1e-6
        for j in range(3):
            d = np.zeros(3)
            d[j] = eps
            lhs = quat_mult(quat_conj(quat_from_rotvec(phi)), quat_from_rotvec(phi + d))
            col = quat_to_rotvec(lhs) / eps
            assert np.allclose(col, Jr[:, j], atol=1e-5)

    def test_normalize_degenerate(self):
        out = quat_normalize(np.zeros(4))
        assert np.allclose(out, [1, 0, 0, 0])


class TestPose:
    def test_inverse_compose_identity(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            T = Pose(random_quat(rng), rng.uniform(-5, 5, 3))
            I = T.inverse().compose(T)
            assert np.linalg.norm(I.t) < 1e-9
            assert rotations_equal(I.q, np.array([1.0, 0, 0, 0]), tol=1e-9)

    def test_apply_matches_compose(self):
        rng = np.random.default_rng(9)
        A = Pose(random_quat(rng), rng.uniform(-2, 2, 3))
        B = Pose(random_quat(rng), rng.uniform(-2, 2, 3))
        x = rng.uniform(-1, 1, 3)
        assert np.allclose(A.compose(B).apply(x), A.apply(B.apply(x)), atol=1e-12)


class TestCovarianceUtils:
    def test_symmetrize_idempotent(self):
        rng = np.random.default_rng(10)
        P = rng.standard_normal((6, 6))
        S = symmetrize(P)
        assert np.array_equal(symmetrize(S), S)
        assert np.abs(S - S.T).max() < 1e-15

    def test_floor_spd(self):
        P = np.diag([1.0, -0.5, 2.0])
        F = floor_spd(P)
        assert min_eigenvalue(F) >= -1e-12
        # PSD input untouched
        G = np.diag([1.0, 2.0, 3.0])
        assert np.allclose(floor_spd(G), G)

    def test_floor_preserved_by_propagation(self):
        from gatesim.drift_kf import DriftState, propagate

        s = DriftState()
        for _ in range(100):
            s = propagate(s, 1 / 30, 8.0)
            assert min_eigenvalue(s.P) >= -1e-10
            assert np.abs(s.P - s.P.T).max() < 1e-10
