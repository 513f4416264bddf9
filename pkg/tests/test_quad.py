import numpy as np
import pytest

from gatesim.geom import yaw_of
from gatesim.quad import (
    GRAVITY,
    CtbrCommand,
    NonFiniteError,
    QuadParams,
    QuadSim,
    TrueState,
    mixer,
    step,
    torques_from_thrusts,
)


@pytest.fixture(scope="module")
def par():
    return QuadParams()


def run_sim(sim, cmd, seconds, dt=1e-3):
    for _ in range(int(round(seconds / dt))):
        sim.step(cmd, dt)
    return sim.state


class TestStep:
    def test_hover_equilibrium(self, par):
        sim = QuadSim(par, TrueState.hover(par))
        s = run_sim(sim, CtbrCommand.hover(par), 1.0)
        assert np.linalg.norm(s.v) < 1e-3
        assert np.linalg.norm(s.p - [0, 0, 1]) < 1e-3

    def test_free_fall(self, par):
        s0 = TrueState(0.0, np.array([1.0, 0, 0, 0]), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(4))
        sim = QuadSim(par, s0)
        s = run_sim(sim, CtbrCommand(0.0, np.zeros(3)), 0.5)
        assert abs(s.v[2] - (-GRAVITY * 0.5)) < 0.01 * GRAVITY * 0.5

    def test_constant_yaw_rate_heading(self, par):
        sim = QuadSim(par, TrueState.hover(par))
        s = run_sim(sim, CtbrCommand(par.hover_thrust, np.array([0.0, 0.0, 2.0])), 1.0)
        assert abs(yaw_of(s.q) - 2.0) < 0.05 * 2.0

    def test_rate_step_settles_fast(self, par):
        sim = QuadSim(par, TrueState.hover(par))
        cmd = CtbrCommand(par.hover_thrust, np.array([5.0, 0.0, 0.0]))
        settled_at = None
        window = []
        for k in range(200):
            s = sim.step(cmd, 1e-3)
            window.append(s.omega[0])
            if len(window) > 20 and all(abs(w - 5.0) < 0.25 for w in window[-20:]):
                settled_at = (k - 19) * 1e-3
                break
        assert settled_at is not None and settled_at < 0.05

    def test_zero_steady_state_rate_error(self, par):
        sim = QuadSim(par, TrueState.hover(par))
        cmd = CtbrCommand(par.hover_thrust, np.array([2.0, 0.0, 0.0]))
        s = run_sim(sim, cmd, 2.0)
        assert abs(s.omega[0] - 2.0) < 5e-3

    def test_horizontal_momentum_conserved(self, par):
        # drag off, zero thrust, zero rotation: vx, vy constant
        v0 = np.array([3.0, -1.0, 0.0])
        s0 = TrueState(0.0, np.array([1.0, 0, 0, 0]), np.zeros(3), v0.copy(), np.zeros(3), np.zeros(4))
        sim = QuadSim(par, s0)
        s = run_sim(sim, CtbrCommand(0.0, np.zeros(3)), 0.5)
        assert np.allclose(s.v[:2], v0[:2], atol=1e-12)

    def test_determinism_bit_identical(self, par):
        rng = np.random.default_rng(0)
        cmds = [
            CtbrCommand(rng.uniform(0, par.max_thrust), rng.uniform(-3, 3, 3))
            for _ in range(300)
        ]
        results = []
        for _ in range(2):
            sim = QuadSim(par, TrueState.hover(par))
            for c in cmds:
                sim.step(c, 1e-3)
            results.append(sim.state)
        a, b = results
        assert np.array_equal(a.p, b.p) and np.array_equal(a.v, b.v)
        assert np.array_equal(a.q, b.q) and np.array_equal(a.rotor_thrust, b.rotor_thrust)

    def test_dt_bounds(self, par):
        sim = QuadSim(par, TrueState.hover(par))
        with pytest.raises(ValueError):
            sim.step(CtbrCommand.hover(par), 0.003)
        with pytest.raises(ValueError):
            sim.step(CtbrCommand.hover(par), 0.0)

    def test_non_finite_command_rejected(self, par):
        sim = QuadSim(par, TrueState.hover(par))
        with pytest.raises(NonFiniteError):
            sim.step(CtbrCommand(np.nan, np.zeros(3)), 1e-3)

    def test_drag_decelerates(self):
        par_d = QuadParams(drag_coeff=(0.5, 0.5, 0.5))
        s0 = TrueState(0.0, np.array([1.0, 0, 0, 0]), np.zeros(3), np.array([5.0, 0, 0]), np.zeros(3), np.zeros(4))
        sim = QuadSim(par_d, s0)
        s = run_sim(sim, CtbrCommand(0.0, np.zeros(3)), 0.5)
        assert s.v[0] < 5.0 - 0.5

    def test_stateless_step_wrapper(self, par):
        s0 = TrueState.hover(par)
        s1 = step(s0, CtbrCommand.hover(par), 1e-3, par)
        assert s1.t == pytest.approx(1e-3)


class TestMixer:
    def test_pure_collective_even_split(self, par):
        th = mixer(par.hover_thrust, np.zeros(3), par)
        assert np.allclose(th, par.hover_thrust / 4)

    def test_zero_collective_pure_roll_clamps_at_floor(self, par):
        th = mixer(0.0, np.array([0.05, 0.0, 0.0]), par)
        assert np.all(th >= 0.0)
        # the two positive-side rotors carry the torque, the others clamp to 0
        assert sorted(th)[0] == 0.0 and sorted(th)[1] == 0.0
        assert th.sum() > 0

    def test_unsaturated_inverse_exact(self, par):
        rng = np.random.default_rng(1)
        for _ in range(200):
            c = rng.uniform(6.0, par.max_thrust * 0.7)
            tau = np.concatenate([rng.uniform(-0.08, 0.08, 2), rng.uniform(-0.02, 0.02, 1)])
            th = mixer(c, tau, par)
            assert np.all(th > 0) and np.all(th < par.max_thrust / 4)
            assert abs(th.sum() - c) < 1e-12
            assert np.abs(torques_from_thrusts(th, par) - tau).max() < 1e-12

    def test_allocation_matrix_rank_4(self, par):
        # unsaturated map (c, tau) -> thrusts is linear with full rank
        basis = np.eye(4)
        cols = []
        base = mixer(par.hover_thrust, np.zeros(3), par)
        for b in basis:
            th = mixer(par.hover_thrust + 0.1 * b[0], 0.01 * b[1:], par)
            cols.append(th - base)
        assert np.linalg.matrix_rank(np.array(cols)) == 4

    def test_saturation_sheds_yaw_first(self, par):
        # huge yaw demand at hover: thrust total preserved, yaw reduced
        c = par.hover_thrust
        th = mixer(c, np.array([0.0, 0.0, 5.0]), par)
        assert np.all(th >= -1e-12)
        assert abs(th.sum() - c) < 1e-9  # collective kept
        tau = torques_from_thrusts(th, par)
        assert 0 < tau[2] < 5.0  # yaw partially shed
        assert np.abs(tau[:2]).max() < 1e-9

    def test_non_finite_rejected(self, par):
        with pytest.raises(NonFiniteError):
            mixer(np.inf, np.zeros(3), par)


def test_params_validation():
    with pytest.raises(ValueError):
        QuadParams(mass=-1.0)
    with pytest.raises(ValueError):
        QuadParams(max_twr=0.5)


def test_params_json_round_trip(tmp_path):
    import json

    par = QuadParams(mass=1.0, inertia=(0.003, 0.003, 0.005))
    path = tmp_path / "quad.json"
    with open(path, "w") as f:
        json.dump({"mass": 1.0, "inertia": [0.003, 0.003, 0.005]}, f)
    loaded = QuadParams.from_json(path)
    assert loaded.mass == par.mass
    assert loaded.inertia == par.inertia
