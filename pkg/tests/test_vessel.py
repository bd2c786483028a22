import math

import numpy as np
import pytest
from scipy.optimize import brentq

from asvkoop.vessel import (
    ControlCommand,
    DelayBuffer,
    NoiseConfig,
    Perturbation,
    VesselParams,
    VesselSimulator,
    VesselState,
    WindDisturbance,
    measure,
    rotation_matrix,
    thrust_allocation,
    wrap_angle,
)


def make_sim(**kwargs):
    kwargs.setdefault("seed", 7)
    return VesselSimulator(**kwargs)


class TestRotation:
    def test_zero_angle_identity(self):
        assert np.allclose(rotation_matrix(0.0), np.eye(3))

    def test_quarter_turn(self):
        out = rotation_matrix(math.pi / 2) @ np.array([1.0, 0.0, 0.0])
        assert np.allclose(out, [0.0, 1.0, 0.0], atol=1e-12)

    def test_orthogonality(self):
        for psi in np.linspace(-math.pi, math.pi, 17):
            r = rotation_matrix(psi)
            assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
            assert np.isclose(np.linalg.det(r), 1.0)
            nu = np.array([1.3, -0.4, 0.2])
            assert np.isclose(
                np.linalg.norm((r @ nu)[:2]), np.linalg.norm(nu[:2])
            )


class TestThrustAllocation:
    def test_zero_command(self):
        tau = thrust_allocation(ControlCommand(0, 0), VesselParams())
        assert np.allclose(tau, 0.0)

    def test_symmetric_command_no_yaw(self):
        tau = thrust_allocation(ControlCommand(0.7, 0.7), VesselParams())
        assert np.isclose(tau[2], 0.0)
        assert tau[0] > 0.0 and np.isclose(tau[1], 0.0)

    def test_rudder_quarter_turn_full_sway(self):
        params = VesselParams()
        pert = Perturbation(rudder_angle_star=math.pi / 2)
        tau = thrust_allocation(ControlCommand(0.0, 1.0), params, pert)
        assert np.isclose(tau[0], 0.0, atol=1e-12)
        assert np.isclose(tau[1], params.max_thrust)

    def test_efficiency_scales_force(self):
        params = VesselParams()
        pert = Perturbation(efficiency_star=0.8)
        tau = thrust_allocation(ControlCommand(0.0, 1.0), params, pert)
        assert np.isclose(tau[0], 0.8 * params.max_thrust)

    def test_reverse_derated(self):
        params = VesselParams()
        tau = thrust_allocation(ControlCommand(-1.0, -1.0), params)
        assert np.isclose(tau[0], -2 * params.reverse_thrust_frac * params.max_thrust)


class TestStep:
    def test_equilibrium_at_rest(self):
        sim = make_sim()
        for _ in range(50):
            sim.step(ControlCommand(0, 0))
        assert np.allclose(sim.state.as_array(), 0.0)

    def test_terminal_surge_speed_matches_drag_balance(self):
        # Independent oracle: root of d_quad*u^2 + d_lin*u = total thrust.
        params = VesselParams(motor_delay=0.0)
        tau_u = 2 * params.max_thrust
        d1, d2 = params.damping_linear[0], params.damping_quadratic[0]
        u_term = brentq(lambda u: d2 * u * u + d1 * u - tau_u, 0.0, 50.0)
        sim = make_sim(params=params)
        for _ in range(600):  # 60 s at 10 Hz
            sim.step(ControlCommand(1.0, 1.0))
        assert abs(sim.state.u - u_term) / u_term < 0.01
        # straight-line motion
        assert abs(sim.state.y) < 1e-6 and abs(sim.state.psi) < 1e-9

    def test_differential_thrust_yaw_sign(self):
        # Stronger starboard motor -> positive yaw rate in this convention.
        sim = make_sim(params=VesselParams(motor_delay=0.0))
        for _ in range(100):
            sim.step(ControlCommand(0.0, 1.0))
        assert sim.state.r_yaw > 0.0
        sim2 = make_sim(params=VesselParams(motor_delay=0.0))
        for _ in range(100):
            sim2.step(ControlCommand(1.0, 0.0))
        assert sim2.state.r_yaw < 0.0
        assert abs(sim2.state.x) < 50.0 and abs(sim2.state.y) < 50.0

    def test_energy_dissipates_unforced(self):
        sim = make_sim(state=VesselState(u=1.5, v=0.4, r_yaw=0.3))
        energy = [sim.kinetic_energy()]
        for _ in range(200):
            sim.step(ControlCommand(0, 0))
            energy.append(sim.kinetic_energy())
        diffs = np.diff(energy)
        assert np.all(diffs <= 1e-12)

    def test_halving_dt_endpoint_converged(self):
        def endpoint(dt):
            sim = make_sim(params=VesselParams(motor_delay=0.0), dt=dt)
            for i in range(600):
                # time-varying but deterministic command pattern
                c = 0.5 + 0.5 * math.sin(0.02 * i)
                sim.step(ControlCommand(c, 0.8 * c))
            return sim.state.as_array()

        coarse = endpoint(0.05)
        fine = endpoint(0.025)
        scale = max(1.0, float(np.max(np.abs(fine))))
        assert np.max(np.abs(coarse - fine)) / scale < 1e-3

    def test_inactive_perturbation_identical_trajectory(self):
        pert = Perturbation(efficiency_star=0.5, activation_time=1e6)
        sims = [make_sim(), make_sim(perturbations=[pert])]
        for _ in range(100):
            states = [s.step(ControlCommand(0.6, 0.4)).as_array() for s in sims]
        assert np.array_equal(states[0], states[1])

    def test_active_perturbation_changes_trajectory(self):
        pert = Perturbation(efficiency_star=0.5, activation_time=2.0)
        a = make_sim()
        b = make_sim(perturbations=[pert])
        for _ in range(100):
            sa = a.step(ControlCommand(0.8, 0.8))
            sb = b.step(ControlCommand(0.8, 0.8))
        assert not np.allclose(sa.as_array(), sb.as_array())

    def test_added_mass_slows_acceleration(self):
        params = VesselParams(motor_delay=0.0)
        light = make_sim(params=params)
        heavy = make_sim(
            params=params,
            perturbations=[Perturbation(added_mass=100.0, added_mass_offset=0.5)],
        )
        for _ in range(30):
            light.step(ControlCommand(1, 1))
            heavy.step(ControlCommand(1, 1))
        assert heavy.state.u < light.state.u

    def test_determinism_bit_identical(self):
        def run():
            sim = make_sim(
                noise=NoiseConfig(0.18, 0.008, 0.013, 0.008, seed=3),
                wind=WindDisturbance(mean=[2.0, 1.0, 0.0], gust_amplitude=1.0),
                seed=42,
            )
            traj = []
            for i in range(80):
                sim.step(ControlCommand(math.sin(i * 0.1), 0.5))
                traj.append(sim.measure().as_array())
            return np.array(traj)

        assert np.array_equal(run(), run())

    def test_psi_stays_wrapped(self):
        sim = make_sim(params=VesselParams(motor_delay=0.0))
        for _ in range(400):
            sim.step(ControlCommand(-0.2, 1.0))
            assert -math.pi < sim.state.psi <= math.pi


class TestDelayBuffer:
    def test_zero_delay_passthrough(self):
        buf = DelayBuffer(0.0)
        buf.push(0.0, ControlCommand(0.3, -0.2))
        out = buf.get(0.0)
        assert out.a_port == pytest.approx(0.3)

    def test_step_command_delayed(self):
        buf = DelayBuffer(0.4)
        buf.push(0.0, ControlCommand(1.0, 1.0))
        assert buf.get(0.0).a_port == 0.0
        assert buf.get(0.39).a_port == 0.0
        assert buf.get(0.4).a_port == 1.0
        assert buf.get(1.0).a_port == 1.0

    def test_constant_history_steady(self):
        buf = DelayBuffer(0.4)
        for k in range(20):
            buf.push(0.1 * k, ControlCommand(0.5, 0.5))
        assert buf.get(2.0).a_star == pytest.approx(0.5)

    def test_simulator_applies_delay(self):
        sim = make_sim()  # default 0.4 s delay
        for _ in range(4):  # 0.4 s at 10 Hz: zero command still in effect
            sim.step(ControlCommand(1, 1))
        assert sim.state.u == 0.0
        sim.step(ControlCommand(1, 1))
        assert sim.state.u > 0.0


class TestMeasure:
    def test_noiseless_measurement_equals_state(self):
        state = VesselState(1.0, -2.0, 0.5, 0.3, 0.1, -0.05)
        rng = np.random.default_rng(0)
        out = measure(state, NoiseConfig(), rng)
        assert np.array_equal(out.as_array(), state.as_array())

    def test_position_noise_std(self):
        rng = np.random.default_rng(12345)
        cfg = NoiseConfig(std_pos=0.180)
        xs = np.array(
            [measure(VesselState(), cfg, rng).x for _ in range(100_000)]
        )
        assert abs(np.std(xs) - 0.180) / 0.180 < 0.03

    def test_identical_seed_identical_noise(self):
        cfg = NoiseConfig(0.1, 0.01, 0.01, 0.01)
        a = measure(VesselState(), cfg, np.random.default_rng(9))
        b = measure(VesselState(), cfg, np.random.default_rng(9))
        assert np.array_equal(a.as_array(), b.as_array())

    def test_measured_psi_wrapped(self):
        rng = np.random.default_rng(1)
        cfg = NoiseConfig(std_angle=0.5)
        for _ in range(200):
            out = measure(VesselState(psi=math.pi), cfg, rng)
            assert -math.pi < out.psi <= math.pi


class TestValidation:
    def test_command_clamped(self):
        cmd = ControlCommand(4.0, -3.0)
        assert cmd.a_port == 1.0 and cmd.a_star == -1.0

    def test_bad_mass_matrix_rejected(self):
        with pytest.raises(ValueError):
            VesselParams(mass_matrix=np.diag([1.0, -1.0, 1.0]))

    def test_negative_damping_rejected(self):
        with pytest.raises(ValueError):
            VesselParams(damping_linear=np.array([-1.0, 0.0, 0.0]))

    def test_bad_efficiency_rejected(self):
        with pytest.raises(ValueError):
            Perturbation(efficiency_port=1.5)

    def test_wrap_angle_range(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
        assert wrap_angle(0.0) == 0.0
