"""3-DOF planar surface-vessel simulator.

Implements the standard surface-craft model

    eta_dot = R(psi) * nu
    M * nu_dot + C(nu) * nu + D(nu) * nu = tau + tau_wind

with pose eta = [x, y, psi] in a fixed world frame and body velocities
nu = [u, v, r] (surge, sway, yaw rate).  Conventions: psi is measured
counter-clockwise from the world x-axis, body y points to port, so a
stronger starboard motor produces a positive yaw moment.

The simulator supports scheduled actuator/hull perturbations (motor
efficiency loss, rudder misalignment, added payload, drag change),
first-order gusty wind, Gaussian sensor noise, and a zero-order-hold
motor input delay.  Integration is fixed-step RK4.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np


class NonFiniteState(RuntimeError):
    """Integration produced NaN/Inf; dt too large or parameters unphysical."""


def wrap_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def rotation_matrix(psi: float) -> np.ndarray:
    """Body-to-world rotation acting on (u, v), identity on yaw rate."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class VesselState:
    """Pose [x, y, psi] plus body velocities [u, v, r_yaw]."""

    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    u: float = 0.0
    v: float = 0.0
    r_yaw: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.u, self.v, self.r_yaw])

    @staticmethod
    def from_array(arr: np.ndarray) -> "VesselState":
        return VesselState(*(float(a) for a in arr))

    def eta(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi])

    def nu(self) -> np.ndarray:
        return np.array([self.u, self.v, self.r_yaw])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


@dataclass
class ControlCommand:
    """Normalized port/starboard motor commands, clamped to [-1, 1]."""

    a_port: float = 0.0
    a_star: float = 0.0

    def __post_init__(self) -> None:
        self.a_port = float(min(1.0, max(-1.0, self.a_port)))
        self.a_star = float(min(1.0, max(-1.0, self.a_star)))

    def as_array(self) -> np.ndarray:
        return np.array([self.a_port, self.a_star])


@dataclass
class VesselParams:
    """Inertia, damping, and thruster geometry for a small twin-hull craft.

    Defaults describe a ~180 kg catamaran with added mass folded into M
    and linear+quadratic damping per axis.  All values are overridable
    from the scenario configuration.
    """

    mass_matrix: np.ndarray = field(
        default_factory=lambda: np.diag([250.0, 300.0, 450.0])
    )
    damping_linear: np.ndarray = field(
        default_factory=lambda: np.array([50.0, 150.0, 300.0])
    )
    damping_quadratic: np.ndarray = field(
        default_factory=lambda: np.array([60.0, 250.0, 250.0])
    )
    half_beam: float = 1.22
    thruster_offset_x: float = -1.8
    max_thrust: float = 100.0
    reverse_thrust_frac: float = 0.6
    motor_delay: float = 0.4

    def __post_init__(self) -> None:
        self.mass_matrix = np.asarray(self.mass_matrix, dtype=float)
        self.damping_linear = np.asarray(self.damping_linear, dtype=float)
        self.damping_quadratic = np.asarray(self.damping_quadratic, dtype=float)
        self.validate()

    def validate(self) -> None:
        m = self.mass_matrix
        if m.shape != (3, 3) or not np.allclose(m, m.T):
            raise ValueError("mass matrix must be symmetric 3x3")
        if np.any(np.linalg.eigvalsh(m) <= 0.0):
            raise ValueError("mass matrix must be positive definite")
        if np.any(self.damping_linear < 0.0) or np.any(self.damping_quadratic < 0.0):
            raise ValueError("damping coefficients must be nonnegative")
        if self.motor_delay < 0.0:
            raise ValueError("motor delay must be nonnegative")


@dataclass
class Perturbation:
    """Scheduled change to actuation or hull properties.

    Becomes active at ``activation_time`` and stays active.  A payload
    change enters the mass matrix directly (surge/sway mass plus yaw
    inertia via the parallel-axis term for its lateral offset).
    """

    efficiency_port: float = 1.0
    efficiency_star: float = 1.0
    rudder_angle_port: float = 0.0
    rudder_angle_star: float = 0.0
    added_mass: float = 0.0
    added_mass_offset: float = 0.0
    drag_multiplier: float = 1.0
    activation_time: float = 0.0

    def __post_init__(self) -> None:
        for eff in (self.efficiency_port, self.efficiency_star):
            if not 0.0 <= eff <= 1.0:
                raise ValueError("motor efficiency must lie in [0, 1]")
        if self.activation_time < 0.0:
            raise ValueError("activation time must be nonnegative")

    def active(self, t: float) -> bool:
        return t >= self.activation_time


#: Perturbation equivalent to "no change".
NO_PERTURBATION = Perturbation()


@dataclass
class NoiseConfig:
    """Per-channel Gaussian measurement noise standard deviations."""

    std_pos: float = 0.0
    std_angle: float = 0.0
    std_linvel: float = 0.0
    std_angvel: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.std_pos, self.std_angle, self.std_linvel, self.std_angvel) < 0:
            raise ValueError("noise standard deviations must be nonnegative")


@dataclass
class WindDisturbance:
    """Mean body-frame wind wrench plus low-pass-filtered gusts."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gust_amplitude: float = 0.0
    gust_correlation: float = 10.0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        if self.gust_amplitude > 0.0 and self.gust_correlation <= 0.0:
            raise ValueError("gust correlation time must be positive")


def _motor_force(cmd: float, efficiency: float, params: VesselParams) -> float:
    # Reverse thrust is derated relative to forward.
    scale = params.max_thrust if cmd >= 0.0 else params.max_thrust * params.reverse_thrust_frac
    return efficiency * scale * cmd


def thrust_allocation(
    cmd: ControlCommand, params: VesselParams, pert: Perturbation = NO_PERTURBATION
) -> np.ndarray:
    """Map motor commands to a body wrench [N, N, N*m].

    Each motor thrust acts along a direction rotated by its rudder angle;
    the yaw moment combines the differential surge components at the
    half-beam with the sway components at the thruster longitudinal
    offset.
    """
    f_p = _motor_force(cmd.a_port, pert.efficiency_port, params)
    f_s = _motor_force(cmd.a_star, pert.efficiency_star, params)
    cp, sp = math.cos(pert.rudder_angle_port), math.sin(pert.rudder_angle_port)
    cs, ss = math.cos(pert.rudder_angle_star), math.sin(pert.rudder_angle_star)
    tau_x = f_p * cp + f_s * cs
    tau_y = f_p * sp + f_s * ss
    tau_psi = params.half_beam * (f_s * cs - f_p * cp) + params.thruster_offset_x * (
        f_p * sp + f_s * ss
    )
    return np.array([tau_x, tau_y, tau_psi])


def effective_inertia_damping(
    params: VesselParams, pert: Perturbation, active: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mass matrix and damping with an active perturbation folded in."""
    m = params.mass_matrix
    d_lin = params.damping_linear
    d_quad = params.damping_quadratic
    if active:
        if pert.added_mass != 0.0:
            extra = np.diag(
                [
                    pert.added_mass,
                    pert.added_mass,
                    pert.added_mass * pert.added_mass_offset**2,
                ]
            )
            m = m + extra
        if pert.drag_multiplier != 1.0:
            d_lin = d_lin * pert.drag_multiplier
            d_quad = d_quad * pert.drag_multiplier
    return m, d_lin, d_quad


def _nu_dot(
    nu: np.ndarray,
    tau: np.ndarray,
    m: np.ndarray,
    d_lin: np.ndarray,
    d_quad: np.ndarray,
) -> np.ndarray:
    u, v, r = nu
    m11, m22 = m[0, 0], m[1, 1]
    coriolis = np.array([-m22 * v * r, m11 * u * r, (m22 - m11) * u * v])
    damping = (d_lin + d_quad * np.abs(nu)) * nu
    return np.linalg.solve(m, tau - coriolis - damping)


def integrate_step(
    state: VesselState,
    tau: np.ndarray,
    m: np.ndarray,
    d_lin: np.ndarray,
    d_quad: np.ndarray,
    dt: float,
) -> VesselState:
    """One RK4 step of the coupled kinematics/dynamics under constant tau."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")

    def deriv(x: np.ndarray) -> np.ndarray:
        psi = x[2]
        nu = x[3:]
        eta_dot = rotation_matrix(psi) @ nu
        return np.concatenate([eta_dot, _nu_dot(nu, tau, m, d_lin, d_quad)])

    x0 = state.as_array()
    k1 = deriv(x0)
    k2 = deriv(x0 + 0.5 * dt * k1)
    k3 = deriv(x0 + 0.5 * dt * k2)
    k4 = deriv(x0 + dt * k3)
    x1 = x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x1)):
        raise NonFiniteState("vessel state diverged during integration")
    x1[2] = wrap_angle(x1[2])
    return VesselState.from_array(x1)


class DelayBuffer:
    """Zero-order-hold command history; returns the command issued
    ``delay`` seconds before the queried time (zero before any input)."""

    def __init__(self, delay: float):
        if delay < 0.0:
            raise ValueError("delay must be nonnegative")
        self.delay = delay
        self._history: deque[tuple[float, ControlCommand]] = deque()

    def push(self, t: float, cmd: ControlCommand) -> None:
        self._history.append((t, cmd))

    def get(self, now: float) -> ControlCommand:
        t_eff = now - self.delay
        current = ControlCommand(0.0, 0.0)
        for t_cmd, cmd in self._history:
            if t_cmd <= t_eff + 1e-12:
                current = cmd
            else:
                break
        # Drop entries that can never be queried again.
        while len(self._history) > 1 and self._history[1][0] <= t_eff + 1e-12:
            self._history.popleft()
        return current


def measure(state: VesselState, noise: NoiseConfig, rng: np.random.Generator) -> VesselState:
    """Add independent zero-mean Gaussian noise per channel; rewrap psi."""
    return VesselState(
        x=state.x + noise.std_pos * rng.standard_normal(),
        y=state.y + noise.std_pos * rng.standard_normal(),
        psi=wrap_angle(state.psi + noise.std_angle * rng.standard_normal()),
        u=state.u + noise.std_linvel * rng.standard_normal(),
        v=state.v + noise.std_linvel * rng.standard_normal(),
        r_yaw=state.r_yaw + noise.std_angvel * rng.standard_normal(),
    )


class VesselSimulator:
    """Deterministic, seedable vessel plant stepped at a fixed control rate.

    Owns all mutable state (pose, delay buffer, gust filter, RNG streams);
    independent instances may run in parallel.
    """

    def __init__(
        self,
        params: VesselParams | None = None,
        state: VesselState | None = None,
        noise: NoiseConfig | None = None,
        wind: WindDisturbance | None = None,
        perturbations: list[Perturbation] | None = None,
        seed: int = 0,
        dt: float = 0.05,
        control_rate: float = 10.0,
    ):
        self.params = params if params is not None else VesselParams()
        self.state = state if state is not None else VesselState()
        self.noise = noise if noise is not None else NoiseConfig()
        self.wind = wind if wind is not None else WindDisturbance()
        self.perturbations = list(perturbations) if perturbations else []
        self.dt = dt
        self.control_dt = 1.0 / control_rate
        self.n_sub = max(1, round(self.control_dt / dt))
        if abs(self.n_sub * dt - self.control_dt) > 1e-9:
            raise ValueError("control period must be a multiple of dt")
        self.t = 0.0
        self.delay = DelayBuffer(self.params.motor_delay)
        self.last_applied = ControlCommand(0.0, 0.0)
        self._gust = np.zeros(3)
        seq = np.random.SeedSequence(seed)
        meas_seq, wind_seq = seq.spawn(2)
        self._rng_meas = np.random.default_rng(meas_seq)
        self._rng_wind = np.random.default_rng(wind_seq)

    def _active_perturbation(self, t: float) -> tuple[Perturbation, bool]:
        """Merge all currently active scheduled perturbations."""
        merged = NO_PERTURBATION
        any_active = False
        for p in self.perturbations:
            if p.active(t):
                any_active = True
                merged = replace(
                    merged,
                    efficiency_port=merged.efficiency_port * p.efficiency_port,
                    efficiency_star=merged.efficiency_star * p.efficiency_star,
                    rudder_angle_port=merged.rudder_angle_port + p.rudder_angle_port,
                    rudder_angle_star=merged.rudder_angle_star + p.rudder_angle_star,
                    added_mass=merged.added_mass + p.added_mass,
                    added_mass_offset=max(merged.added_mass_offset, p.added_mass_offset),
                    drag_multiplier=merged.drag_multiplier * p.drag_multiplier,
                )
        return merged, any_active

    def _wind_wrench(self) -> np.ndarray:
        if self.wind.gust_amplitude > 0.0:
            alpha = self.dt / self.wind.gust_correlation
            kick = self.wind.gust_amplitude * math.sqrt(2.0 * alpha)
            self._gust = (1.0 - alpha) * self._gust + kick * self._rng_wind.standard_normal(3)
        return self.wind.mean + self._gust

    def step(self, cmd: ControlCommand) -> VesselState:
        """Advance one control period under ``cmd`` (subject to the motor
        delay) and return the new true state."""
        self.delay.push(self.t, cmd)
        for i in range(self.n_sub):
            applied = self.delay.get(self.t)
            if i == 0:
                self.last_applied = applied
            pert, any_active = self._active_perturbation(self.t)
            tau = thrust_allocation(applied, self.params, pert)
            tau_w = self._wind_wrench()
            m, d_lin, d_quad = effective_inertia_damping(self.params, pert, any_active)
            self.state = integrate_step(self.state, tau + tau_w, m, d_lin, d_quad, self.dt)
            self.t += self.dt
        return self.state

    def measure(self) -> VesselState:
        """Noisy measurement of the current state."""
        return measure(self.state, self.noise, self._rng_meas)

    def kinetic_energy(self) -> float:
        nu = self.state.nu()
        return 0.5 * float(nu @ self.params.mass_matrix @ nu)
