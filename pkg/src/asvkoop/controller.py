"""Cascaded station-keeping controller.

Outer loop: a switched Lyapunov design on the known kinematics.  Far
from the goal it regulates the distance and the bearing error, steering
the bow at the goal; near the goal it regulates the along-track offset
``l`` to a virtual line through the goal and the heading error to the
goal heading, allowing reverse thrust (the "parallel parking" regime).
Both branches emit a desired surge speed and yaw rate, which are
saturated to the vessel's envelope.

The speed law performs exact feedback linearization of the distance /
along-track dynamics: writing ldot = D*u + N (coefficients from the
goal geometry and the sway/yaw coupling), u_d = (-k_x l - N) / D yields
ldot = -k_x l, so the branch Lyapunov functions decrease wherever the
denominator guard and the saturation are inactive.

Inner loop: LQR with integral action on the lifted-linear model.  The
lifted state is augmented with the accumulated (u, r) tracking error,
the infinite-horizon gain comes from the discrete algebraic Riccati
equation (solved by structured doubling), and the commands are the
clamped feedback -K [integrator; lifted state].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .koopman import KoopmanModel, lift
from .vessel import ControlCommand, wrap_angle

#: selects (u, r) from a reconstructed velocity state
C_SELECT = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class AtGoal(RuntimeError):
    """Bearing to the goal is undefined this close to it."""


class NotConverged(RuntimeError):
    """Riccati iteration failed; the model is likely not stabilizable."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class SingularInnerMatrix(RuntimeError):
    """Defensive: R + B'PB could not be inverted."""


class DimensionMismatch(ValueError):
    """Model and weight dimensions are inconsistent."""


@dataclass
class GoalPose:
    x_g: float
    y_g: float
    psi_g: float = 0.0

    def __post_init__(self) -> None:
        self.psi_g = wrap_angle(self.psi_g)


@dataclass
class OuterGains:
    k_x: float = 0.2
    k_psi: float = 0.8
    d_switch: float = 5.0
    u_min: float = -0.5
    u_max: float = 1.2
    r_min: float = -0.4
    r_max: float = 0.4
    eps: float = 1e-3
    hysteresis: float = 1.25

    def __post_init__(self) -> None:
        if self.k_x <= 0 or self.k_psi <= 0:
            raise ValueError("outer gains must be positive")
        if self.u_min >= self.u_max or self.r_min >= self.r_max:
            raise ValueError("saturation limits must be ordered")
        if self.d_switch <= 0 or self.eps <= 0:
            raise ValueError("switch distance and guard must be positive")


@dataclass
class LqrWeights:
    q_integrator: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(2))
    q_velocity: np.ndarray = field(default_factory=lambda: np.diag([10.0, 0.0, 10.0]))
    r_input: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self) -> None:
        self.q_integrator = np.asarray(self.q_integrator, dtype=float)
        self.q_velocity = np.asarray(self.q_velocity, dtype=float)
        self.r_input = np.asarray(self.r_input, dtype=float)
        if np.any(np.linalg.eigvalsh(self.r_input) <= 0):
            raise ValueError("input weight must be positive definite")
        for q in (self.q_integrator, self.q_velocity):
            if np.any(np.linalg.eigvalsh(q) < -1e-12):
                raise ValueError("state weights must be positive semidefinite")


@dataclass
class InnerState:
    integrator: np.ndarray = field(default_factory=lambda: np.zeros(2))
    i_max: float = 20.0


def goal_bearing(eta: np.ndarray, goal: GoalPose, eps: float = 1e-3) -> float:
    """Four-quadrant bearing from the vehicle to the goal position."""
    dx = goal.x_g - eta[0]
    dy = goal.y_g - eta[1]
    if math.hypot(dx, dy) < eps:
        raise AtGoal("bearing undefined at the goal position")
    return math.atan2(dy, dx)


def along_track(eta: np.ndarray, goal: GoalPose, eps: float = 1e-3) -> float:
    """Signed along-track offset to the goal in the bearing-aligned frame."""
    e_x = eta[0] - goal.x_g
    e_y = eta[1] - goal.y_g
    if math.hypot(e_x, e_y) < eps:
        return 0.0
    psi_c = goal_bearing(eta, goal, eps)
    rel = eta[2] - psi_c
    return e_x * math.cos(rel) + e_y * math.sin(rel)


def _guard(value: float, eps: float) -> float:
    """Floor the magnitude at eps, preserving sign (sign(0) -> +1)."""
    if abs(value) >= eps:
        return value
    return eps if value >= 0.0 else -eps


def outer_far(
    eta: np.ndarray, nu: np.ndarray, goal: GoalPose, gains: OuterGains
) -> tuple[float, float, bool]:
    """Distance/bearing regulation; returns (u_d, r_d, guard_active).

    The surge coefficient in d(V1)/dt is e_x*cos(psi) + e_y*sin(psi) =
    -d_g*cos(psi - psi_c); u_d cancels the sway contribution and yields
    dV1/dt = -k_x d_g^2 - k_psi (psi - psi_c)^2 when unsaturated.
    """
    e_x = eta[0] - goal.x_g
    e_y = eta[1] - goal.y_g
    d_sq = e_x * e_x + e_y * e_y
    psi = eta[2]
    psi_c = goal_bearing(eta, goal, gains.eps)
    r_d = -gains.k_psi * wrap_angle(psi - psi_c)
    denom = e_x * math.cos(psi) + e_y * math.sin(psi)
    guarded = abs(denom) < gains.eps
    denom = _guard(denom, gains.eps)
    sway_coeff = e_y * math.cos(psi) - e_x * math.sin(psi)
    u_d = (-gains.k_x * d_sq - sway_coeff * nu[1]) / denom
    return u_d, r_d, guarded


def outer_near(
    eta: np.ndarray, nu: np.ndarray, goal: GoalPose, gains: OuterGains
) -> tuple[float, float, bool]:
    """Along-track/heading regulation; returns (u_d, r_d, guard_active).

    Exact linearization of ldot = D*u + N with the bearing-rate terms
    included, so dV2/dt = -k_x l^2 - k_psi (psi - psi_g)^2 when the
    guard and saturation are inactive.
    """
    e_x = eta[0] - goal.x_g
    e_y = eta[1] - goal.y_g
    psi = eta[2]
    d_sq = max(e_x * e_x + e_y * e_y, gains.eps * gains.eps)
    r_d = -gains.k_psi * wrap_angle(psi - goal.psi_g)
    if math.hypot(e_x, e_y) < gains.eps:
        return 0.0, r_d, False
    psi_c = goal_bearing(eta, goal, gains.eps)
    rel = psi - psi_c
    c, s = math.cos(rel), math.sin(rel)
    l = e_x * c + e_y * s
    gamma = -e_x * s + e_y * c
    # bearing rate psi_c_dot = alpha*u + beta*v
    alpha = (e_x * math.sin(psi) - e_y * math.cos(psi)) / d_sq
    beta = (e_x * math.cos(psi) + e_y * math.sin(psi)) / d_sq
    denom = math.cos(psi_c) - gamma * alpha
    guarded = abs(denom) < gains.eps
    denom = _guard(denom, gains.eps)
    n_term = nu[1] * (-math.sin(psi_c) - gamma * beta) + nu[2] * gamma
    u_d = (-gains.k_x * l - n_term) / denom
    return u_d, r_d, guarded


def saturate(u_d: float, r_d: float, gains: OuterGains) -> tuple[float, float]:
    u_ref = min(gains.u_max, max(gains.u_min, u_d))
    r_ref = min(gains.r_max, max(gains.r_min, r_d))
    return u_ref, r_ref


def build_augmented(
    model: KoopmanModel, weights: LqrWeights
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Integrator-augmented lifted system and its cost weight."""
    r = model.r_lift
    a, b, c = model.a, model.b, model.c
    if a.shape != (r, r) or c.shape[0] != 3 or b.shape[0] != r:
        raise DimensionMismatch("model matrices do not match the lift dimension")
    m = b.shape[1]
    ci_c = C_SELECT @ c
    a_tilde = np.block([[np.eye(2), ci_c], [np.zeros((r, 2)), a]])
    b_tilde = np.vstack([np.zeros((2, m)), b])
    b_ref = np.vstack([np.eye(2), np.zeros((r, 2))])
    q_tilde = np.block(
        [
            [weights.q_integrator, np.zeros((2, r))],
            [np.zeros((r, 2)), c.T @ weights.q_velocity @ c],
        ]
    )
    return a_tilde, b_tilde, b_ref, q_tilde


def dare_residual(
    p: np.ndarray, a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray
) -> float:
    inner = r + b.T @ p @ b
    rhs = a.T @ p @ a - (a.T @ p @ b) @ np.linalg.solve(inner, b.T @ p @ a) + q
    return float(np.linalg.norm(p - rhs, "fro"))


def solve_dare(
    a: np.ndarray,
    b: np.ndarray,
    q: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> np.ndarray:
    """Fixed point of the discrete Riccati equation via structured
    doubling; each iteration squares the effective horizon, so
    convergence is quadratic for stabilizable systems."""
    n = a.shape[0]
    a_k = a.copy()
    g_k = b @ np.linalg.solve(r, b.T)
    h_k = q.copy()
    for _ in range(max_iter):
        w = np.eye(n) + g_k @ h_k
        try:
            w_inv_a = np.linalg.solve(w, a_k)
            w_inv_g = np.linalg.solve(w, g_k)
        except np.linalg.LinAlgError as exc:
            raise NotConverged(f"doubling step became singular: {exc}") from exc
        a_next = a_k @ w_inv_a
        g_next = g_k + a_k @ w_inv_g @ a_k.T
        h_next = h_k + w_inv_a.T @ (h_k @ a_k)
        h_next = 0.5 * (h_next + h_next.T)
        g_next = 0.5 * (g_next + g_next.T)
        delta = np.linalg.norm(h_next - h_k, "fro")
        a_k, g_k, h_k = a_next, g_next, h_next
        if not np.all(np.isfinite(h_k)):
            raise NotConverged("doubling iteration diverged")
        if delta <= 1e-14 * max(1.0, np.linalg.norm(h_k, "fro")):
            break
    residual = dare_residual(h_k, a, b, q, r)
    if not np.isfinite(residual) or residual > tol * max(1.0, float(np.linalg.norm(h_k, "fro"))):
        raise NotConverged(
            f"Riccati residual {residual:.3e} above tolerance", residual=residual
        )
    return h_k


def feedback_gain(
    p: np.ndarray, a: np.ndarray, b: np.ndarray, r: np.ndarray
) -> np.ndarray:
    """K = (R + B'PB)^-1 B'PA."""
    inner = r + b.T @ p @ b
    try:
        return np.linalg.solve(inner, b.T @ p @ a)
    except np.linalg.LinAlgError as exc:
        raise SingularInnerMatrix(str(exc)) from exc


def inner_step(
    inner: InnerState,
    model: KoopmanModel,
    gain: np.ndarray,
    nu_measured: np.ndarray,
    nu_ref: np.ndarray,
) -> ControlCommand:
    """One LQR step: command from [integrator; lift], then integrator
    update from the reconstructed (u, r) with anti-windup."""
    h = lift(model.net, nu_measured)
    z = np.concatenate([inner.integrator, h])
    raw = -gain @ z
    cmd = ControlCommand(raw[0], raw[1])
    nu_hat = model.c @ h
    err = C_SELECT @ nu_hat - np.asarray(nu_ref, dtype=float)
    # Freeze an integrator only when its channel's authority is truly
    # exhausted: surge when both motors pin at the same sign, yaw when
    # they pin at opposite signs.  Same-sign saturation still leaves
    # differential headroom (one motor can back off), so the yaw
    # integrator keeps winding there.
    hi_p, lo_p = raw[0] > 1.0, raw[0] < -1.0
    hi_s, lo_s = raw[1] > 1.0, raw[1] < -1.0
    freeze = np.array([(hi_p and hi_s) or (lo_p and lo_s), (hi_p and lo_s) or (lo_p and hi_s)])
    updated = np.where(freeze, inner.integrator, inner.integrator + err)
    inner.integrator = np.clip(updated, -inner.i_max, inner.i_max)
    return cmd


@dataclass
class Telemetry:
    """Per-step controller record for the telemetry log."""

    t: float = 0.0
    branch: str = "far"
    d_g: float = 0.0
    l: float = 0.0
    psi_c: float = 0.0
    u_d: float = 0.0
    r_d: float = 0.0
    u_ref: float = 0.0
    r_ref: float = 0.0
    i_u: float = 0.0
    i_r: float = 0.0
    a_p: float = 0.0
    a_s: float = 0.0
    guard: bool = False
    saturated: bool = False


class CascadeController:
    """Holds the switching state, the inner-loop gain for the current
    model, and the integrator.  ``set_model`` swaps the whole model
    atomically (gain recomputed once per swap, integrator reset)."""

    def __init__(
        self,
        goal: GoalPose,
        gains: OuterGains | None = None,
        weights: LqrWeights | None = None,
        model: KoopmanModel | None = None,
    ):
        self.goal = goal
        self.gains = gains if gains is not None else OuterGains()
        self.weights = weights if weights is not None else LqrWeights()
        self.branch = "far"
        self.inner = InnerState()
        self.model: KoopmanModel | None = None
        self.gain: np.ndarray | None = None
        if model is not None:
            self.set_model(model)

    def set_model(self, model: KoopmanModel) -> None:
        """Recompute the inner gain for ``model``; raises NotConverged if
        the Riccati solve fails or the closed loop is unstable."""
        a_t, b_t, _, q_t = build_augmented(model, self.weights)
        p = solve_dare(a_t, b_t, q_t, self.weights.r_input, tol=1e-8)
        k = feedback_gain(p, a_t, b_t, self.weights.r_input)
        rho = np.max(np.abs(np.linalg.eigvals(a_t - b_t @ k)))
        if rho >= 1.0:
            raise NotConverged(f"closed-loop spectral radius {rho:.4f} >= 1")
        self.model = model
        self.gain = k
        self.inner = InnerState(i_max=self.inner.i_max)

    def _select_branch(self, d_g: float) -> str:
        if self.branch == "far" and d_g < self.gains.d_switch:
            self.branch = "near"
        elif self.branch == "near" and d_g > self.gains.hysteresis * self.gains.d_switch:
            self.branch = "far"
        return self.branch

    def control_step(
        self, eta_meas: np.ndarray, nu_meas: np.ndarray, t: float = 0.0
    ) -> tuple[ControlCommand, Telemetry]:
        eta = np.nan_to_num(np.asarray(eta_meas, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)
        nu = np.nan_to_num(np.asarray(nu_meas, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)
        if self.model is None or self.gain is None:
            raise RuntimeError("controller has no model loaded")
        d_g = math.hypot(eta[0] - self.goal.x_g, eta[1] - self.goal.y_g)
        branch = self._select_branch(d_g)
        if branch == "far":
            u_d, r_d, guarded = outer_far(eta, nu, self.goal, self.gains)
        else:
            u_d, r_d, guarded = outer_near(eta, nu, self.goal, self.gains)
        u_ref, r_ref = saturate(u_d, r_d, self.gains)
        cmd = inner_step(self.inner, self.model, self.gain, nu, np.array([u_ref, r_ref]))
        try:
            psi_c = goal_bearing(eta, self.goal, self.gains.eps)
        except AtGoal:
            psi_c = self.goal.psi_g
        tele = Telemetry(
            t=t,
            branch=branch,
            d_g=d_g,
            l=along_track(eta, self.goal, self.gains.eps),
            psi_c=psi_c,
            u_d=u_d,
            r_d=r_d,
            u_ref=u_ref,
            r_ref=r_ref,
            i_u=float(self.inner.integrator[0]),
            i_r=float(self.inner.integrator[1]),
            a_p=cmd.a_port,
            a_s=cmd.a_star,
            guard=guarded,
            saturated=(u_ref != u_d) or (r_ref != r_d),
        )
        return cmd, tele
