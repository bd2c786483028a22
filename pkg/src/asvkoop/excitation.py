"""Random-walk excitation signals and identification-data collection.

The excitation command for each motor channel is the output of a small
stable linear filter driven by standard Gaussian noise,

    zeta[t+1] = A_z * zeta[t] + B_z * w[t],   xi[t] = C_z * zeta[t],

clamped to the actuator range and held for one filter period (1 s by
default, slower than the control loop so the thruster dynamics do not
dominate the collected data).  Port and starboard use independent
filters plus a shared common-mode component so that both surge and yaw
are excited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .koopman import DataBatch
from .vessel import ControlCommand


class EmptySignal(ValueError):
    """Spectrum requested for a signal with fewer than two samples."""


class RankDeficientData(RuntimeError):
    """Collected batch is not persistently exciting."""


@dataclass
class ExcitationFilter:
    """Stable scalar-output noise-shaping filter with clamped output."""

    a_state: np.ndarray = field(default_factory=lambda: np.array([[0.95]]))
    b_input: np.ndarray = field(default_factory=lambda: np.array([[0.125]]))
    c_output: np.ndarray = field(default_factory=lambda: np.array([[1.0]]))
    period: float = 1.0
    clamp: float = 1.0

    def __post_init__(self) -> None:
        self.a_state = np.atleast_2d(np.asarray(self.a_state, dtype=float))
        self.b_input = np.asarray(self.b_input, dtype=float).reshape(-1, 1)
        self.c_output = np.asarray(self.c_output, dtype=float).reshape(1, -1)
        if np.max(np.abs(np.linalg.eigvals(self.a_state))) >= 1.0:
            raise ValueError("filter state matrix must have spectral radius < 1")
        if self.period < 1.0:
            raise ValueError("filter period must be at least 1 s")
        self.zeta = np.zeros(self.a_state.shape[0])

    def reset(self) -> None:
        self.zeta = np.zeros_like(self.zeta)


def next_excitation(filt: ExcitationFilter, rng: np.random.Generator) -> float:
    """Advance the filter with one Gaussian kick and emit the clamped output."""
    w = rng.standard_normal()
    filt.zeta = filt.a_state @ filt.zeta + filt.b_input[:, 0] * w
    xi = float(filt.c_output[0] @ filt.zeta)
    return min(filt.clamp, max(-filt.clamp, xi))


def power_spectrum(signal: np.ndarray, sample_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided discrete power spectrum normalized so that the total
    power equals the sum of squared samples (Parseval)."""
    x = np.asarray(signal, dtype=float)
    if x.size < 2:
        raise EmptySignal("need at least two samples")
    n = x.size
    spec = np.fft.rfft(x)
    power = np.abs(spec) ** 2 / n
    # interior bins carry both halves of the two-sided spectrum
    if n % 2 == 0:
        power[1:-1] *= 2.0
    else:
        power[1:] *= 2.0
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    return freqs, power


@dataclass
class ExcitationConfig:
    """Two-channel source: independent per-motor filters plus a shared
    common-mode filter (weight < 1) so surge and yaw are both excited."""

    pole: float = 0.95
    gain: float = 0.125
    period: float = 1.0
    clamp: float = 1.0
    common_weight: float = 0.5
    geofence_radius: float = 200.0
    system_bandwidth_hz: float = 0.1


class ExcitationSource:
    """Holds the per-channel filters and the update clock."""

    def __init__(self, config: ExcitationConfig, rng: np.random.Generator):
        self.config = config
        self._rng = rng

        def mk() -> ExcitationFilter:
            return ExcitationFilter(
                a_state=np.array([[config.pole]]),
                b_input=np.array([[config.gain]]),
                c_output=np.array([[1.0]]),
                period=config.period,
                clamp=config.clamp,
            )

        self.port = mk()
        self.star = mk()
        self.common = mk()
        self._last = ControlCommand(0.0, 0.0)
        self._next_update = 0.0

    def command(self, t: float, position: tuple[float, float] = (0.0, 0.0)) -> ControlCommand:
        """Command at time ``t`` (held between filter updates).  Outside the
        geofence radius the common-mode contribution is sign-flipped so the
        run stays bounded."""
        if t >= self._next_update - 1e-9:
            xi_p = next_excitation(self.port, self._rng)
            xi_s = next_excitation(self.star, self._rng)
            xi_c = next_excitation(self.common, self._rng)
            w = self.config.common_weight
            if np.hypot(*position) > self.config.geofence_radius:
                xi_c = -xi_c
            clamp = self.config.clamp
            self._last = ControlCommand(
                min(clamp, max(-clamp, xi_p + w * xi_c)),
                min(clamp, max(-clamp, xi_s + w * xi_c)),
            )
            self._next_update = t + self.config.period
        return self._last


def full_row_rank(stacked: np.ndarray, rel_tol: float = 1e-8) -> bool:
    s = np.linalg.svd(stacked, compute_uv=False)
    return s.size > 0 and s[-1] > rel_tol * s[0]


def collect_dataset(
    plant,
    source: ExcitationSource,
    n_steps: int,
    rank_tol: float = 1e-8,
) -> DataBatch:
    """Drive ``plant`` with the excitation source for ``n_steps`` control
    periods and return aligned (state, input, successor) columns.

    ``plant`` must expose ``t``, ``state.x``/``state.y``, ``measure()``,
    ``step(cmd)``, and ``last_applied`` (the command in effect during the
    step, i.e. the commanded sequence shifted by the known motor delay).
    """
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    states = np.zeros((3, n_steps + 1))
    inputs = np.zeros((2, n_steps))
    states[:, 0] = plant.measure().nu()
    for k in range(n_steps):
        cmd = source.command(plant.t, (plant.state.x, plant.state.y))
        plant.step(cmd)
        inputs[:, k] = plant.last_applied.as_array()
        states[:, k + 1] = plant.measure().nu()
    batch = DataBatch(x=states[:, :-1], x_next=states[:, 1:], u=inputs)
    stacked = np.vstack([batch.x, batch.u])
    if not full_row_rank(stacked, rank_tol):
        raise RankDeficientData(
            "collected batch fails the stacked state/input row-rank check"
        )
    return batch
