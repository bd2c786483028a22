"""Composite online change detection for the vessel dynamics.

Two rules run side by side on the measured state/input stream:

* Parameter rule: ridge-regress one-step dynamics matrices on a
  reference window and a test window of the stream, track the norm of
  their difference p_k, and alarm when p_k exceeds c1 times its own
  trailing moving average.
* Tracking rule: compare the mean inner-loop tracking error over the
  most recent N2 samples against the preceding N2 samples and alarm
  when the increase exceeds c2.

A change is claimed when either rule fires.  After an alarm the buffers
reset and a refractory period suppresses re-alarms while the system is
being re-identified.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class WarmUp(RuntimeError):
    """Not enough samples buffered to evaluate the rule."""


@dataclass
class CpdConfig:
    n1: int = 20
    n2: int = 30
    ridge_lambda: float = 1e-2
    moving_avg_span: int = 50
    c1: float = 2.0
    c2: float = 0.15
    state_source: str = "raw-state"  # or "koopman-lifted"
    # moving-average samples required before the parameter rule may
    # alarm; guards against an unsettled baseline right after warm-up
    # or a buffer reset
    min_history: int = 10

    def __post_init__(self) -> None:
        if self.n1 < 2:
            raise ValueError("window size parameter n1 must be at least 2")
        if self.n2 < 1:
            raise ValueError("tracking window length n2 must be at least 1")
        if self.ridge_lambda <= 0.0:
            raise ValueError("ridge regularizer must be positive")
        if self.moving_avg_span < 1:
            raise ValueError("moving average span must be at least 1")
        if self.c1 <= 0.0:
            raise ValueError("ratio threshold c1 must be positive")
        if self.state_source not in ("raw-state", "koopman-lifted"):
            raise ValueError("state_source must be raw-state or koopman-lifted")
        if self.min_history < 1:
            raise ValueError("min_history must be at least 1")


@dataclass
class AlarmReport:
    """Per-step detector verdict plus diagnostics."""

    alarm: str = "none"  # none | parameter | tracking | both
    p_k: float = float("nan")
    p_bar: float = float("nan")
    ratio: float = float("nan")
    track_test_mean: float = float("nan")
    track_ref_mean: float = float("nan")
    warmed_up: bool = False

    @property
    def any(self) -> bool:
        return self.alarm != "none"


def estimate_theta(x: np.ndarray, z: np.ndarray, ridge_lambda: float) -> np.ndarray:
    """Closed-form ridge regression of successors on stacked state/input
    columns: X Z^T (Z Z^T + lambda I)^-1."""
    if ridge_lambda <= 0.0:
        raise ValueError("ridge regularizer must be positive")
    nz = z.shape[0]
    gram = z @ z.T + ridge_lambda * np.eye(nz)
    return np.linalg.solve(gram, z @ x.T).T


def statistic(theta_ref: np.ndarray, theta_test: np.ndarray, norm: str = "fro") -> float:
    """Norm of the difference of the two window estimates."""
    if theta_ref.shape != theta_test.shape:
        raise ValueError("estimates must have equal shapes")
    diff = theta_ref - theta_test
    if norm == "spectral":
        return float(np.linalg.norm(diff, 2))
    return float(np.linalg.norm(diff, "fro"))


def parameter_alarm(p_k: float, history: np.ndarray, span: int, c1: float) -> bool:
    """True iff p_k >= c1 times the mean of the most recent ``span``
    history values (the current p_k excluded)."""
    hist = np.asarray(history, dtype=float)
    if hist.size < 1:
        raise WarmUp("need at least one history sample for the moving average")
    p_bar = float(np.mean(hist[-span:]))
    return p_k >= c1 * p_bar


def tracking_error_alarm(errors: np.ndarray, n2: int, c2: float) -> bool:
    """True iff the mean of the newest n2 errors exceeds the mean of the
    preceding n2 errors by more than c2."""
    err = np.asarray(errors, dtype=float)
    if err.size < 2 * n2:
        raise WarmUp(f"need {2 * n2} buffered tracking errors")
    test = float(np.mean(err[-n2:]))
    ref = float(np.mean(err[-2 * n2 : -n2]))
    return test - ref > c2


class ChangeDetector:
    """Streaming detector over (state, input, tracking error) samples.

    ``observe`` consumes the newest successor state nu[k+1] together
    with the input a[k] that produced it and the current tracking error;
    it indexes the windows exactly as

        X_ref  = [nu[k-2N1+3] ... nu[k-N1+1]]
        X_test = [nu[k-N1+3]  ... nu[k+1]]
        Z_ref  = [xi[k-2N1+2] ... xi[k-N1]]
        Z_test = [xi[k-N1+2]  ... xi[k]]

    with xi[j] = [nu[j]; a[j]], so each X column is the successor of the
    matching Z column and the two windows are separated by one skipped
    pair.  With ``state_source == "koopman-lifted"`` a frozen lift maps
    each nu before buffering.
    """

    def __init__(
        self,
        config: CpdConfig,
        lift_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        auto_reset: bool = True,
    ):
        self.config = config
        if config.state_source == "koopman-lifted" and lift_fn is None:
            raise ValueError("koopman-lifted state source requires a lift function")
        self._lift = lift_fn if config.state_source == "koopman-lifted" else None
        self.auto_reset = auto_reset
        n_keep = 2 * config.n1
        self._nu: deque[np.ndarray] = deque(maxlen=n_keep + 1)
        self._a: deque[np.ndarray] = deque(maxlen=n_keep)
        self._p_history: deque[float] = deque(maxlen=config.moving_avg_span + 1)
        self._errors: deque[float] = deque(maxlen=2 * config.n2)
        self._refractory = 0
        self._primed = False

    def reset(self) -> None:
        self._nu.clear()
        self._a.clear()
        self._p_history.clear()
        self._errors.clear()
        self._primed = False

    def start(self, nu0: np.ndarray) -> None:
        """Register the initial state nu[0] before the first observe call."""
        self._nu.append(self._map_state(nu0))
        self._primed = True

    def _map_state(self, nu: np.ndarray) -> np.ndarray:
        nu = np.asarray(nu, dtype=float)
        return self._lift(nu) if self._lift is not None else nu

    def window_matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Materialize (X_ref, X_test, Z_ref, Z_test) from the buffers."""
        n1 = self.config.n1
        if len(self._nu) < 2 * n1 or len(self._a) < 2 * n1 - 1:
            raise WarmUp(f"need {2 * n1} states buffered before the window rule")
        nus = list(self._nu)
        inputs = list(self._a)
        # nus[i] is nu at some step j and inputs[i] is the input a[j]
        # issued at the same step, so xi[i] = [nu[j]; a[j]] and nus[i+1]
        # is its successor.
        xi = [np.concatenate([nus[i], inputs[i]]) for i in range(len(inputs))]
        w = n1 - 1
        x_test = np.column_stack(nus[-w:])
        z_test = np.column_stack(xi[-w:])
        x_ref = np.column_stack(nus[-2 * w - 1 : -w - 1])
        z_ref = np.column_stack(xi[-2 * w - 1 : -w - 1])
        return x_ref, x_test, z_ref, z_test

    def observe(
        self, nu_next: np.ndarray, a_k: np.ndarray, e_k: float | None
    ) -> AlarmReport:
        """Ingest one sample triple and evaluate both rules.

        ``e_k`` may be None when no meaningful tracking error exists this
        step (e.g. the reference is mid-transient); the tracking buffer
        is left untouched then.
        """
        if not self._primed:
            # first call establishes nu[0] retroactively is impossible;
            # treat the first successor as the starting state
            self.start(nu_next)
            return AlarmReport()
        self._a.append(np.asarray(a_k, dtype=float))
        self._nu.append(self._map_state(nu_next))
        if e_k is not None:
            self._errors.append(float(e_k))

        report = AlarmReport()
        param_fired = False
        track_fired = False

        try:
            x_ref, x_test, z_ref, z_test = self.window_matrices()
            lam = self.config.ridge_lambda
            theta_ref = estimate_theta(x_ref, z_ref, lam)
            theta_test = estimate_theta(x_test, z_test, lam)
            p_k = statistic(theta_ref, theta_test)
            report.p_k = p_k
            if len(self._p_history) >= 1:
                p_bar = float(
                    np.mean(list(self._p_history)[-self.config.moving_avg_span :])
                )
                report.p_bar = p_bar
                report.ratio = p_k / p_bar if p_bar > 0 else float("inf")
                report.warmed_up = True
                param_fired = (
                    len(self._p_history) >= self.config.min_history
                    and p_k >= self.config.c1 * p_bar
                )
            self._p_history.append(p_k)
        except WarmUp:
            pass

        if len(self._errors) >= 2 * self.config.n2:
            err = np.asarray(self._errors, dtype=float)
            report.track_test_mean = float(np.mean(err[-self.config.n2 :]))
            report.track_ref_mean = float(np.mean(err[: self.config.n2]))
            track_fired = (
                report.track_test_mean - report.track_ref_mean > self.config.c2
            )

        if self._refractory > 0:
            self._refractory -= 1
            return report

        if param_fired and track_fired:
            report.alarm = "both"
        elif param_fired:
            report.alarm = "parameter"
        elif track_fired:
            report.alarm = "tracking"

        if report.any and self.auto_reset:
            # retraining follows an alarm; start fresh and hold off
            last = self._nu[-1]
            self.reset()
            self.start(last)
            self._refractory = 2 * self.config.n1
        return report
