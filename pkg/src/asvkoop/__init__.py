"""Adaptive station keeping for an underactuated twin-thruster surface
vessel: lifted-linear (Koopman) system identification, online change
detection, and a cascaded Lyapunov/LQR controller, with a 3-DOF
simulator and scenario harness."""

__version__ = "0.1.0"
