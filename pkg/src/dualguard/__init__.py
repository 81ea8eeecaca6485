"""Dual fault/attack detection for observer-based feedback loops.

The controller side runs a Kalman residual generator that flags faults; the
plant side runs a twin of the controller that flags manipulated control
inputs.  Together they separate faults from kernel (stealthy) attacks.
"""

from .lti import NoiseSpec, StateSpaceModel
from .synthesis import ControllerParams, plant_coprime, solve_kalman, verify_bezout
from .detectors import DecisionLabel, discriminate

__version__ = "0.1.0"
