"""diffanalog: differentiable modeling and tuning of analog computing systems.

Declare a parameterized ODE/SDE model of an analog platform (with device
mismatch, transient noise and discrete DAC-style parameters), simulate it on
a fixed time grid, differentiate losses through the solve, and tune the
trainable parameters with Adam. Ships three runnable paradigms: a cellular
nonlinear network edge detector, a coupled-oscillator pattern recognizer and
a transmission-line PUF.
"""

from .backend import backend_name, set_backend
from .errors import (
    AdjointInstabilityError,
    ConfigError,
    DiffAnalogError,
    EvalError,
    ModelError,
    OptimError,
    SolveError,
)

__version__ = "0.1.0"
