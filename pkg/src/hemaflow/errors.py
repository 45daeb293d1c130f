"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
numerical failures exit 3, I/O failures exit 4.
"""


class ConfigError(Exception):
    """Malformed or inconsistent configuration input."""


class NumericalError(Exception):
    """A solver or simulator produced an unusable result."""


class CFLError(NumericalError):
    """Explicit time step violates the upwind stability bound."""


class MildConvergenceError(NumericalError):
    """Per-step fixed-point iteration failed to converge."""


class FlowAccuracyError(NumericalError):
    """Characteristic integration missed its accuracy target."""
