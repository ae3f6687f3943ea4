"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and NumericalError to exit code 3;
everything else is a genuine bug and propagates.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration / input description."""


class NumericalError(RuntimeError):
    """A numerical stage failed (instability, non-convergence, NaN data)."""
