"""Recovery of the wave-speed perturbation q(x) = c(x) - 1 of a 3D wave
equation from time-integrated boundary traces.

The pipeline reduces the measurements to a linear integral equation with
kernel 1/(|x - xi| |xi - x0|), expands the source dependence in a weighted
orthonormal basis, solves the resulting coupled elliptic Cauchy problem by
quasi-reversibility, and reads q off the recovered field.
"""

from waveinv.errors import ConfigError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "NumericalError", "__version__"]
