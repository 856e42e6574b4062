"""tumorlab: reaction-diffusion tumor growth simulation, neural surrogate
forward solvers, and gradient-based growth-parameter calibration."""

__version__ = "0.1.0"
