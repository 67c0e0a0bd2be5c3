"""Human-to-humanoid motion retargeting with skeleton calibration and
progressive kinodynamic trajectory optimization."""

__version__ = "0.1.0"
