"""Direct visual-inertial odometry with semi-dense mapping."""

__version__ = "0.1.0"
