"""Log-Gaussian Cox process models for spike trains on animal trajectories."""

__version__ = "0.1.0"
