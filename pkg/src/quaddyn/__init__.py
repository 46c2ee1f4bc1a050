"""Learned quadrotor dynamics with history encoders and multi-step training."""

__version__ = "0.1.0"
