"""Residual calibration for real-time spatio-temporal forecasting."""

__version__ = "0.1.0"
