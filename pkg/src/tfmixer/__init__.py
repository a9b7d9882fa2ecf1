"""Joint time-frequency forecasting engine for irregular multivariate time series."""

__version__ = "0.1.0"
