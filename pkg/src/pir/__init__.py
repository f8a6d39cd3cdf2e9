"""Post-forecast identification and revision for time-series forecasts."""

__version__ = "0.1.0"
