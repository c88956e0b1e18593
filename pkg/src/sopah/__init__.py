"""Battery cycling feature extraction, cleaning and transformer forecasting."""

__version__ = "0.1.0"
