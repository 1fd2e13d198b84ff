"""intravol: intraday realized-volatility forecasting toolkit."""

__version__ = "0.1.0"
