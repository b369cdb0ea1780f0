"""Next-trip time and distance forecasting with LSTM/attention models and
TimeSHAP-style explanations."""

__version__ = "0.1.0"
