"""Trace-grounded compliance evaluation over a policy clause canon."""

__version__ = "0.1.0"
