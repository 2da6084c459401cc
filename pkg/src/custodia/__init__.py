"""Secure storage and accountable re-identification with a traversable audit ledger."""

__version__ = "0.1.0"
