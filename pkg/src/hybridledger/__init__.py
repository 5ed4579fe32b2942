"""Permissioned ledger engine for exchange booking and settlement."""

__version__ = "0.1.0"
