"""Tokoin: access capabilities as auditable coins on a permissioned BFT ledger."""

__version__ = "0.1.0"
