"""Blockchain-enabled energy trading between an APG and CCHP communities."""

__version__ = "1.0.0"
