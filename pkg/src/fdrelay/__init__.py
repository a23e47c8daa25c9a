"""Impairment-aware design and analysis of a full-duplex AF MIMO relay link."""

__version__ = "0.1.0"
