"""Heterogeneous slot-aware retentive network for node classification."""

__version__ = "0.1.0"
