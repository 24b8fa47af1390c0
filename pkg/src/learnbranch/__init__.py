"""Learned branching for small vehicle-routing and bin-packing integer programs."""

__version__ = "0.1.0"
