"""Sequential perception-to-control navigation stack: geodesy, BEV mapping, GRU planning, blended control."""

__version__ = "0.1.0"
