"""Multi-camera BEV road occupancy detection."""

__version__ = "0.1.0"
