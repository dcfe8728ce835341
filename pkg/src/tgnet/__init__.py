"""Traffic-weighted geographic comparison of road-network datasets."""

__version__ = "0.1.0"
