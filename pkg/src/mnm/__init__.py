"""Multi-view, multi-instance sparse lesion detector on a from-scratch tensor engine."""

__version__ = "0.1.0"
