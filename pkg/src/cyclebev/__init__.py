"""Cycle-consistent BEV segmentation regularisation at desk scale."""

__version__ = "0.1.0"
